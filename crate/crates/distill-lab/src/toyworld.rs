//! Procedural 2D world: scenes, poses, analytic rasterization, degradation.
//!
//! A scene lives on a square canvas of `grid` world units (the same lattice
//! the texture field discretizes). It holds 1..=3 layered primitives (disks
//! and rectangles) carrying stripe or checker textures over a background
//! color. A pose is one scalar: an in-plane rotation azimuth from which a
//! horizontal shift is derived, so "novel views" are rotated, shifted
//! windows onto the canvas. Rasterization evaluates the scene analytically
//! at each mapped sample point and produces an exact layered depth map
//! (front shape nearest, background at -1).
//!
//! Everything is deterministic in the seed; views are what the denoiser
//! trains on and what enhancement/distillation are scored against.

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Depth value assigned to pixels no shape covers.
pub const BACKGROUND_DEPTH: f64 = -1.0;

/// Depth slots for up to three layered shapes, front first.
const SHAPE_DEPTHS: [f64; 3] = [1.0, 1.0 / 3.0, -1.0 / 3.0];

/// Number of scene archetypes: shape count (1..=3) x lead texture kind.
pub const NUM_CLASSES: usize = 6;

// ── pose ─────────────────────────────────────────────────────────────────

/// Camera for a view: rotate the sampling lattice by `azimuth` (radians)
/// about the canvas center, then push it sideways by `shift` world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub azimuth: f64,
    pub shift: f64,
}

impl Pose {
    /// The single-parameter camera: shift is derived from azimuth so one
    /// scalar sweeps the whole view family.
    pub fn from_azimuth(azimuth: f64, geom: &ViewGeometry) -> Pose {
        Pose {
            azimuth,
            shift: azimuth / std::f64::consts::PI * geom.max_shift,
        }
    }

    pub fn reference() -> Pose {
        Pose {
            azimuth: 0.0,
            shift: 0.0,
        }
    }
}

/// Shared camera geometry: view size, canvas size, shift range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewGeometry {
    /// Square view side in pixels.
    pub view: usize,
    /// Square canvas side in world units (texture-field resolution).
    pub grid: usize,
    /// Horizontal world offset at |azimuth| = pi.
    pub max_shift: f64,
}

impl ViewGeometry {
    pub fn new(view: usize, grid: usize) -> Result<Self> {
        if view == 0 || grid < view {
            return Err(Error::InvalidArgument(format!(
                "canvas ({grid}) must be at least the view size ({view})"
            )));
        }
        Ok(ViewGeometry {
            view,
            grid,
            // a quarter view of lateral travel across the pose range
            max_shift: view as f64 / 4.0,
        })
    }

    /// World coordinates sampled by view pixel (x, y) under `pose`.
    #[inline]
    pub fn world_point(&self, pose: &Pose, x: f64, y: f64) -> (f64, f64) {
        let cv = (self.view as f64 - 1.0) / 2.0;
        let cg = (self.grid as f64 - 1.0) / 2.0;
        let (sin, cos) = pose.azimuth.sin_cos();
        let (dx, dy) = (x - cv, y - cv);
        (
            cos * dx - sin * dy + cg + pose.shift,
            sin * dx + cos * dy + cg,
        )
    }
}

// ── scene ────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TextureKind {
    Stripe,
    Checker,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Disk,
    Rect,
}

#[derive(Clone, Debug)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Center in world units.
    pub center: (f64, f64),
    /// Disk radius, or rectangle half-extents.
    pub half: (f64, f64),
    /// Base RGB in [-1, 1].
    pub color: [f64; 3],
    pub texture: TextureKind,
    /// Texture spatial frequency (cycles per world unit).
    pub freq: f64,
    /// Texture orientation (radians) and phase offset.
    pub angle: f64,
    pub phase: f64,
    /// Texture contrast.
    pub amp: f64,
}

impl Shape {
    fn covers(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.center.0, v - self.center.1);
        match self.kind {
            ShapeKind::Disk => {
                (du / self.half.0).powi(2) + (dv / self.half.1).powi(2) <= 1.0
            }
            ShapeKind::Rect => du.abs() <= self.half.0 && dv.abs() <= self.half.1,
        }
    }

    /// Texture modulation in [-1, 1] at a world point.
    fn modulation(&self, u: f64, v: f64) -> f64 {
        let s = u * self.angle.cos() + v * self.angle.sin();
        match self.texture {
            TextureKind::Stripe => {
                (2.0 * std::f64::consts::PI * self.freq * s + self.phase).sin()
            }
            TextureKind::Checker => {
                let t = -u * self.angle.sin() + v * self.angle.cos();
                let cs = (self.freq * s + self.phase).floor() as i64;
                let ct = (self.freq * t).floor() as i64;
                if (cs + ct) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub seed: u64,
    pub geom: ViewGeometry,
    /// Front to back.
    pub shapes: Vec<Shape>,
    pub background: [f64; 3],
}

impl Scene {
    /// Procedurally sample a scene. Same seed, same scene.
    pub fn generate(seed: u64, geom: ViewGeometry) -> Scene {
        let mut r = rng::stream(seed, "scene", 0);
        let w = geom.view as f64;
        let cg = (geom.grid as f64 - 1.0) / 2.0;
        let background = [
            r.gen_range(-0.85..-0.35),
            r.gen_range(-0.85..-0.35),
            r.gen_range(-0.85..-0.35),
        ];
        let count = r.gen_range(1..=3usize);
        let shapes = (0..count)
            .map(|_| {
                let kind = if r.gen_bool(0.5) {
                    ShapeKind::Disk
                } else {
                    ShapeKind::Rect
                };
                let texture = if r.gen_bool(0.5) {
                    TextureKind::Stripe
                } else {
                    TextureKind::Checker
                };
                // centers stay near the canvas middle so every pose keeps
                // most of the content in frame
                let center = (
                    cg + r.gen_range(-0.22..0.22) * w,
                    cg + r.gen_range(-0.22..0.22) * w,
                );
                let half = (
                    r.gen_range(0.14..0.30) * w,
                    r.gen_range(0.14..0.30) * w,
                );
                let color = [
                    r.gen_range(-0.1..0.9),
                    r.gen_range(-0.1..0.9),
                    r.gen_range(-0.1..0.9),
                ];
                // periods of roughly 3..7 view pixels: fine enough to be
                // erased by the degradation blur, coarse enough to survive
                // bilinear resampling
                let freq = r.gen_range(0.15..0.33);
                let angle = r.gen_range(0.0..std::f64::consts::PI);
                let phase = r.gen_range(0.0..std::f64::consts::TAU);
                let amp = r.gen_range(0.25..0.45);
                Shape {
                    kind,
                    center,
                    half,
                    color,
                    texture,
                    freq,
                    angle,
                    phase,
                    amp,
                }
            })
            .collect();
        Scene {
            seed,
            geom,
            shapes,
            background,
        }
    }

    /// Scene archetype in `0..NUM_CLASSES`: (shape count - 1) * 2 + lead
    /// shape's texture kind.
    pub fn class_id(&self) -> usize {
        let tex = match self.shapes[0].texture {
            TextureKind::Stripe => 0,
            TextureKind::Checker => 1,
        };
        (self.shapes.len() - 1) * 2 + tex
    }

    /// Analytic color and depth at a world point.
    pub fn sample(&self, u: f64, v: f64) -> ([f64; 3], f64) {
        for (i, shape) in self.shapes.iter().enumerate() {
            if shape.covers(u, v) {
                let m = shape.modulation(u, v) * shape.amp;
                let col = [
                    (shape.color[0] + m).clamp(-1.0, 1.0),
                    (shape.color[1] + m).clamp(-1.0, 1.0),
                    (shape.color[2] + m).clamp(-1.0, 1.0),
                ];
                return (col, SHAPE_DEPTHS[i]);
            }
        }
        (self.background, BACKGROUND_DEPTH)
    }
}

// ── views ────────────────────────────────────────────────────────────────

/// One rendered observation: image `[3, v, v]`, exact depth `[v, v]`, pose.
#[derive(Clone, Debug)]
pub struct View {
    pub image: Tensor,
    pub depth: Tensor,
    pub pose: Pose,
}

/// Rasterize the scene under a pose. Point-sampled (no anti-aliasing),
/// analytic everywhere, values already in [-1, 1].
pub fn render_view(scene: &Scene, pose: &Pose) -> View {
    let v = scene.geom.view;
    let mut image = Tensor::zeros(&[3, v, v]);
    let mut depth = Tensor::zeros(&[v, v]);
    for y in 0..v {
        for x in 0..v {
            let (u, w) = scene.geom.world_point(pose, x as f64, y as f64);
            let (col, d) = scene.sample(u, w);
            for c in 0..3 {
                image.set3(c, y, x, col[c]);
            }
            depth.set2(y, x, d);
        }
    }
    View {
        image,
        depth,
        pose: *pose,
    }
}

/// Simulate a low-quality capture: Gaussian blur, per-channel color shift,
/// additive noise. Depth is untouched; output clamped to [-1, 1].
/// `severity` 0 returns the input exactly.
pub fn degrade_view(view: &View, severity: f64, seed: u64) -> Result<View> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::InvalidArgument(format!(
            "severity must be in [0, 1], got {severity}"
        )));
    }
    if severity == 0.0 {
        return Ok(view.clone());
    }
    let shape = view.image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut r = rng::stream(seed, "degrade", 0);

    // blur with a truncated normalized Gaussian, clamp-to-edge borders
    let sigma = 2.5 * severity;
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let tsum: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / tsum).collect();

    let mut blurred = vec![0.0; c * h * w];
    let src = view.image.data();
    // horizontal
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &g) in taps.iter().enumerate() {
                    let xx = (x as i64 + i as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += g * src[(ch * h + y) * w + xx];
                }
                blurred[(ch * h + y) * w + x] = acc;
            }
        }
    }
    // vertical, in place over a copy
    let hpass = blurred.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &g) in taps.iter().enumerate() {
                    let yy = (y as i64 + i as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += g * hpass[(ch * h + yy) * w + x];
                }
                blurred[(ch * h + y) * w + x] = acc;
            }
        }
    }

    let shift: Vec<f64> = (0..c)
        .map(|_| r.gen_range(-0.15 * severity..0.15 * severity))
        .collect();
    let noise_std = 0.05 * severity;
    let mut image = Tensor::from_vec(&shape, blurred);
    for ch in 0..c {
        for i in 0..h * w {
            let idx = ch * h * w + i;
            let n: f64 = r.sample(StandardNormal);
            image.data_mut()[idx] =
                (image.data()[idx] + shift[ch] + noise_std * n).clamp(-1.0, 1.0);
        }
    }
    Ok(View {
        image,
        depth: view.depth.clone(),
        pose: view.pose,
    })
}

// ── dataset ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub view: View,
    pub class_id: usize,
    pub scene_seed: u64,
}

/// Training corpus: `num_scenes` procedural scenes, `views_per_scene`
/// uniformly drawn poses each.
pub fn make_dataset(
    num_scenes: usize,
    views_per_scene: usize,
    seed: u64,
    geom: ViewGeometry,
) -> Vec<DatasetItem> {
    let mut items = Vec::with_capacity(num_scenes * views_per_scene);
    for s in 0..num_scenes {
        let scene_seed = rng::derive_seed(seed, "dataset-scene", s as u64);
        let scene = Scene::generate(scene_seed, geom);
        let class_id = scene.class_id();
        let mut pose_rng = rng::stream(seed, "dataset-pose", s as u64);
        for _ in 0..views_per_scene {
            let az = pose_rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let pose = Pose::from_azimuth(az, &geom);
            items.push(DatasetItem {
                view: render_view(&scene, &pose),
                class_id,
                scene_seed,
            });
        }
    }
    items
}

/// SHA-256 over the dataset serialized as a little-endian f32 stream:
/// per item, image (c, y, x order), depth (y, x), azimuth, shift, class id.
pub fn dataset_digest(items: &[DatasetItem]) -> String {
    let mut hasher = Sha256::new();
    let mut push = |v: f64| hasher.update((v as f32).to_le_bytes());
    for item in items {
        for &v in item.view.image.data() {
            push(v);
        }
        for &v in item.view.depth.data() {
            push(v);
        }
        push(item.view.pose.azimuth);
        push(item.view.pose.shift);
        push(item.class_id as f64);
    }
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

// ── png export ───────────────────────────────────────────────────────────

/// Map a `[3, h, w]` tensor in [-1, 1] to 8-bit RGB rows.
pub fn to_rgb8(image: &Tensor) -> Result<image::RgbImage> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidArgument(format!(
            "png export expects [3, h, w], got {:?}",
            shape
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = (image.at3(c, y, x) + 1.0) / 2.0 * 255.0;
                v.round().clamp(0.0, 255.0) as u8
            });
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(out)
}

/// Write a tensor as PNG with the affine [-1,1] -> [0,255] mapping.
pub fn save_png(image: &Tensor, path: &std::path::Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    to_rgb8(image)?.save(path)?;
    Ok(())
}

/// Stack images horizontally with a 2-pixel black separator (side-by-side
/// comparison panels).
pub fn hstack_panel(images: &[&Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty panel".into()));
    }
    let shape = images[0].shape().to_vec();
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(
                "panel images must share one shape".into(),
            ));
        }
    }
    let (h, w) = (shape[1], shape[2]);
    let sep = 2usize;
    let total_w = images.len() * w + (images.len() - 1) * sep;
    let mut panel = Tensor::full(&[3, h, total_w], -1.0);
    for (i, img) in images.iter().enumerate() {
        let x0 = i * (w + sep);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    panel.set3(c, y, x0 + x, img.at3(c, y, x));
                }
            }
        }
    }
    Ok(panel)
}
