//! The optimizable scene representation: a `[3, grid, grid]` texture field
//! rendered by bilinear window sampling.
//!
//! `render` rotates the view's sampling lattice by the pose azimuth, offsets
//! it by the pose shift (the same camera as `toyworld`), and gathers each
//! view pixel from the field with bilinear weights, clamp-to-edge at the
//! border. The output is linear in the texels, so the hand-derived
//! `render_backward` scatter is the exact adjoint, not an approximation.

use crate::tensor::Tensor;
use crate::toyworld::{Pose, View, ViewGeometry};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TextureField {
    grid: usize,
    /// `[3, grid, grid]` texel values, kept in [-1, 1] by the optimizers.
    pub data: Tensor,
}

/// The four taps of one bilinear sample: texel indices and weights.
/// Out-of-range coordinates clamp to the border texel, so weights always
/// sum to 1 and every tap is in range.
#[inline]
fn taps(u: f64, v: f64, grid: usize) -> [(usize, usize, f64); 4] {
    let gmax = grid as f64 - 1.0;
    let x0f = u.floor();
    let y0f = v.floor();
    let fx = u - x0f;
    let fy = v - y0f;
    let cl = |p: f64| p.clamp(0.0, gmax) as usize;
    let (x0, x1) = (cl(x0f), cl(x0f + 1.0));
    let (y0, y1) = (cl(y0f), cl(y0f + 1.0));
    [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ]
}

impl TextureField {
    /// Mid-gray (all zeros) field.
    pub fn gray(grid: usize) -> TextureField {
        TextureField {
            grid,
            data: Tensor::zeros(&[3, grid, grid]),
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Initialize by splatting the reference view into the canonical window
    /// (adjoint scatter with per-texel weight normalization); texels the
    /// reference never touches stay zero.
    pub fn from_reference(reference: &View, geom: &ViewGeometry) -> Result<TextureField> {
        check_geom(geom, reference.image.shape())?;
        let grid = geom.grid;
        let mut acc = Tensor::zeros(&[3, grid, grid]);
        let mut wsum = Tensor::zeros(&[grid, grid]);
        let v = geom.view;
        for y in 0..v {
            for x in 0..v {
                let (u, w) = geom.world_point(&reference.pose, x as f64, y as f64);
                for (ty, tx, wt) in taps(u, w, grid) {
                    wsum.set2(ty, tx, wsum.at2(ty, tx) + wt);
                    for c in 0..3 {
                        acc.set3(c, ty, tx, acc.at3(c, ty, tx) + wt * reference.image.at3(c, y, x));
                    }
                }
            }
        }
        let mut data = Tensor::zeros(&[3, grid, grid]);
        for ty in 0..grid {
            for tx in 0..grid {
                let wt = wsum.at2(ty, tx);
                if wt > 1e-9 {
                    for c in 0..3 {
                        data.set3(c, ty, tx, acc.at3(c, ty, tx) / wt);
                    }
                }
            }
        }
        Ok(TextureField { grid, data })
    }

    pub fn clamp_inplace(&mut self) {
        self.data.clamp_inplace(-1.0, 1.0);
    }
}

fn check_geom(geom: &ViewGeometry, img_shape: &[usize]) -> Result<()> {
    if img_shape != [3, geom.view, geom.view] {
        return Err(Error::ShapeMismatch(format!(
            "view image {:?} does not match geometry view size {}",
            img_shape, geom.view
        )));
    }
    Ok(())
}

/// Render the field under a pose: `[3, view, view]` bilinear gather.
pub fn render(field: &TextureField, pose: &Pose, geom: &ViewGeometry) -> Result<Tensor> {
    if field.grid != geom.grid {
        return Err(Error::ShapeMismatch(format!(
            "field grid {} vs geometry grid {}",
            field.grid, geom.grid
        )));
    }
    let v = geom.view;
    let g = field.grid;
    let mut out = Tensor::zeros(&[3, v, v]);
    let fdata = field.data.data();
    for y in 0..v {
        for x in 0..v {
            let (u, w) = geom.world_point(pose, x as f64, y as f64);
            let tp = taps(u, w, g);
            for c in 0..3 {
                let base = c * g * g;
                let mut acc = 0.0;
                for &(ty, tx, wt) in &tp {
                    acc += wt * fdata[base + ty * g + tx];
                }
                out.set3(c, y, x, acc);
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`render`]: scatter an upstream image gradient back to
/// texel space. `⟨render(e), u⟩ = ⟨e, render_backward(u)⟩` for all e, u.
pub fn render_backward(
    grad_image: &Tensor,
    pose: &Pose,
    geom: &ViewGeometry,
    grid: usize,
) -> Result<Tensor> {
    check_geom(geom, grad_image.shape())?;
    if grid != geom.grid {
        return Err(Error::ShapeMismatch(format!(
            "field grid {} vs geometry grid {}",
            grid, geom.grid
        )));
    }
    let v = geom.view;
    let mut out = Tensor::zeros(&[3, grid, grid]);
    for y in 0..v {
        for x in 0..v {
            let (u, w) = geom.world_point(pose, x as f64, y as f64);
            let tp = taps(u, w, grid);
            for c in 0..3 {
                let gv = grad_image.at3(c, y, x);
                for &(ty, tx, wt) in &tp {
                    out.set3(c, ty, tx, out.at3(c, ty, tx) + wt * gv);
                }
            }
        }
    }
    Ok(out)
}

/// Texels that at least `min_count` of the given poses sample with a
/// non-negligible bilinear weight. Used to define the multi-view overlap
/// region when comparing refinement strategies.
pub fn coverage_mask(
    poses: &[Pose],
    geom: &ViewGeometry,
    min_count: usize,
) -> Vec<bool> {
    let g = geom.grid;
    let mut counts = vec![0usize; g * g];
    for pose in poses {
        let mut touched = vec![false; g * g];
        for y in 0..geom.view {
            for x in 0..geom.view {
                let (u, w) = geom.world_point(pose, x as f64, y as f64);
                for (ty, tx, wt) in taps(u, w, g) {
                    if wt > 1e-6 {
                        touched[ty * g + tx] = true;
                    }
                }
            }
        }
        for (c, t) in counts.iter_mut().zip(&touched) {
            *c += usize::from(*t);
        }
    }
    counts.iter().map(|&c| c >= min_count).collect()
}

/// Mean central-difference gradient magnitude of the field over a texel
/// mask; a sharpness score (blurrier fields score lower).
pub fn mean_gradient_magnitude(field: &TextureField, mask: &[bool]) -> f64 {
    let g = field.grid;
    assert_eq!(mask.len(), g * g, "mask must cover the texel grid");
    let mut total = 0.0;
    let mut n = 0usize;
    for ty in 1..g - 1 {
        for tx in 1..g - 1 {
            if !mask[ty * g + tx] {
                continue;
            }
            for c in 0..3 {
                let gx = (field.data.at3(c, ty, tx + 1) - field.data.at3(c, ty, tx - 1)) / 2.0;
                let gy = (field.data.at3(c, ty + 1, tx) - field.data.at3(c, ty - 1, tx)) / 2.0;
                total += (gx * gx + gy * gy).sqrt();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}
