//! Acceptance suite behind `distill-lab verify` and the integration tests.
//!
//! Ten checks, each mapping one exit criterion of the lab: exact DDIM
//! round trips, finite-difference oracles for every hand-written gradient,
//! injection bit-identity, the depth/injection/distillation orderings the
//! enhancement pipeline is supposed to show, detachment of the frozen
//! denoiser, byte determinism of the artifact paths, and the refine-stage
//! alternation audit. Frozen fixture numbers live in
//! `fixtures/thresholds.json`, embedded at compile time; checks compare
//! against those, never against inline magic numbers.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::distill::{
    coarse_stage, refine_stage, rgsd_update, sds_gradient_for_residual, RefineLoss, RgsdConfig,
    StageOptions, StageRun, WeightKind,
};
use crate::harness::{self, GenerateArgs};
use crate::metrics;
use crate::nncore::{
    backward, forward, forward_train, init_params, load_params, save_params, Condition,
    DenoiserConfig, DenoiserParams,
};
use crate::repfield::{
    coverage_mask, mean_gradient_magnitude, render, render_backward, TextureField,
};
use crate::rgnv::{self, Trajectory};
use crate::scheduler::{LatentState, NoiseSchedule, ScheduleKind};
use crate::tensor::Tensor;
use crate::toyworld::{render_view, Pose, Scene, View, ViewGeometry, NUM_CLASSES};
use crate::{rng, Error, Result};

/// Frozen fixture numbers; regenerated only by the fixture tooling, then
/// reviewed and committed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Digest of the default training corpus (guards the procedural world).
    pub dataset_digest: String,
    /// Digest of the committed fixture weights file.
    pub weights_digest: String,
    /// Final epoch loss ceiling for the fixture training run.
    pub train_final_loss_max: f64,
    /// Self-enhancement reconstruction MSE ceiling (check ac3).
    pub enhance_self_mse_max: f64,
    /// Reference-pose PSNR floor after the fixture coarse stage.
    pub coarse_ref_psnr_min: f64,
}

pub fn thresholds() -> Result<Thresholds> {
    serde_json::from_str(include_str!("../fixtures/thresholds.json"))
        .map_err(|e| Error::Config(format!("fixtures/thresholds.json: {e}")))
}

/// Azimuth of the degraded target view used by the fixture enhancement
/// checks; distinct from the reference (0) and the fixed refine poses.
pub const FIXTURE_TARGET_AZIMUTH: f64 = 0.9;

pub const CHECK_IDS: [&str; 10] = [
    "ac1", "ac2", "ac3", "ac4", "ac5", "ac6", "ac7", "ac8", "ac9", "ac10",
];

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub id: &'static str,
    pub label: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Trained weights to check against; trains from the config if absent.
    pub weights: Option<PathBuf>,
    /// Subset of check ids to run; everything when empty.
    pub only: Vec<String>,
    /// Mutation-testing hook: feed the round-trip check a sign-flipped
    /// inversion step, which must make it fail.
    pub mutate_invert_sign: bool,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    /// Loaded only when a selected check actually consults the denoiser.
    params: Option<DenoiserParams>,
    thresholds: Thresholds,
    bundle: Option<DistillBundle>,
}

/// One full two-stage run per refine loss, shared by the ordering checks.
struct DistillBundle {
    coarse: StageRun,
    rgsd: StageRun,
    image: StageRun,
    psnr_coarse: f64,
    psnr_rgsd: f64,
    psnr_sds: f64,
}

impl<'a> Ctx<'a> {
    fn geom(&self) -> ViewGeometry {
        self.cfg.geometry()
    }

    fn params(&self) -> &DenoiserParams {
        self.params
            .as_ref()
            .expect("run_all loads weights before any check that needs them")
    }

    fn fixture_scene(&self) -> (Scene, View, usize) {
        let scene = Scene::generate(self.cfg.scene_seeds[0], self.geom());
        let reference = render_view(&scene, &Pose::reference());
        let class = scene.class_id();
        (scene, reference, class)
    }

    fn distill_ladder(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.cfg.rgsd.steps, self.cfg.schedule.kind)
    }

    fn enhance_ladder(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.cfg.rgnv.steps, self.cfg.schedule.kind)
    }

    fn bundle(&mut self) -> Result<&DistillBundle> {
        if self.bundle.is_none() {
            let (scene, reference, class) = self.fixture_scene();
            let schedule = self.distill_ladder()?;
            let seed = rng::derive_seed(self.cfg.seed, "verify-distill", 0);
            let params = self.params();
            let coarse = coarse_stage(
                &scene,
                &reference,
                class,
                params,
                &schedule,
                &self.cfg.sds,
                &StageOptions {
                    field_lr: self.cfg.stages.field_lr,
                    ..StageOptions::new(self.cfg.stages.coarse_iters, seed)
                },
            )?;
            let mut refined = Vec::with_capacity(3);
            for kind in [RefineLoss::Rgsd, RefineLoss::Sds, RefineLoss::Image] {
                refined.push(refine_stage(
                    &coarse.field,
                    &scene,
                    &reference,
                    class,
                    params,
                    &schedule,
                    &self.cfg.rgsd,
                    &StageOptions {
                        field_lr: self.cfg.stages.field_lr,
                        ..StageOptions::new(
                            self.cfg.stages.refine_iters,
                            rng::derive_seed(seed, "refine", 1),
                        )
                    },
                    kind,
                )?);
            }
            let image = refined.pop().expect("three refine runs");
            let sds = refined.pop().expect("two left");
            let rgsd = refined.pop().expect("one left");
            let geom = self.geom();
            let mean_psnr = |field: &TextureField| -> Result<f64> {
                let mut acc = 0.0;
                let azs = harness::novel_azimuths();
                for &az in &azs {
                    let pose = Pose::from_azimuth(az, &geom);
                    let gt = render_view(&scene, &pose);
                    acc += metrics::psnr_db_capped(&render(field, &pose, &geom)?, &gt.image)?;
                }
                Ok(acc / azs.len() as f64)
            };
            self.bundle = Some(DistillBundle {
                psnr_coarse: mean_psnr(&coarse.field)?,
                psnr_rgsd: mean_psnr(&rgsd.field)?,
                psnr_sds: mean_psnr(&sds.field)?,
                coarse,
                rgsd,
                image,
            });
        }
        Ok(self.bundle.as_ref().expect("bundle just built"))
    }
}

/// Run the acceptance suite. Trains a denoiser from the config when no
/// weights are supplied, then executes the selected checks in order.
pub fn run_all(cfg: &ExperimentConfig, opts: &VerifyOptions) -> Result<VerifyReport> {
    cfg.validate()?;
    for id in &opts.only {
        if !CHECK_IDS.contains(&id.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "unknown check id {id}; valid ids are {}",
                CHECK_IDS.join(", ")
            )));
        }
    }
    let labelled: [(&'static str, &'static str); 10] = [
        ("ac1", "ddim round trip"),
        ("ac2", "gradient oracles"),
        ("ac3", "self-injection identity"),
        ("ac4", "depth conditioning ordering"),
        ("ac5", "enhancement ablation ordering"),
        ("ac6", "distillation psnr ordering"),
        ("ac7", "overlap sharpness ordering"),
        ("ac8", "denoiser detachment"),
        ("ac9", "generate determinism"),
        ("ac10", "refine alternation audit"),
    ];
    let selected: Vec<(&'static str, &'static str)> = labelled
        .into_iter()
        .filter(|(id, _)| opts.only.is_empty() || opts.only.iter().any(|s| s == id))
        .collect();

    // ac1, ac2, and ac10 run on self-contained miniatures; only load (or
    // train) the experiment denoiser when a selected check consults it
    let needs_params = selected
        .iter()
        .any(|(id, _)| !matches!(*id, "ac1" | "ac2" | "ac10"));
    let params = if !needs_params {
        None
    } else {
        let p = match &opts.weights {
            Some(path) => load_params(path)?,
            None => {
                let items = crate::toyworld::make_dataset(
                    cfg.train.num_scenes,
                    cfg.train.views_per_scene,
                    rng::derive_seed(cfg.seed, "dataset", 0),
                    cfg.geometry(),
                );
                let schedule = NoiseSchedule::new(cfg.schedule.train_steps, cfg.schedule.kind)?;
                let opts_t = crate::nncore::TrainOptions {
                    epochs: cfg.train.epochs,
                    lr: cfg.train.lr,
                    batch_size: cfg.train.batch_size,
                };
                crate::nncore::train(
                    &items,
                    &cfg.denoiser,
                    &schedule,
                    &opts_t,
                    rng::derive_seed(cfg.seed, "train", 0),
                )?
                .0
            }
        };
        if p.cfg.image_size != cfg.world.view {
            return Err(Error::Config(format!(
                "weights expect {}x{} inputs but world.view is {}",
                p.cfg.image_size, p.cfg.image_size, cfg.world.view
            )));
        }
        Some(p)
    };

    let mut ctx = Ctx {
        cfg,
        params,
        thresholds: thresholds()?,
        bundle: None,
    };
    let mut report = VerifyReport::default();
    for (id, label) in selected {
        let start = Instant::now();
        let result = match id {
            "ac1" => check_round_trip(opts.mutate_invert_sign),
            "ac2" => check_gradient_oracles(&ctx),
            "ac3" => check_self_injection(&ctx),
            "ac4" => check_depth_ordering(&ctx),
            "ac5" => check_enhance_ablations(&ctx),
            "ac6" => check_distill_ordering(&mut ctx),
            "ac7" => check_overlap_sharpness(&mut ctx),
            "ac8" => check_detachment(&ctx),
            "ac9" => check_generate_determinism(&ctx),
            "ac10" => check_alternation_audit(),
            _ => unreachable!("ids enumerated above"),
        };
        let (passed, detail) = match result {
            Ok(pd) => pd,
            Err(e) => (false, format!("errored: {e}")),
        };
        report.checks.push(CheckOutcome {
            id,
            label,
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

// ── ac1 ──────────────────────────────────────────────────────────────────

/// Inversion step with the terminal noise term's sign flipped; the
/// mutation hook that must break the round trip.
fn flawed_invert_step(
    schedule: &NoiseSchedule,
    prev: &LatentState,
    eps: &Tensor,
    t: usize,
) -> LatentState {
    let (a_t, s_t) = (schedule.alpha(t), schedule.sigma(t));
    let (a_p, s_p) = (schedule.alpha(t - 1), schedule.sigma(t - 1));
    let data = prev
        .data
        .zip(eps, |x, e| (a_t / a_p) * (x - s_p * e) - s_t * e);
    LatentState { data, t }
}

fn check_round_trip(mutate: bool) -> Result<(bool, String)> {
    let steps = 50;
    let schedule = NoiseSchedule::new(steps, ScheduleKind::Cosine)?;
    let shape = [3usize, 32, 32];
    let mut max_rel: f64 = 0.0;
    for trial in 0..50u64 {
        let x0 = Tensor::randn(&shape, &mut rng::stream(101, "ac1-x0", trial));
        // a t-only predictor: the noise estimate depends on the rung alone
        let eps_for =
            |t: usize| Tensor::randn(&shape, &mut rng::stream(202, "ac1-eps", t as u64));
        let mut state = LatentState::clean(x0.clone());
        for t in 1..=steps {
            let eps = eps_for(t);
            state = if mutate {
                flawed_invert_step(&schedule, &state, &eps, t)
            } else {
                schedule.ddim_invert_step(&state, &eps, t)?
            };
        }
        for t in (1..=steps).rev() {
            state = schedule.ddim_step(&state, &eps_for(t), t - 1)?;
        }
        max_rel = max_rel.max(state.data.sub(&x0).norm() / x0.norm());
    }
    Ok((
        max_rel <= 1e-5,
        format!("max relative error {max_rel:.2e} over 50 round trips (tolerance 1e-5)"),
    ))
}

// ── ac2 ──────────────────────────────────────────────────────────────────

fn fd_tiny_params(seed: u64) -> Result<DenoiserParams> {
    let cfg = DenoiserConfig {
        image_size: 8,
        base_channels: 4,
        attn_heads: 2,
        attn_resolution: 2,
        num_classes: NUM_CLASSES,
        cond_drop_prob: 0.1,
    };
    let mut p = init_params(&cfg, seed)?;
    let mut i = 0;
    for (_, arr) in p.arrays_mut() {
        let mut r = rng::stream(seed, "fd-params", i);
        i += 1;
        for v in arr.data_mut() {
            *v = 0.25 * r.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    Ok(p)
}

/// Probe a few coordinates of every parameter array of the denoiser
/// against central differences of the scalar loss `|eps|^2`.
fn denoiser_fd_probes() -> Result<(usize, usize, f64)> {
    let params = fd_tiny_params(11)?;
    let mut r = rng::stream(12, "fd-data", 0);
    let x = Tensor::randn(&[3, 8, 8], &mut r);
    let depth = Tensor::randn(&[8, 8], &mut r);
    let cond = Condition::new(depth, 1);
    let t_frac = 0.4;

    let (out, tape) = forward_train(&params, &x, t_frac, &cond)?;
    let grads = backward(&params, &tape, &out.eps.scale(2.0));
    let gmax = grads
        .arrays()
        .iter()
        .map(|(_, a)| a.max_abs())
        .fold(0.0f64, f64::max);

    let loss_of = |p: &DenoiserParams| -> Result<f64> {
        Ok(forward(p, &x, t_frac, &cond, None)?.eps.sqnorm())
    };
    let h = 1e-4;
    let names: Vec<&'static str> = grads.arrays().iter().map(|(n, _)| *n).collect();
    let (mut total, mut ok, mut worst) = (0usize, 0usize, 0.0f64);
    for (ai, name) in names.iter().enumerate() {
        let len = grads.arrays()[ai].1.numel();
        let mut probe = rng::stream(13, name, 0);
        for _ in 0..6 {
            let i = probe.gen_range(0..len);
            let mut plus = params.clone();
            plus.arrays_mut()[ai].1.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.arrays_mut()[ai].1.data_mut()[i] -= h;
            let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
            let an = grads.arrays()[ai].1.data()[i];
            let err = (fd - an).abs();
            let rel = err / fd.abs().max(an.abs()).max(1e-12);
            total += 1;
            if err <= (1e-3 * fd.abs().max(an.abs())).max(1e-6 * gmax) {
                ok += 1;
            } else {
                worst = worst.max(rel);
            }
        }
    }
    Ok((ok, total, worst))
}

/// Central-difference probes of a linear surrogate `<g, render(theta)>`
/// against an adjoint-produced gradient.
fn linear_fd_probes(
    field: &mut TextureField,
    geom: &ViewGeometry,
    pose: &Pose,
    grad: &Tensor,
    surrogate: impl Fn(&TextureField) -> Result<f64>,
    probes: usize,
    probe_seed: u64,
) -> Result<(usize, usize, f64)> {
    let h = 1e-4;
    let _ = (geom, pose);
    let mut r = rng::stream(probe_seed, "probe", 0);
    let (mut ok, mut worst) = (0usize, 0.0f64);
    for _ in 0..probes {
        let i = r.gen_range(0..field.data.numel());
        let orig = field.data.data()[i];
        field.data.data_mut()[i] = orig + h;
        let lp = surrogate(field)?;
        field.data.data_mut()[i] = orig - h;
        let lm = surrogate(field)?;
        field.data.data_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let an = grad.data()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        if rel <= 1e-3 {
            ok += 1;
        } else {
            worst = worst.max(rel);
        }
    }
    Ok((ok, probes, worst))
}

fn check_gradient_oracles(ctx: &Ctx) -> Result<(bool, String)> {
    // denoiser layers
    let (net_ok, net_total, net_worst) = denoiser_fd_probes()?;

    // renderer adjoint
    let geom = ViewGeometry::new(8, 12)?;
    let mut field = TextureField::gray(12);
    let mut r = rng::stream(21, "field", 0);
    for v in field.data.data_mut() {
        *v = 0.8 * r.gen_range(-1.0..1.0);
    }
    let pose = Pose::from_azimuth(0.7, &geom);
    let g = Tensor::randn(&[3, 8, 8], &mut r);
    let grad = render_backward(&g, &pose, &geom, 12)?;
    let (render_ok, render_total, render_worst) = linear_fd_probes(
        &mut field,
        &geom,
        &pose,
        &grad,
        |f| Ok(g.dot(&render(f, &pose, &geom)?)),
        100,
        22,
    )?;

    // score-distillation gradient through the same adjoint
    let schedule = NoiseSchedule::new(20, ScheduleKind::Cosine)?;
    let resid = Tensor::randn(&[3, 8, 8], &mut r);
    let t = 7;
    let sds_grad =
        sds_gradient_for_residual(&resid, t, &pose, &geom, &schedule, WeightKind::Sigma2)?;
    let w = schedule.sigma(t).powi(2) * schedule.alpha(t);
    let (sds_ok, sds_total, sds_worst) = linear_fd_probes(
        &mut field,
        &geom,
        &pose,
        &sds_grad,
        |f| Ok(w * resid.dot(&render(f, &pose, &geom)?)),
        100,
        23,
    )?;

    // state-distillation loss vs its gradient
    let tau = 9;
    let targets = Trajectory {
        initial: LatentState {
            data: Tensor::zeros(&[3, 8, 8]),
            t: tau + 1,
        },
        steps: vec![crate::rgnv::StepRecord {
            rung: tau,
            eps: Tensor::randn(&[3, 8, 8], &mut r),
            state: LatentState {
                data: Tensor::randn(&[3, 8, 8], &mut r),
                t: tau,
            },
            cache_cond: None,
            cache_uncond: None,
        }],
    };
    let (_, rgsd_grad) = rgsd_update(&field, &pose, &geom, &targets, tau, &schedule)?;
    let (rgsd_ok, rgsd_total, rgsd_worst) = linear_fd_probes(
        &mut field,
        &geom,
        &pose,
        &rgsd_grad,
        |f| Ok(rgsd_update(f, &pose, &geom, &targets, tau, &schedule)?.0),
        100,
        24,
    )?;

    let _ = ctx;
    let passed = net_ok == net_total
        && render_ok == render_total
        && sds_ok == sds_total
        && rgsd_ok == rgsd_total;
    Ok((
        passed,
        format!(
            "probes ok: denoiser {net_ok}/{net_total}, render {render_ok}/{render_total}, \
             score {sds_ok}/{sds_total}, state {rgsd_ok}/{rgsd_total} \
             (worst failing rel {:.1e})",
            net_worst.max(render_worst).max(sds_worst).max(rgsd_worst)
        ),
    ))
}

// ── ac3 ──────────────────────────────────────────────────────────────────

fn check_self_injection(ctx: &Ctx) -> Result<(bool, String)> {
    let (_, reference, class) = ctx.fixture_scene();
    let cond = Condition::new(reference.depth.clone(), class);

    // bit identity of a self-captured cache
    let plain = forward(ctx.params(), &reference.image, 0.5, &cond, None)?;
    let injected = forward(
        ctx.params(),
        &reference.image,
        0.5,
        &cond,
        Some(&plain.cache),
    )?;
    let identical = plain.eps.data() == injected.eps.data();

    // self-enhancement: coarse == reference must come back almost exactly
    let schedule = ctx.enhance_ladder()?;
    let out = rgnv::enhance(
        ctx.params(),
        &schedule,
        class,
        &reference.image,
        &reference.depth,
        &reference.image,
        &reference.depth,
        &ctx.cfg.rgnv,
    )?;
    let mse = metrics::mse(&out.enhanced, &reference.image)?;
    let below = mse <= ctx.thresholds.enhance_self_mse_max;
    Ok((
        identical && below,
        format!(
            "self-injected forward bit-identical: {identical}; self-enhance mse {mse:.3e} \
             (threshold {:.3e})",
            ctx.thresholds.enhance_self_mse_max
        ),
    ))
}

// ── ac4 ──────────────────────────────────────────────────────────────────

fn roundtrip_mse(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    image: &Tensor,
    cond: &Condition,
    to_t: usize,
) -> Result<f64> {
    let walk = rgnv::invert(params, schedule, image, cond, 0.0, to_t, false)?;
    let back = rgnv::sample(
        params,
        schedule,
        walk.final_state().clone(),
        cond,
        0.0,
        false,
    )?;
    metrics::mse(&back.final_state().data, image)
}

fn check_depth_ordering(ctx: &Ctx) -> Result<(bool, String)> {
    let geom = ctx.geom();
    let schedule = ctx.enhance_ladder()?;
    let l = ctx.cfg.rgnv.start_rung();
    let mut wins = 0usize;
    let n = ctx.cfg.scene_seeds.len();
    for &seed in &ctx.cfg.scene_seeds {
        let scene = Scene::generate(seed, geom);
        let reference = render_view(&scene, &Pose::reference());
        let class = scene.class_id();
        let with_depth = Condition::new(reference.depth.clone(), class);
        let without_depth = with_depth.without_depth();
        let mse_with = roundtrip_mse(ctx.params(), &schedule, &reference.image, &with_depth, l)?;
        let mse_without =
            roundtrip_mse(ctx.params(), &schedule, &reference.image, &without_depth, l)?;
        if mse_with < mse_without {
            wins += 1;
        }
    }
    let frac = wins as f64 / n as f64;
    Ok((
        n >= 20 && frac >= 0.9,
        format!("depth-conditioned round trip wins on {wins}/{n} scenes (need >= 90% of >= 20)"),
    ))
}

// ── ac5 ──────────────────────────────────────────────────────────────────

fn check_enhance_ablations(ctx: &Ctx) -> Result<(bool, String)> {
    let geom = ctx.geom();
    let (scene, reference, class) = ctx.fixture_scene();
    let target = render_view(&scene, &Pose::from_azimuth(FIXTURE_TARGET_AZIMUTH, &geom));
    let coarse = crate::toyworld::degrade_view(
        &target,
        ctx.cfg.world.degrade_severity,
        rng::derive_seed(ctx.cfg.seed, "degrade", 0),
    )?;
    let schedule = ctx.enhance_ladder()?;
    let cfg_r = &ctx.cfg.rgnv;
    let strength = cfg_r.start_rung() as f64 / cfg_r.steps as f64;

    let rgnv_img = rgnv::enhance(
        ctx.params(),
        &schedule,
        class,
        &coarse.image,
        &coarse.depth,
        &reference.image,
        &reference.depth,
        cfg_r,
    )?
    .enhanced;
    let sdedit_img = rgnv::sdedit_baseline(
        ctx.params(),
        &schedule,
        class,
        &coarse.image,
        &coarse.depth,
        strength,
        cfg_r.guidance,
        rng::derive_seed(ctx.cfg.seed, "sdedit", 0),
    )?;
    let no_depth_img = rgnv::enhance_without_depth(
        ctx.params(),
        &schedule,
        class,
        &coarse.image,
        &reference.image,
        cfg_r,
    )?
    .enhanced;
    let no_inject_img = rgnv::enhance_without_injection(
        ctx.params(),
        &schedule,
        class,
        &coarse.image,
        &coarse.depth,
        cfg_r,
    )?;

    let p = |img: &Tensor| metrics::psnr_db_capped(img, &target.image);
    let (full, sdedit, no_depth, no_inject) = (
        p(&rgnv_img)?,
        p(&sdedit_img)?,
        p(&no_depth_img)?,
        p(&no_inject_img)?,
    );
    let passed = full > sdedit && full > no_depth && full > no_inject;
    Ok((
        passed,
        format!(
            "psnr full {full:.2} dB; margins: vs sdedit {:+.2}, vs no-depth {:+.2}, \
             vs no-injection {:+.2}",
            full - sdedit,
            full - no_depth,
            full - no_inject
        ),
    ))
}

// ── ac6 / ac7 ────────────────────────────────────────────────────────────

fn check_distill_ordering(ctx: &mut Ctx) -> Result<(bool, String)> {
    let floor = ctx.thresholds.coarse_ref_psnr_min;
    let bundle = ctx.bundle()?;
    let ordered = bundle.psnr_rgsd > bundle.psnr_sds && bundle.psnr_sds > bundle.psnr_coarse;
    let coarse_ref = bundle
        .coarse
        .log
        .last()
        .map(|row| row.psnr_ref)
        .unwrap_or(f64::NEG_INFINITY);
    let passed = ordered && coarse_ref >= floor;
    Ok((
        passed,
        format!(
            "mean novel psnr: rgsd {:.2} > sds {:.2} > coarse {:.2} dB; \
             coarse reference psnr {coarse_ref:.2} (floor {floor:.2})",
            bundle.psnr_rgsd, bundle.psnr_sds, bundle.psnr_coarse
        ),
    ))
}

fn check_overlap_sharpness(ctx: &mut Ctx) -> Result<(bool, String)> {
    let geom = ctx.geom();
    let fixed: Vec<Pose> = ctx
        .cfg
        .rgsd
        .fixed_azimuths
        .iter()
        .map(|&az| Pose::from_azimuth(az, &geom))
        .collect();
    let bundle = ctx.bundle()?;
    let mask = coverage_mask(&fixed, &geom, 2);
    let sharp_rgsd = mean_gradient_magnitude(&bundle.rgsd.field, &mask);
    let sharp_image = mean_gradient_magnitude(&bundle.image.field, &mask);
    Ok((
        sharp_rgsd > sharp_image,
        format!(
            "overlap mean gradient magnitude: rgsd {sharp_rgsd:.4} vs image-loss {sharp_image:.4}"
        ),
    ))
}

// ── ac8 ──────────────────────────────────────────────────────────────────

fn check_detachment(ctx: &Ctx) -> Result<(bool, String)> {
    let before = ctx.params().digest();
    let (scene, reference, class) = ctx.fixture_scene();
    let schedule = ctx.distill_ladder()?;
    let seed = rng::derive_seed(ctx.cfg.seed, "verify-detach", 0);
    let coarse = coarse_stage(
        &scene,
        &reference,
        class,
        ctx.params(),
        &schedule,
        &ctx.cfg.sds,
        &StageOptions::new(4, seed),
    )?;
    refine_stage(
        &coarse.field,
        &scene,
        &reference,
        class,
        ctx.params(),
        &schedule,
        &ctx.cfg.rgsd,
        &StageOptions::new(4, seed),
        RefineLoss::Rgsd,
    )?;
    let after = ctx.params().digest();
    Ok((
        before == after,
        format!(
            "denoiser digest unchanged across coarse+refine: {}; the update path borrows the \
             denoiser immutably and allocates no parameter gradients",
            before == after
        ),
    ))
}

// ── ac9 ──────────────────────────────────────────────────────────────────

fn dir_digests(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|e| e.path().is_file())
        .map(|e| e.path())
        .collect();
    entries.sort();
    let mut out = Vec::with_capacity(entries.len());
    for path in entries {
        let bytes = std::fs::read(&path)?;
        let mut h = Sha256::new();
        h.update(&bytes);
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push((name, format!("{:x}", h.finalize())));
    }
    Ok(out)
}

fn check_generate_determinism(ctx: &Ctx) -> Result<(bool, String)> {
    let base = ctx.cfg.out_dir.join("verify_determinism");
    std::fs::create_dir_all(&base)?;
    let weights = base.join("weights.dlw1");
    save_params(ctx.params(), &weights)?;

    let mut digests = Vec::with_capacity(2);
    for run in 0..2 {
        let mut cfg = ctx.cfg.clone();
        cfg.out_dir = base.join(format!("run{run}"));
        cfg.stages.coarse_iters = 6;
        cfg.stages.refine_iters = 6;
        cfg.stages.checkpoint_every = 2;
        let args = GenerateArgs {
            weights: Some(weights.clone()),
            ..GenerateArgs::default()
        };
        harness::cmd_generate(&cfg, &args)?;
        digests.push(dir_digests(&cfg.out_dir)?);
    }
    let same = digests[0] == digests[1];
    let files = digests[0].len();
    let _ = std::fs::remove_dir_all(&base);
    Ok((
        same && files > 0,
        format!("two generate runs produced {files} files with identical byte digests: {same}"),
    ))
}

// ── ac10 ─────────────────────────────────────────────────────────────────

fn check_alternation_audit() -> Result<(bool, String)> {
    // default ladder T=20, l=12 on a small world; the audit is about the
    // log shape, so guidance is off to keep the untrained targets bounded
    let geom = ViewGeometry::new(8, 12)?;
    let scene = Scene::generate(3, geom);
    let reference = render_view(&scene, &Pose::reference());
    let params = fd_tiny_params(31)?;
    let cfg = RgsdConfig {
        guidance: 0.0,
        lr: 0.05,
        ..RgsdConfig::default()
    };
    let schedule = NoiseSchedule::new(cfg.steps, ScheduleKind::Cosine)?;
    let run = refine_stage(
        &TextureField::from_reference(&reference, &geom)?,
        &scene,
        &reference,
        scene.class_id(),
        &params,
        &schedule,
        &cfg,
        &StageOptions::new(200, 77),
        RefineLoss::Rgsd,
    )?;

    let fixed = run
        .log
        .iter()
        .filter(|r| r.loss_kind == "rgsd_fixed" && r.tau_or_t == 0)
        .count();
    let random: Vec<usize> = run
        .log
        .iter()
        .filter(|r| r.loss_kind == "rgsd_random")
        .map(|r| r.tau_or_t)
        .collect();
    let tau_ok = random.iter().all(|&tau| (1..=11).contains(&tau));
    let tau_lo = random.iter().min().copied().unwrap_or(0);
    let tau_hi = random.iter().max().copied().unwrap_or(0);
    let passed = run.log.len() == 200 && fixed == 100 && random.len() == 100 && tau_ok;
    Ok((
        passed,
        format!(
            "200 iterations: {fixed} fixed tau=0 rows, {} random rows with tau in \
             [{tau_lo}, {tau_hi}] (must stay within 1..=11)",
            random.len()
        ),
    ))
}
