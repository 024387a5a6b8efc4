//! Distillation of the texture field from the frozen denoiser.
//!
//! Score distillation treats the denoiser as a critic: render, noise to a
//! random rung, and push `w(t) alpha_t (eps_hat - eps)` through the render
//! adjoint (the surrogate loss `w(t) <stop(eps_hat - eps), alpha_t render>`
//! has exactly this gradient, which is what the finite-difference oracle
//! checks). State distillation instead matches the field's noised renders
//! against the guided enhancement walk of its own coarse render: with
//! targets `(x~_tau, eps~_tau)` frozen, the loss `|alpha_tau render +
//! sigma_tau eps~_tau - x~_tau|^2` pulls the render toward the enhanced
//! state at every rung. The denoiser is never differentiated here; both
//! stages hold it by shared reference and leave its bits untouched.
//!
//! Two-stage recipe: the coarse stage alternates reference-pose L2 with
//! score distillation at random poses; the refine stage alternates a fixed
//! pair of precomputed `tau = 0` targets with fresh walks at random poses
//! and random `tau` (half the iterations each).

use serde::{Deserialize, Serialize};

use crate::metrics;
use crate::nncore::{forward, Condition, DenoiserParams};
use crate::repfield::{render, render_backward, TextureField};
use crate::rgnv::{self, Trajectory};
use crate::scheduler::{cfg_combine, LatentState, NoiseSchedule};
use crate::tensor::Tensor;
use crate::toyworld::{render_view, Pose, Scene, View, ViewGeometry};
use crate::{rng, Error, Result};
use rand::Rng;

const MOMENTUM: f64 = 0.9;
const DIVERGENCE_LOSS: f64 = 1e8;

/// Weighting `w(t)` of the score-distillation gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Constant,
    Sigma2,
}

/// Coarse-stage settings. `t_range` is the sampling window for the noising
/// rung as a fraction of the ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdsConfig {
    pub guidance: f64,
    pub t_range: (f64, f64),
    pub w_kind: WeightKind,
    pub lr: f64,
}

impl Default for SdsConfig {
    fn default() -> Self {
        SdsConfig {
            guidance: 20.0,
            t_range: (0.2, 0.6),
            w_kind: WeightKind::Constant,
            // guidance 20 makes the score residual huge; the eta here
            // keeps its pull well under the reconstruction rate
            lr: 0.01,
        }
    }
}

impl SdsConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.t_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::Config(format!(
                "sds.t_range must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})"
            )));
        }
        if !self.guidance.is_finite() || self.guidance < 0.0 {
            return Err(Error::Config(format!(
                "sds.guidance must be finite and >= 0, got {}",
                self.guidance
            )));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "sds.lr must be finite and positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Refine-stage settings: ladder length, inversion depth, guidance, the two
/// fixed poses whose `tau = 0` targets are precomputed, and the field step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RgsdConfig {
    pub steps: usize,
    pub inject_from: usize,
    pub guidance: f64,
    pub fixed_azimuths: [f64; 2],
    pub lr: f64,
}

impl Default for RgsdConfig {
    fn default() -> Self {
        RgsdConfig {
            steps: 20,
            inject_from: 12,
            guidance: 7.5,
            fixed_azimuths: [-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2],
            lr: 0.1,
        }
    }
}

impl RgsdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("rgsd.steps must be positive".into()));
        }
        if self.inject_from == 0 || self.inject_from > self.steps {
            return Err(Error::Config(format!(
                "rgsd.inject_from must be in 1..={}, got {}",
                self.steps, self.inject_from
            )));
        }
        if self.fixed_azimuths.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("rgsd.fixed_azimuths must be finite".into()));
        }
        if !self.guidance.is_finite() || self.guidance < 0.0 {
            return Err(Error::Config(format!(
                "rgsd.guidance must be finite and >= 0, got {}",
                self.guidance
            )));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "rgsd.lr must be finite and positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

// ── score distillation ───────────────────────────────────────────────────

/// What one score-distillation step saw, for logging and default checks.
#[derive(Clone, Copy, Debug)]
pub struct SdsDiagnostics {
    pub t: usize,
    pub weight: f64,
    pub guidance: f64,
    pub residual_sqnorm: f64,
}

/// Combined step weight: `w(t)` per `w_kind`, times `alpha_t` from the
/// chain rule through the noising map.
fn total_weight(w_kind: WeightKind, schedule: &NoiseSchedule, t: usize) -> f64 {
    let w = match w_kind {
        WeightKind::Constant => 1.0,
        WeightKind::Sigma2 => schedule.sigma(t) * schedule.sigma(t),
    };
    w * schedule.alpha(t)
}

/// Adjoint push of a frozen residual: `w(t) alpha_t render^T (resid)`.
/// Split out so the finite-difference oracle can freeze `(t, resid)`.
pub fn sds_gradient_for_residual(
    resid: &Tensor,
    t: usize,
    pose: &Pose,
    geom: &ViewGeometry,
    schedule: &NoiseSchedule,
    w_kind: WeightKind,
) -> Result<Tensor> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "sds rung {t} outside 1..={}",
            schedule.steps()
        )));
    }
    let w = total_weight(w_kind, schedule, t);
    render_backward(&resid.scale(w), pose, geom, geom.grid)
}

/// One score-distillation step: sample `t` and `eps`, noise the render,
/// query the guided predictor, and return the field gradient. The denoiser
/// is read-only throughout.
#[allow(clippy::too_many_arguments)]
pub fn sds_update(
    field: &TextureField,
    pose: &Pose,
    geom: &ViewGeometry,
    cond: &Condition,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &SdsConfig,
    seed: u64,
) -> Result<(Tensor, SdsDiagnostics)> {
    cfg.validate()?;
    let steps = schedule.steps();
    let mut r = rng::stream(seed, "sds", 0);
    let u = r.gen_range(cfg.t_range.0..cfg.t_range.1);
    let t = ((u * steps as f64).round() as usize).clamp(1, steps);
    let x0 = render(field, pose, geom)?;
    let eps = Tensor::randn(x0.shape(), &mut r);
    let noisy = schedule.add_noise(&LatentState::clean(x0), t, &eps)?;

    let eps_c = forward(params, &noisy.data, schedule.t_frac(t), cond, None)?.eps;
    let eps_hat = if cfg.guidance == 0.0 {
        eps_c
    } else {
        let null = Condition::null(params.cfg.image_size);
        let eps_u = forward(params, &noisy.data, schedule.t_frac(t), &null, None)?.eps;
        cfg_combine(&eps_c, &eps_u, cfg.guidance)?
    };
    let resid = eps_hat.sub(&eps);
    let grad = sds_gradient_for_residual(&resid, t, pose, geom, schedule, cfg.w_kind)?;
    Ok((
        grad,
        SdsDiagnostics {
            t,
            weight: total_weight(cfg.w_kind, schedule, t),
            guidance: cfg.guidance,
            residual_sqnorm: resid.sqnorm(),
        },
    ))
}

// ── state distillation ───────────────────────────────────────────────────

/// Invert and resample the clean reference once, recording K/V at every
/// rung; every target walk of a refine stage injects from this.
pub fn rgsd_reference_walk(
    reference: &View,
    class_id: usize,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &RgsdConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_ladder(schedule, cfg)?;
    let cond = Condition::new(reference.depth.clone(), class_id);
    let inv = rgnv::invert(
        params,
        schedule,
        &reference.image,
        &cond,
        cfg.guidance,
        cfg.inject_from,
        false,
    )?;
    rgnv::sample(
        params,
        schedule,
        inv.final_state().clone(),
        &cond,
        cfg.guidance,
        true,
    )
}

/// Enhancement walk of the field's render at `pose`: invert `l` rungs, then
/// resample with the reference K/V injected. The returned states and noise
/// estimates are plain data, already detached from everything.
#[allow(clippy::too_many_arguments)]
pub fn rgsd_targets(
    field: &TextureField,
    pose: &Pose,
    geom: &ViewGeometry,
    cond: &Condition,
    reference_walk: &Trajectory,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &RgsdConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_ladder(schedule, cfg)?;
    let x0 = render(field, pose, geom)?;
    let inv = rgnv::invert(
        params,
        schedule,
        &x0,
        cond,
        cfg.guidance,
        cfg.inject_from,
        false,
    )?;
    rgnv::sample_with_injection(
        params,
        schedule,
        inv.final_state().clone(),
        cond,
        cfg.guidance,
        reference_walk,
    )
}

fn check_ladder(schedule: &NoiseSchedule, cfg: &RgsdConfig) -> Result<()> {
    if schedule.steps() != cfg.steps {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} steps but the distillation config says {}",
            schedule.steps(),
            cfg.steps
        )));
    }
    Ok(())
}

/// State-matching loss at stop step `tau`: construct the field's state at
/// the target's noise level with the target's own noise estimate, compare
/// in summed L2, and push `2 alpha_tau (x_tau - x~_tau)` through the render
/// adjoint. `tau = 0` needs no noise estimate and reduces to image L2.
pub fn rgsd_update(
    field: &TextureField,
    pose: &Pose,
    geom: &ViewGeometry,
    targets: &Trajectory,
    tau: usize,
    schedule: &NoiseSchedule,
) -> Result<(f64, Tensor)> {
    if tau > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "stop step {tau} outside ladder 0..={}",
            schedule.steps()
        )));
    }
    let not_recorded = || {
        Error::InvalidArgument(format!("stop step {tau} not recorded in the target walk"))
    };
    // pair each state with the eps that composed it, so the sigma terms
    // cancel and the residual is alpha_tau * (render - implied clean image);
    // tau = 0 needs no eps and accepts a stepless already-clean walk
    let (target, eps) = if tau == 0 {
        (targets.state_at(0).ok_or_else(not_recorded)?, None)
    } else {
        let step = targets.step_into(tau).ok_or_else(not_recorded)?;
        (&step.state, Some(&step.eps))
    };
    let x0 = render(field, pose, geom)?;
    if !x0.same_shape(&target.data) {
        return Err(Error::ShapeMismatch(format!(
            "render {:?} vs target {:?}",
            x0.shape(),
            target.data.shape()
        )));
    }
    let (a, s) = (schedule.alpha(tau), schedule.sigma(tau));
    let x_tau = match eps {
        None => x0,
        Some(eps) => x0.zip(eps, |x, e| a * x + s * e),
    };
    let diff = x_tau.sub(&target.data);
    let loss = diff.sqnorm();
    let grad = render_backward(&diff.scale(2.0 * a), pose, geom, geom.grid)?;
    Ok((loss, grad))
}

/// Plain summed L2 against a fixed image, gradient through the adjoint.
pub fn image_loss_update(
    field: &TextureField,
    pose: &Pose,
    geom: &ViewGeometry,
    target: &Tensor,
) -> Result<(f64, Tensor)> {
    let x0 = render(field, pose, geom)?;
    if !x0.same_shape(target) {
        return Err(Error::ShapeMismatch(format!(
            "render {:?} vs target {:?}",
            x0.shape(),
            target.shape()
        )));
    }
    let diff = x0.sub(target);
    let loss = diff.sqnorm();
    let grad = render_backward(&diff.scale(2.0), pose, geom, geom.grid)?;
    Ok((loss, grad))
}

// ── stages ───────────────────────────────────────────────────────────────

/// Which refine iterations go where: even ones replay a fixed pose at
/// `tau = 0` (alternating between the two), odd ones draw a random pose and
/// a random `tau` in `1..l`. Over `2N` iterations this is exactly `N` and
/// `N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineBranch {
    Fixed(usize),
    Random,
}

pub fn refine_branch(iter: usize) -> RefineBranch {
    if iter % 2 == 0 {
        RefineBranch::Fixed((iter / 2) % 2)
    } else {
        RefineBranch::Random
    }
}

/// Refine-stage objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineLoss {
    Rgsd,
    Sds,
    Image,
}

/// One optimization record. `tau_or_t` is the ladder position the step
/// worked at (stop step for state matching, noising rung for score
/// distillation, 0 for plain reconstruction).
#[derive(Clone, Debug)]
pub struct LogRow {
    pub iter: usize,
    pub loss_kind: &'static str,
    pub tau_or_t: usize,
    pub pose_azimuth: f64,
    pub loss: f64,
    pub psnr_ref: f64,
    pub psnr_novel_mean: f64,
}

/// A finished stage: the optimized field, its per-iteration log, and any
/// field snapshots taken along the way.
#[derive(Clone, Debug)]
pub struct StageRun {
    pub field: TextureField,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<(usize, TextureField)>,
}

/// Run shape shared by both stages: how long, which seed, how often to
/// snapshot the field (`None` for never), and the step size for the
/// reconstruction-style updates (the field is linear in the render, so
/// this can sit far above the distillation etas).
#[derive(Clone, Copy, Debug)]
pub struct StageOptions {
    pub iters: usize,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    pub field_lr: f64,
}

impl StageOptions {
    pub fn new(iters: usize, seed: u64) -> StageOptions {
        StageOptions {
            iters,
            seed,
            checkpoint_every: None,
            field_lr: 0.5,
        }
    }

    fn wants_checkpoint(&self, iter: usize) -> bool {
        matches!(self.checkpoint_every, Some(k) if (iter + 1) % k == 0)
    }
}

/// Write a stage log as CSV with a header row.
pub fn write_log_csv(rows: &[LogRow], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("iter,loss_kind,tau_or_t,pose_azimuth,loss,psnr_ref,psnr_novel_mean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iter, r.loss_kind, r.tau_or_t, r.pose_azimuth, r.loss, r.psnr_ref, r.psnr_novel_mean
        ));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Held-out azimuths used for the novel-view PSNR column (distinct from the
/// fixed refine poses at half pi).
pub fn probe_poses(geom: &ViewGeometry) -> Vec<Pose> {
    [-0.75, -0.25, 0.25, 0.75]
        .iter()
        .map(|k| Pose::from_azimuth(k * std::f64::consts::PI, geom))
        .collect()
}

/// SGD with momentum on the texel grid, clamped to the valid color range
/// after every step: `v = mu*v + eta*g`, `x = clamp(x - v)`. The step size
/// comes in per call because the stages interleave objectives of very
/// different gradient scales, and it must scale the gradient as it enters
/// the velocity; applying it at update time instead would replay each
/// objective's momentum tail at whatever rate the next objective uses.
struct FieldOptimizer {
    velocity: Tensor,
}

impl FieldOptimizer {
    fn new(grid: usize) -> FieldOptimizer {
        FieldOptimizer {
            velocity: Tensor::zeros(&[3, grid, grid]),
        }
    }

    fn step(&mut self, field: &mut TextureField, grad: &Tensor, lr: f64) {
        for v in self.velocity.data_mut() {
            *v *= MOMENTUM;
        }
        self.velocity.axpy(lr, grad);
        field.data.axpy(-1.0, &self.velocity);
        field.clamp_inplace();
    }
}

struct StageEval {
    reference: View,
    probes: Vec<(Pose, Tensor)>,
}

impl StageEval {
    fn new(scene: &Scene, reference: &View) -> StageEval {
        let probes = probe_poses(&scene.geom)
            .into_iter()
            .map(|p| {
                let gt = render_view(scene, &p).image;
                (p, gt)
            })
            .collect();
        StageEval {
            reference: reference.clone(),
            probes,
        }
    }

    fn measure(&self, field: &TextureField, geom: &ViewGeometry) -> Result<(f64, f64)> {
        let at_ref = render(field, &self.reference.pose, geom)?;
        let psnr_ref = metrics::psnr_db_capped(&at_ref, &self.reference.image)?;
        let mut acc = 0.0;
        for (pose, gt) in &self.probes {
            let img = render(field, pose, geom)?;
            acc += metrics::psnr_db_capped(&img, gt)?;
        }
        Ok((psnr_ref, acc / self.probes.len() as f64))
    }
}

fn check_divergence(stage: &'static str, iter: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Diverged { stage, iter, loss });
    }
    Ok(())
}

/// Coarse stage: from a gray field, alternate reference-pose reconstruction
/// (even iterations, at the field rate) with score distillation at random
/// poses (odd ones, at the score eta). Depth for the random poses comes
/// from the scene's analytic camera. Reconstruction dominating at the
/// reference pose is the point: distillation only has to rough in the
/// texels the reference never sees.
pub fn coarse_stage(
    scene: &Scene,
    reference: &View,
    class_id: usize,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &SdsConfig,
    opts: &StageOptions,
) -> Result<StageRun> {
    cfg.validate()?;
    let geom = scene.geom;
    let mut field = TextureField::gray(geom.grid);
    let mut opt = FieldOptimizer::new(geom.grid);
    let eval = StageEval::new(scene, reference);
    let mut log = Vec::with_capacity(opts.iters);
    let mut checkpoints = Vec::new();

    for iter in 0..opts.iters {
        let (kind, tau_or_t, azimuth, loss, grad, lr) = if iter % 2 == 0 {
            let (loss, grad) =
                image_loss_update(&field, &reference.pose, &geom, &reference.image)?;
            ("recon", 0, reference.pose.azimuth, loss, grad, opts.field_lr)
        } else {
            let az = rng::stream(opts.seed, "coarse-pose", iter as u64)
                .gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let pose = Pose::from_azimuth(az, &geom);
            let depth = render_view(scene, &pose).depth;
            let cond = Condition::new(depth, class_id);
            let (grad, diag) = sds_update(
                &field,
                &pose,
                &geom,
                &cond,
                params,
                schedule,
                cfg,
                rng::derive_seed(opts.seed, "coarse-sds", iter as u64),
            )?;
            ("sds", diag.t, az, diag.residual_sqnorm, grad, cfg.lr)
        };
        check_divergence("coarse", iter, loss)?;
        opt.step(&mut field, &grad, lr);
        let (psnr_ref, psnr_novel_mean) = eval.measure(&field, &geom)?;
        log.push(LogRow {
            iter,
            loss_kind: kind,
            tau_or_t,
            pose_azimuth: azimuth,
            loss,
            psnr_ref,
            psnr_novel_mean,
        });
        if opts.wants_checkpoint(iter) {
            checkpoints.push((iter, field.clone()));
        }
    }
    Ok(StageRun {
        field,
        log,
        checkpoints,
    })
}

/// Refine stage. For state matching (`rgsd`): precompute the reference walk
/// and the `tau = 0` targets of the two fixed poses from the entry field
/// once, then alternate per [`refine_branch`]. `sds` and `image` run the
/// corresponding baseline every iteration for ablation.
#[allow(clippy::too_many_arguments)]
pub fn refine_stage(
    field: &TextureField,
    scene: &Scene,
    reference: &View,
    class_id: usize,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &RgsdConfig,
    opts: &StageOptions,
    loss_kind: RefineLoss,
) -> Result<StageRun> {
    cfg.validate()?;
    check_ladder(schedule, cfg)?;
    if loss_kind == RefineLoss::Rgsd && cfg.inject_from < 2 && opts.iters > 1 {
        return Err(Error::Config(
            "rgsd.inject_from must be at least 2 so the random branch has a stop step".into(),
        ));
    }
    let geom = scene.geom;
    let mut field = field.clone();
    let mut opt = FieldOptimizer::new(geom.grid);
    let eval = StageEval::new(scene, reference);
    let mut log = Vec::with_capacity(opts.iters);
    let mut checkpoints = Vec::new();

    let fixed_poses: Vec<Pose> = cfg
        .fixed_azimuths
        .iter()
        .map(|&az| Pose::from_azimuth(az, &geom))
        .collect();

    // precomputed targets for the fixed poses, from the entry field
    let (walk, fixed_targets) = if loss_kind != RefineLoss::Sds && opts.iters > 0 {
        let walk = rgsd_reference_walk(reference, class_id, params, schedule, cfg)?;
        let mut targets = Vec::with_capacity(2);
        for pose in &fixed_poses {
            let depth = render_view(scene, pose).depth;
            let cond = Condition::new(depth, class_id);
            targets.push(rgsd_targets(
                &field, pose, &geom, &cond, &walk, params, schedule, cfg,
            )?);
        }
        (Some(walk), targets)
    } else {
        (None, Vec::new())
    };

    for iter in 0..opts.iters {
        let (kind, tau_or_t, azimuth, loss, grad, lr) = match loss_kind {
            RefineLoss::Rgsd => match refine_branch(iter) {
                RefineBranch::Fixed(k) => {
                    let (loss, grad) = rgsd_update(
                        &field,
                        &fixed_poses[k],
                        &geom,
                        &fixed_targets[k],
                        0,
                        schedule,
                    )?;
                    // at tau = 0 the state match degenerates to an image-space
                    // recon against the walked target, so it anchors at the
                    // same rate as every other recon branch; only the noisy
                    // random branch uses the distillation rate
                    (
                        "rgsd_fixed",
                        0,
                        fixed_poses[k].azimuth,
                        loss,
                        grad,
                        opts.field_lr,
                    )
                }
                RefineBranch::Random => {
                    let mut r = rng::stream(opts.seed, "refine", iter as u64);
                    let az = r.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                    let tau = r.gen_range(1..cfg.inject_from);
                    let pose = Pose::from_azimuth(az, &geom);
                    let depth = render_view(scene, &pose).depth;
                    let cond = Condition::new(depth, class_id);
                    let targets = rgsd_targets(
                        &field,
                        &pose,
                        &geom,
                        &cond,
                        walk.as_ref().expect("walk prepared for rgsd"),
                        params,
                        schedule,
                        cfg,
                    )?;
                    let (loss, grad) =
                        rgsd_update(&field, &pose, &geom, &targets, tau, schedule)?;
                    ("rgsd_random", tau, az, loss, grad, cfg.lr)
                }
            },
            // the score-only ablation keeps the stage scaffold (anchor on
            // even iterations, novel-view objective on odd ones) but swaps
            // state matching for plain score distillation
            RefineLoss::Sds => {
                if iter % 2 == 0 {
                    let (loss, grad) =
                        image_loss_update(&field, &reference.pose, &geom, &reference.image)?;
                    ("recon", 0, reference.pose.azimuth, loss, grad, opts.field_lr)
                } else {
                    let az = rng::stream(opts.seed, "refine", iter as u64)
                        .gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                    let pose = Pose::from_azimuth(az, &geom);
                    let depth = render_view(scene, &pose).depth;
                    let cond = Condition::new(depth, class_id);
                    let sds_cfg = SdsConfig {
                        guidance: cfg.guidance,
                        lr: cfg.lr,
                        ..SdsConfig::default()
                    };
                    let (grad, diag) = sds_update(
                        &field,
                        &pose,
                        &geom,
                        &cond,
                        params,
                        schedule,
                        &sds_cfg,
                        rng::derive_seed(opts.seed, "refine-sds", iter as u64),
                    )?;
                    ("sds", diag.t, az, diag.residual_sqnorm, grad, cfg.lr)
                }
            }
            RefineLoss::Image => {
                let k = iter % 2;
                let target = &fixed_targets[k]
                    .state_at(0)
                    .expect("walk reaches the clean end")
                    .data;
                let (loss, grad) = image_loss_update(&field, &fixed_poses[k], &geom, target)?;
                ("image", 0, fixed_poses[k].azimuth, loss, grad, opts.field_lr)
            }
        };
        check_divergence("refine", iter, loss)?;
        opt.step(&mut field, &grad, lr);
        let (psnr_ref, psnr_novel_mean) = eval.measure(&field, &geom)?;
        log.push(LogRow {
            iter,
            loss_kind: kind,
            tau_or_t,
            pose_azimuth: azimuth,
            loss,
            psnr_ref,
            psnr_novel_mean,
        });
        if opts.wants_checkpoint(iter) {
            checkpoints.push((iter, field.clone()));
        }
    }
    Ok(StageRun {
        field,
        log,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{init_params, DenoiserConfig};
    use crate::scheduler::ScheduleKind;
    use crate::toyworld::{Scene, NUM_CLASSES};

    fn tiny_params(seed: u64) -> DenoiserParams {
        let cfg = DenoiserConfig {
            image_size: 8,
            base_channels: 4,
            attn_heads: 2,
            attn_resolution: 2,
            num_classes: NUM_CLASSES,
            cond_drop_prob: 0.1,
        };
        let mut p = init_params(&cfg, seed).unwrap();
        let mut i = 0;
        for (_, arr) in p.arrays_mut() {
            let mut r = rng::stream(seed, "rand-params", i);
            i += 1;
            for v in arr.data_mut() {
                *v = 0.2 * r.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        p
    }

    fn tiny_world() -> (Scene, View, usize) {
        let geom = ViewGeometry::new(8, 12).unwrap();
        let scene = Scene::generate(7, geom);
        let reference = render_view(&scene, &Pose::reference());
        let class = scene.class_id();
        (scene, reference, class)
    }

    fn tiny_rgsd() -> RgsdConfig {
        RgsdConfig {
            steps: 4,
            inject_from: 3,
            guidance: 1.5,
            lr: 0.05,
            ..RgsdConfig::default()
        }
    }

    #[test]
    fn rgsd_loss_matches_a_hand_computed_tiny_case() {
        let geom = ViewGeometry::new(2, 4).unwrap();
        let schedule = NoiseSchedule::new(2, ScheduleKind::Cosine).unwrap();
        let mut field = TextureField::gray(4);
        for (i, v) in field.data.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.07).sin() * 0.5;
        }
        let pose = Pose::reference();
        let x_tilde_1 = Tensor::from_fn(&[3, 2, 2], |i| 0.1 * i as f64 - 0.4);
        let eps_tilde_1 = Tensor::from_fn(&[3, 2, 2], |i| 0.05 * (i as f64 + 1.0));
        let targets = Trajectory {
            initial: LatentState {
                data: Tensor::zeros(&[3, 2, 2]),
                t: 2,
            },
            steps: vec![
                // the step from rung 2 lands on level 1, so it carries the
                // noise estimate that composed x_tilde_1
                crate::rgnv::StepRecord {
                    rung: 2,
                    eps: eps_tilde_1.clone(),
                    state: LatentState {
                        data: x_tilde_1.clone(),
                        t: 1,
                    },
                    cache_cond: None,
                    cache_uncond: None,
                },
                crate::rgnv::StepRecord {
                    rung: 1,
                    eps: Tensor::zeros(&[3, 2, 2]),
                    state: LatentState {
                        data: Tensor::zeros(&[3, 2, 2]),
                        t: 0,
                    },
                    cache_cond: None,
                    cache_uncond: None,
                },
            ],
        };
        let (loss, _) = rgsd_update(&field, &pose, &geom, &targets, 1, &schedule).unwrap();

        let r0 = render(&field, &pose, &geom).unwrap();
        let (a1, s1) = (schedule.alpha(1), schedule.sigma(1));
        let mut expect = 0.0;
        for i in 0..12 {
            let xt = a1 * r0.data()[i] + s1 * eps_tilde_1.data()[i];
            expect += (xt - x_tilde_1.data()[i]).powi(2);
        }
        assert!(
            (loss - expect).abs() < 1e-12,
            "loss {loss} vs hand sum {expect}"
        );
    }

    #[test]
    fn rgsd_at_stop_zero_with_matching_render_is_exactly_zero() {
        let geom = ViewGeometry::new(8, 12).unwrap();
        let schedule = NoiseSchedule::new(4, ScheduleKind::Cosine).unwrap();
        let mut field = TextureField::gray(12);
        for (i, v) in field.data.data_mut().iter_mut().enumerate() {
            *v = ((i % 9) as f64 - 4.0) * 0.1;
        }
        let pose = Pose::from_azimuth(0.3, &geom);
        let x0 = render(&field, &pose, &geom).unwrap();
        let targets = Trajectory {
            initial: LatentState { data: x0, t: 0 },
            steps: Vec::new(),
        };
        let (loss, grad) = rgsd_update(&field, &pose, &geom, &targets, 0, &schedule).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.sqnorm(), 0.0);
    }

    #[test]
    fn rgsd_rejects_an_unrecorded_stop_step() {
        let geom = ViewGeometry::new(8, 12).unwrap();
        let schedule = NoiseSchedule::new(4, ScheduleKind::Cosine).unwrap();
        let field = TextureField::gray(12);
        let targets = Trajectory {
            initial: LatentState {
                data: Tensor::zeros(&[3, 8, 8]),
                t: 0,
            },
            steps: Vec::new(),
        };
        let err = rgsd_update(&field, &Pose::reference(), &geom, &targets, 2, &schedule)
            .unwrap_err();
        assert!(err.to_string().contains("stop step 2"), "got {err}");
        assert!(rgsd_update(&field, &Pose::reference(), &geom, &targets, 9, &schedule).is_err());
    }

    #[test]
    fn rgsd_gradient_matches_finite_differences() {
        use rand::Rng;
        let geom = ViewGeometry::new(8, 12).unwrap();
        let schedule = NoiseSchedule::new(4, ScheduleKind::Cosine).unwrap();
        let mut field = TextureField::gray(12);
        let mut r = rng::stream(5, "field", 0);
        for v in field.data.data_mut() {
            *v = 0.8 * r.gen_range(-1.0..1.0);
        }
        let pose = Pose::from_azimuth(-0.6, &geom);
        let x_tilde = Tensor::randn(&[3, 8, 8], &mut r);
        let eps_tilde = Tensor::randn(&[3, 8, 8], &mut r);
        let tau = 2;
        let targets = Trajectory {
            initial: LatentState {
                data: Tensor::zeros(&[3, 8, 8]),
                t: 3,
            },
            steps: vec![crate::rgnv::StepRecord {
                rung: tau,
                eps: eps_tilde,
                state: LatentState {
                    data: x_tilde,
                    t: tau,
                },
                cache_cond: None,
                cache_uncond: None,
            }],
        };
        // the single record answers step_into(tau) with its own eps
        let (_, grad) = rgsd_update(&field, &pose, &geom, &targets, tau, &schedule).unwrap();

        let loss_of = |f: &TextureField| {
            rgsd_update(f, &pose, &geom, &targets, tau, &schedule).unwrap().0
        };
        let h = 1e-4;
        let mut checked = 0;
        let mut probe = rng::stream(5, "probe", 1);
        for _ in 0..60 {
            let i = probe.gen_range(0..field.data.numel());
            let orig = field.data.data()[i];
            field.data.data_mut()[i] = orig + h;
            let lp = loss_of(&field);
            field.data.data_mut()[i] = orig - h;
            let lm = loss_of(&field);
            field.data.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3, "texel {i}: fd {fd:.6e} vs {an:.6e}");
            checked += 1;
        }
        assert_eq!(checked, 60);
    }

    #[test]
    fn sds_zero_residual_means_zero_gradient() {
        let geom = ViewGeometry::new(8, 12).unwrap();
        let schedule = NoiseSchedule::new(4, ScheduleKind::Cosine).unwrap();
        let resid = Tensor::zeros(&[3, 8, 8]);
        let grad = sds_gradient_for_residual(
            &resid,
            2,
            &Pose::reference(),
            &geom,
            &schedule,
            WeightKind::Constant,
        )
        .unwrap();
        assert_eq!(grad.sqnorm(), 0.0);
        assert!(sds_gradient_for_residual(
            &resid,
            0,
            &Pose::reference(),
            &geom,
            &schedule,
            WeightKind::Constant
        )
        .is_err());
    }

    #[test]
    fn sds_gradient_matches_the_surrogate_loss_by_finite_differences() {
        use rand::Rng;
        let geom = ViewGeometry::new(8, 12).unwrap();
        let schedule = NoiseSchedule::new(4, ScheduleKind::Linear).unwrap();
        let mut field = TextureField::gray(12);
        let mut r = rng::stream(6, "field", 0);
        for v in field.data.data_mut() {
            *v = 0.7 * r.gen_range(-1.0..1.0);
        }
        let pose = Pose::from_azimuth(1.1, &geom);
        let resid = Tensor::randn(&[3, 8, 8], &mut r);
        for (t, w_kind) in [(1, WeightKind::Constant), (3, WeightKind::Sigma2)] {
            let grad =
                sds_gradient_for_residual(&resid, t, &pose, &geom, &schedule, w_kind).unwrap();
            let w = match w_kind {
                WeightKind::Constant => schedule.alpha(t),
                WeightKind::Sigma2 => schedule.sigma(t).powi(2) * schedule.alpha(t),
            };
            let surrogate = |f: &TextureField| {
                w * resid.dot(&render(f, &pose, &geom).unwrap())
            };
            let h = 1e-4;
            let mut probe = rng::stream(6, "probe", t as u64);
            for _ in 0..50 {
                let i = probe.gen_range(0..field.data.numel());
                let orig = field.data.data()[i];
                field.data.data_mut()[i] = orig + h;
                let lp = surrogate(&field);
                field.data.data_mut()[i] = orig - h;
                let lm = surrogate(&field);
                field.data.data_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grad.data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-3, "t {t} texel {i}: fd {fd:.6e} vs {an:.6e}");
            }
        }
    }

    #[test]
    fn sds_update_is_seeded_and_reports_the_configured_defaults() {
        let (scene, reference, class) = tiny_world();
        let params = tiny_params(1);
        let schedule = NoiseSchedule::new(20, ScheduleKind::Cosine).unwrap();
        let field = TextureField::from_reference(&reference, &scene.geom).unwrap();
        let cond = Condition::new(reference.depth.clone(), class);
        let cfg = SdsConfig::default();
        let (g1, d1) = sds_update(
            &field,
            &reference.pose,
            &scene.geom,
            &cond,
            &params,
            &schedule,
            &cfg,
            42,
        )
        .unwrap();
        let (g2, d2) = sds_update(
            &field,
            &reference.pose,
            &scene.geom,
            &cond,
            &params,
            &schedule,
            &cfg,
            42,
        )
        .unwrap();
        assert_eq!(g1, g2, "same seed must reproduce the draw");
        assert_eq!(d1.t, d2.t);
        assert_eq!(d1.guidance, 20.0, "paper-default guidance flows through");
        assert!((4..=12).contains(&d1.t), "t {} outside U(0.2, 0.6) of 20", d1.t);
        let (_, d3) = sds_update(
            &field,
            &reference.pose,
            &scene.geom,
            &cond,
            &params,
            &schedule,
            &cfg,
            43,
        )
        .unwrap();
        assert!(d3.t != d1.t || d3.residual_sqnorm != d1.residual_sqnorm);
    }

    #[test]
    fn image_loss_is_zero_on_a_perfect_match_and_passes_fd() {
        use rand::Rng;
        let geom = ViewGeometry::new(8, 12).unwrap();
        let mut field = TextureField::gray(12);
        let mut r = rng::stream(8, "field", 0);
        for v in field.data.data_mut() {
            *v = r.gen_range(-0.9..0.9);
        }
        let pose = Pose::from_azimuth(0.4, &geom);
        let target = render(&field, &pose, &geom).unwrap();
        let (loss, grad) = image_loss_update(&field, &pose, &geom, &target).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.sqnorm(), 0.0);

        let other = Tensor::randn(&[3, 8, 8], &mut r);
        let (_, grad) = image_loss_update(&field, &pose, &geom, &other).unwrap();
        let h = 1e-4;
        for _ in 0..40 {
            let i = r.gen_range(0..field.data.numel());
            let orig = field.data.data()[i];
            field.data.data_mut()[i] = orig + h;
            let lp = image_loss_update(&field, &pose, &geom, &other).unwrap().0;
            field.data.data_mut()[i] = orig - h;
            let lm = image_loss_update(&field, &pose, &geom, &other).unwrap().0;
            field.data.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3, "texel {i}: fd {fd:.6e} vs {an:.6e}");
        }
    }

    #[test]
    fn rgsd_targets_cover_the_whole_ladder_down_to_clean() {
        let (scene, reference, class) = tiny_world();
        let params = tiny_params(2);
        let cfg = tiny_rgsd();
        let schedule = NoiseSchedule::new(cfg.steps, ScheduleKind::Cosine).unwrap();
        let walk = rgsd_reference_walk(&reference, class, &params, &schedule, &cfg).unwrap();
        let field = TextureField::from_reference(&reference, &scene.geom).unwrap();
        let pose = Pose::from_azimuth(0.9, &scene.geom);
        let depth = render_view(&scene, &pose).depth;
        let cond = Condition::new(depth, class);
        let targets = rgsd_targets(
            &field, &pose, &scene.geom, &cond, &walk, &params, &schedule, &cfg,
        )
        .unwrap();
        assert_eq!(targets.initial.t, cfg.inject_from);
        for tau in 0..=cfg.inject_from {
            assert!(targets.state_at(tau).is_some(), "missing state at {tau}");
        }
        for tau in 1..=cfg.inject_from {
            assert!(targets.eps_at(tau).is_some(), "missing eps at {tau}");
        }
        let again = rgsd_targets(
            &field, &pose, &scene.geom, &cond, &walk, &params, &schedule, &cfg,
        )
        .unwrap();
        assert_eq!(
            targets.final_state().data,
            again.final_state().data,
            "targets must be deterministic"
        );
    }

    #[test]
    fn alternation_is_exactly_half_fixed_half_random() {
        let mut fixed = 0;
        let mut random = 0;
        let mut fixed_seq = Vec::new();
        for iter in 0..200 {
            match refine_branch(iter) {
                RefineBranch::Fixed(k) => {
                    fixed += 1;
                    fixed_seq.push(k);
                }
                RefineBranch::Random => random += 1,
            }
        }
        assert_eq!(fixed, 100);
        assert_eq!(random, 100);
        assert_eq!(&fixed_seq[..4], &[0, 1, 0, 1], "fixed poses must alternate");
    }

    #[test]
    fn zero_iteration_stages_are_no_ops() {
        let (scene, reference, class) = tiny_world();
        let params = tiny_params(3);
        let sds_sched = NoiseSchedule::new(4, ScheduleKind::Cosine).unwrap();
        let run = coarse_stage(
            &scene,
            &reference,
            class,
            &params,
            &sds_sched,
            &SdsConfig::default(),
            &StageOptions::new(0, 5),
        )
        .unwrap();
        assert_eq!(run.field, TextureField::gray(scene.geom.grid));
        assert!(run.log.is_empty());

        let cfg = tiny_rgsd();
        let schedule = NoiseSchedule::new(cfg.steps, ScheduleKind::Cosine).unwrap();
        let entry = TextureField::from_reference(&reference, &scene.geom).unwrap();
        let run = refine_stage(
            &entry,
            &scene,
            &reference,
            class,
            &params,
            &schedule,
            &cfg,
            &StageOptions::new(0, 5),
            RefineLoss::Rgsd,
        )
        .unwrap();
        assert_eq!(run.field, entry, "zero iterations must return the input");
    }

    #[test]
    fn refine_log_follows_the_alternation_contract() {
        let (scene, reference, class) = tiny_world();
        let params = tiny_params(4);
        let cfg = tiny_rgsd();
        let schedule = NoiseSchedule::new(cfg.steps, ScheduleKind::Cosine).unwrap();
        let entry = TextureField::from_reference(&reference, &scene.geom).unwrap();
        let run = refine_stage(
            &entry,
            &scene,
            &reference,
            class,
            &params,
            &schedule,
            &cfg,
            &StageOptions::new(8, 17),
            RefineLoss::Rgsd,
        )
        .unwrap();
        assert_eq!(run.log.len(), 8);
        for row in &run.log {
            if row.iter % 2 == 0 {
                assert_eq!(row.loss_kind, "rgsd_fixed");
                assert_eq!(row.tau_or_t, 0);
                let k = (row.iter / 2) % 2;
                assert_eq!(row.pose_azimuth, cfg.fixed_azimuths[k]);
            } else {
                assert_eq!(row.loss_kind, "rgsd_random");
                assert!(
                    (1..cfg.inject_from).contains(&row.tau_or_t),
                    "tau {} outside 1..{}",
                    row.tau_or_t,
                    cfg.inject_from
                );
            }
            assert!(row.loss.is_finite());
        }
    }

    #[test]
    fn checkpoints_follow_the_configured_cadence() {
        let (scene, reference, class) = tiny_world();
        let params = tiny_params(9);
        let schedule = NoiseSchedule::new(4, ScheduleKind::Cosine).unwrap();
        let opts = StageOptions {
            checkpoint_every: Some(2),
            ..StageOptions::new(5, 3)
        };
        let run = coarse_stage(
            &scene,
            &reference,
            class,
            &params,
            &schedule,
            &SdsConfig {
                lr: 0.05,
                ..SdsConfig::default()
            },
            &opts,
        )
        .unwrap();
        let iters: Vec<usize> = run.checkpoints.iter().map(|(i, _)| *i).collect();
        assert_eq!(iters, vec![1, 3], "snapshot after every second iteration");
        assert_eq!(
            run.checkpoints.last().unwrap().1.grid(),
            scene.geom.grid,
            "snapshots carry the live field"
        );
    }

    #[test]
    fn stages_never_touch_the_denoiser_parameters() {
        let (scene, reference, class) = tiny_world();
        let params = tiny_params(5);
        let before = params.digest();
        let sds_sched = NoiseSchedule::new(4, ScheduleKind::Cosine).unwrap();
        let coarse = coarse_stage(
            &scene,
            &reference,
            class,
            &params,
            &sds_sched,
            &SdsConfig {
                lr: 0.05,
                ..SdsConfig::default()
            },
            &StageOptions::new(4, 6),
        )
        .unwrap();
        let cfg = tiny_rgsd();
        let schedule = NoiseSchedule::new(cfg.steps, ScheduleKind::Cosine).unwrap();
        for kind in [RefineLoss::Rgsd, RefineLoss::Sds, RefineLoss::Image] {
            refine_stage(
                &coarse.field,
                &scene,
                &reference,
                class,
                &params,
                &schedule,
                &cfg,
                &StageOptions::new(4, 7),
                kind,
            )
            .unwrap();
        }
        assert_eq!(params.digest(), before, "distillation must not move weights");
    }

    #[test]
    fn log_csv_writes_header_and_rows() {
        let rows = vec![LogRow {
            iter: 0,
            loss_kind: "recon",
            tau_or_t: 0,
            pose_azimuth: 0.5,
            loss: 1.25,
            psnr_ref: 20.0,
            psnr_novel_mean: 15.5,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_log_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,loss_kind,tau_or_t,pose_azimuth,loss,psnr_ref,psnr_novel_mean"
        );
        assert_eq!(lines.next().unwrap(), "0,recon,0,0.5,1.25,20,15.5");
    }
}
