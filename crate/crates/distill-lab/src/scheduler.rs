//! Noise schedules and deterministic DDIM transitions.
//!
//! A schedule holds per-step signal/noise scales `alpha[t]`, `sigma[t]` for
//! `t = 0..=steps` with `alpha[t]^2 + sigma[t]^2 = 1`, `alpha[0] = 1`,
//! `sigma[0] = 0`, alpha strictly decreasing. The forward process is
//! `x_t = alpha[t]*x0 + sigma[t]*eps`.
//!
//! Transitions are the deterministic DDIM maps
//!
//! ```text
//! step:   x_prev = (a_prev/a_t) * (x_t - s_t*eps) + s_prev*eps
//! invert: x_t    = (a_t/a_prev) * (x_prev - s_prev*eps) + s_t*eps
//! ```
//!
//! which are exact algebraic inverses of each other whenever both directions
//! use the same `eps`. Trajectory loops therefore query the noise predictor
//! at the *upper* timestep of a rung transition in both directions, so a
//! predictor that depends only on t makes invert-then-sample an identity up
//! to rounding.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Schedule family. Cosine is the default; linear is kept for comparison
/// runs and exercises the same invariants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// Smallest signal scale any schedule reaches; keeps the terminal step away
/// from the singular alpha = 0 endpoint.
const ALPHA_FLOOR: f64 = 1e-3;

/// A noisy state tagged with its position on the schedule ladder.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub data: Tensor,
    pub t: usize,
}

impl LatentState {
    pub fn clean(data: Tensor) -> Self {
        LatentState { data, t: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    steps: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
    kind: ScheduleKind,
}

impl NoiseSchedule {
    /// Build a schedule with `steps` transitions (ladder `t = 0..=steps`).
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        let alphas: Vec<f64> = (0..=steps)
            .map(|t| {
                let u = t as f64 / steps as f64;
                let a = match kind {
                    // cos ramp, slowed by 0.999 so alpha(1) stays above the
                    // floor; the clamp is a safety net, not the mechanism.
                    ScheduleKind::Cosine => (u * 0.999 * std::f64::consts::FRAC_PI_2).cos(),
                    ScheduleKind::Linear => 1.0 - u * (1.0 - ALPHA_FLOOR),
                };
                a.clamp(ALPHA_FLOOR, 1.0)
            })
            .collect();
        let sigmas: Vec<f64> = alphas.iter().map(|a| (1.0 - a * a).sqrt()).collect();
        Ok(NoiseSchedule {
            steps,
            alphas,
            sigmas,
            kind,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Normalized ladder position in [0, 1]; what the denoiser consumes as
    /// its timestep input, so one model serves ladders of different lengths.
    pub fn t_frac(&self, t: usize) -> f64 {
        t as f64 / self.steps as f64
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    fn check_t(&self, t: usize, what: &str) -> Result<()> {
        if t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "{what} {t} outside ladder 0..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// Forward process: diffuse a clean state to level `t`.
    pub fn add_noise(&self, x0: &LatentState, t: usize, eps: &Tensor) -> Result<LatentState> {
        if x0.t != 0 {
            return Err(Error::InvalidArgument(format!(
                "add_noise expects a clean state at t=0, got t={}",
                x0.t
            )));
        }
        self.check_t(t, "target step")?;
        if !x0.data.same_shape(eps) {
            return Err(Error::ShapeMismatch(format!(
                "noise shape {:?} vs state shape {:?}",
                eps.shape(),
                x0.data.shape()
            )));
        }
        let mut data = x0.data.scale(self.alphas[t]);
        data.axpy(self.sigmas[t], eps);
        Ok(LatentState { data, t })
    }

    /// One deterministic denoising transition `t -> t_prev` (`t_prev < t`).
    pub fn ddim_step(
        &self,
        x_t: &LatentState,
        eps_pred: &Tensor,
        t_prev: usize,
    ) -> Result<LatentState> {
        let t = x_t.t;
        self.check_t(t, "current step")?;
        if t_prev >= t {
            return Err(Error::InvalidArgument(format!(
                "ddim_step needs t_prev < t, got {t_prev} >= {t}"
            )));
        }
        if !x_t.data.same_shape(eps_pred) {
            return Err(Error::ShapeMismatch(format!(
                "eps shape {:?} vs state shape {:?}",
                eps_pred.shape(),
                x_t.data.shape()
            )));
        }
        let (a_t, s_t) = (self.alphas[t], self.sigmas[t]);
        let (a_p, s_p) = (self.alphas[t_prev], self.sigmas[t_prev]);
        // (a_p/a_t)*(x_t - s_t*eps) + s_p*eps
        let data = x_t
            .data
            .zip(eps_pred, |x, e| (a_p / a_t) * (x - s_t * e) + s_p * e);
        Ok(LatentState { data, t: t_prev })
    }

    /// One inversion transition `x_prev.t -> t` (`t > x_prev.t`), the exact
    /// algebraic inverse of [`NoiseSchedule::ddim_step`] for the same `eps`.
    pub fn ddim_invert_step(
        &self,
        x_prev: &LatentState,
        eps_pred: &Tensor,
        t: usize,
    ) -> Result<LatentState> {
        let t_prev = x_prev.t;
        self.check_t(t, "target step")?;
        if t <= t_prev {
            return Err(Error::InvalidArgument(format!(
                "ddim_invert_step needs t > current {t_prev}, got {t}"
            )));
        }
        if !x_prev.data.same_shape(eps_pred) {
            return Err(Error::ShapeMismatch(format!(
                "eps shape {:?} vs state shape {:?}",
                eps_pred.shape(),
                x_prev.data.shape()
            )));
        }
        let (a_t, s_t) = (self.alphas[t], self.sigmas[t]);
        let (a_p, s_p) = (self.alphas[t_prev], self.sigmas[t_prev]);
        // (a_t/a_p)*(x_prev - s_p*eps) + s_t*eps
        let data = x_prev
            .data
            .zip(eps_pred, |x, e| (a_t / a_p) * (x - s_p * e) + s_t * e);
        Ok(LatentState { data, t })
    }
}

/// Classifier-free guidance combination `(1+s)*eps_cond - s*eps_uncond`.
/// `s = 0` returns `eps_cond` unchanged.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if !s.is_finite() || s < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "guidance scale must be finite and >= 0, got {s}"
        )));
    }
    if !eps_cond.same_shape(eps_uncond) {
        return Err(Error::ShapeMismatch(format!(
            "cond shape {:?} vs uncond shape {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        )));
    }
    Ok(eps_cond.zip(eps_uncond, |c, u| (1.0 + s) * c - s * u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    /// t-only noise predictor used by round-trip checks: a fixed random
    /// tensor per timestep, independent of the state.
    fn eps_of_t(t: usize, shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut rng::stream(seed, "eps-of-t", t as u64))
    }

    fn assert_invariants(s: &NoiseSchedule) {
        assert_eq!(s.alpha(0), 1.0, "alpha must start at exactly 1");
        assert_eq!(s.sigma(0), 0.0, "sigma must start at exactly 0");
        for t in 0..=s.steps() {
            let (a, sg) = (s.alpha(t), s.sigma(t));
            assert!(a > 0.0 && a <= 1.0, "alpha[{t}] = {a} out of (0,1]");
            assert!(
                (a * a + sg * sg - 1.0).abs() < 1e-12,
                "alpha^2+sigma^2 != 1 at t={t}"
            );
            if t > 0 {
                assert!(a < s.alpha(t - 1), "alpha not strictly decreasing at {t}");
                assert!(sg > s.sigma(t - 1), "sigma not strictly increasing at {t}");
            }
        }
    }

    #[test]
    fn cosine_ladder_matches_closed_form() {
        let s = NoiseSchedule::new(20, ScheduleKind::Cosine).unwrap();
        for t in 0..=20 {
            let want = ((t as f64 / 20.0) * 0.999 * std::f64::consts::FRAC_PI_2)
                .cos()
                .clamp(1e-3, 1.0);
            assert!(
                (s.alpha(t) - want).abs() < 1e-15,
                "alpha[{t}] = {} want {want}",
                s.alpha(t)
            );
            assert!((s.sigma(t) - (1.0 - want * want).sqrt()).abs() < 1e-15);
        }
        assert_invariants(&s);
    }

    #[test]
    fn single_step_linear_ladder_is_noised_at_the_top() {
        let s = NoiseSchedule::new(1, ScheduleKind::Linear).unwrap();
        assert!(s.alpha(1) < 1.0);
        assert!(s.sigma(1) > 0.0);
        assert_invariants(&s);
    }

    #[test]
    fn zero_steps_is_rejected() {
        assert!(NoiseSchedule::new(0, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn add_noise_matches_direct_formula() {
        let s = NoiseSchedule::new(50, ScheduleKind::Cosine).unwrap();
        let mut r = rng::stream(11, "sched-test", 0);
        let x0 = LatentState::clean(Tensor::randn(&[3, 8, 8], &mut r));
        let eps = Tensor::randn(&[3, 8, 8], &mut r);
        for t in [0, 1, 17, 50] {
            let xt = s.add_noise(&x0, t, &eps).unwrap();
            assert_eq!(xt.t, t);
            for i in 0..xt.data.numel() {
                let want = s.alpha(t) * x0.data.data()[i] + s.sigma(t) * eps.data()[i];
                assert!((xt.data.data()[i] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn add_noise_rejects_noisy_input_and_bad_shapes() {
        let s = NoiseSchedule::new(10, ScheduleKind::Cosine).unwrap();
        let mut r = rng::stream(12, "sched-test", 0);
        let x0 = LatentState::clean(Tensor::randn(&[3, 4, 4], &mut r));
        let eps = Tensor::randn(&[3, 4, 4], &mut r);
        let noisy = s.add_noise(&x0, 3, &eps).unwrap();
        assert!(s.add_noise(&noisy, 5, &eps).is_err());
        let wrong = Tensor::zeros(&[3, 4, 5]);
        assert!(matches!(
            s.add_noise(&x0, 5, &wrong),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(s.add_noise(&x0, 11, &eps).is_err());
    }

    #[test]
    fn invert_then_step_is_identity_per_rung() {
        let s = NoiseSchedule::new(30, ScheduleKind::Cosine).unwrap();
        let mut r = rng::stream(13, "sched-test", 0);
        for (t_lo, t_hi) in [(0usize, 1usize), (4, 5), (7, 23), (29, 30)] {
            let x = LatentState {
                data: Tensor::randn(&[3, 6, 6], &mut r),
                t: t_lo,
            };
            let eps = Tensor::randn(&[3, 6, 6], &mut r);
            let up = s.ddim_invert_step(&x, &eps, t_hi).unwrap();
            let back = s.ddim_step(&up, &eps, t_lo).unwrap();
            assert!(
                back.data.rel_err(&x.data) < 1e-12,
                "rung {t_lo}<->{t_hi} not inverted exactly"
            );
        }
    }

    #[test]
    fn full_round_trip_with_t_only_predictor() {
        // Invert a clean tensor all the way up the ladder, then sample back
        // down, querying the same t-keyed predictor at the upper rung of
        // each transition in both directions.
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = NoiseSchedule::new(50, kind).unwrap();
            let x0 = Tensor::randn(&[3, 8, 8], &mut rng::stream(14, "sched-test", 0));
            let mut up = LatentState::clean(x0.clone());
            for t in 1..=50 {
                let e = eps_of_t(t, x0.shape(), 99);
                up = s.ddim_invert_step(&up, &e, t).unwrap();
            }
            let mut down = up;
            for t in (1..=50).rev() {
                let e = eps_of_t(t, x0.shape(), 99);
                down = s.ddim_step(&down, &e, t - 1).unwrap();
            }
            let rel = down.data.rel_err(&x0);
            assert!(rel < 1e-5, "round trip rel err {rel} for {kind:?}");
        }
    }

    #[test]
    fn cfg_is_identity_at_scale_zero_and_affine_otherwise() {
        let mut r = rng::stream(15, "sched-test", 0);
        let c = Tensor::randn(&[3, 4, 4], &mut r);
        let u = Tensor::randn(&[3, 4, 4], &mut r);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        let g = cfg_combine(&c, &u, 7.5).unwrap();
        for i in 0..g.numel() {
            let want = 8.5 * c.data()[i] - 7.5 * u.data()[i];
            assert!((g.data()[i] - want).abs() < 1e-12);
        }
        assert!(cfg_combine(&c, &u, -1.0).is_err());
        assert!(cfg_combine(&c, &u, f64::NAN).is_err());
        assert!(cfg_combine(&c, &Tensor::zeros(&[3, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn step_rejects_bad_rungs() {
        let s = NoiseSchedule::new(10, ScheduleKind::Cosine).unwrap();
        let mut r = rng::stream(16, "sched-test", 0);
        let x = LatentState {
            data: Tensor::randn(&[1, 2, 2], &mut r),
            t: 5,
        };
        let eps = Tensor::zeros(&[1, 2, 2]);
        assert!(s.ddim_step(&x, &eps, 5).is_err());
        assert!(s.ddim_step(&x, &eps, 6).is_err());
        assert!(s.ddim_invert_step(&x, &eps, 5).is_err());
        assert!(s.ddim_invert_step(&x, &eps, 11).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants_hold_for_any_length(
            steps in 1usize..200,
            cosine in proptest::bool::ANY,
        ) {
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
            let s = NoiseSchedule::new(steps, kind).unwrap();
            assert_invariants(&s);
        }

        #[test]
        fn single_rung_round_trip_is_exact(
            seed in 0u64..1000,
            steps in 2usize..60,
        ) {
            let s = NoiseSchedule::new(steps, ScheduleKind::Cosine).unwrap();
            let mut r = rng::stream(seed, "sched-prop", 0);
            let t_lo = seed as usize % (steps - 1);
            let t_hi = t_lo + 1 + (seed as usize / 7) % (steps - t_lo - 1).max(1);
            let x = LatentState { data: Tensor::randn(&[2, 3, 3], &mut r), t: t_lo };
            let eps = Tensor::randn(&[2, 3, 3], &mut r);
            let up = s.ddim_invert_step(&x, &eps, t_hi).unwrap();
            let back = s.ddim_step(&up, &eps, t_lo).unwrap();
            prop_assert!(back.data.rel_err(&x.data) < 1e-10);
        }
    }
}
