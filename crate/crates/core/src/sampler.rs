//! Reverse-time generation from the user state `x₁` toward `x̂₀`.
//!
//! Both transitions move from time `s` to an earlier time `t` using the
//! predictor's estimate of `x₀`:
//!
//! ```text
//! SDE: x_t = (α_tσ_t²/α_sσ_s²)·x_s + α_t(1 − σ_t²/σ_s²)·x̂₀ + α_tσ_t√(1 − σ_t²/σ_s²)·ε
//! ODE: x_t = (α_tσ_tσ̄_t/α_sσ_sσ̄_s)·x_s
//!          + (α_t/σ₁²)·[(σ̄_t² − σ̄_sσ_tσ̄_t/σ_s)·x̂₀ + (σ_t² − σ_sσ_tσ̄_t/σ̄_s)·x₁/α₁]
//! ```
//!
//! Time runs on the uniform grid `t_i = 1 − i/steps`.

use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::rng;
use crate::schedule::{ScheduleCoeffs, ScheduleError, ScheduleParams};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("target time {t} is after source time {s}")]
    Ordering { s: Scalar, t: Scalar },
    #[error("cannot step from time {0}: the bridge has no spread there")]
    Degenerate(Scalar),
    #[error("state at s = 1 must equal the user state")]
    OffBridge,
    #[error("predictor produced a non-finite value at step {step}")]
    NonFinite { step: usize },
    #[error("vector length mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("sampler needs at least one step")]
    NoSteps,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplerMode {
    Sde,
    Ode,
}

impl SamplerMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sde => "sde",
            Self::Ode => "ode",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sde" => Some(Self::Sde),
            "ode" => Some(Self::Ode),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub steps: usize,
    pub guidance_w: Scalar,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { mode: SamplerMode::Sde, steps: 12, guidance_w: 0.8, rng_seed: 0 }
    }
}

/// Anything that maps `(x_s, s, x₁)` to an estimate of `x₀`.
pub trait Predictor {
    fn predict_x0(&self, x_s: &[Scalar], s: Scalar, x1: &[Scalar]) -> Vec<Scalar>;
}

impl<F> Predictor for F
where
    F: Fn(&[Scalar], Scalar, &[Scalar]) -> Vec<Scalar>,
{
    fn predict_x0(&self, x_s: &[Scalar], s: Scalar, x1: &[Scalar]) -> Vec<Scalar> {
        self(x_s, s, x1)
    }
}

/// Which predictor(s) drive the chain.
#[derive(Clone, Copy)]
pub enum PredictorHandle<'a> {
    Single(&'a dyn Predictor),
    /// Classifier-free guidance: the chain starts at the conditional state,
    /// and each step mixes the conditional prediction with an unconditional
    /// one fed `x1_uncond`.
    Guided {
        cond: &'a dyn Predictor,
        uncond: &'a dyn Predictor,
        x1_uncond: &'a [Scalar],
        w: Scalar,
    },
}

/// `(1 + w)·cond − w·uncond`, written as `cond + w·(cond − uncond)`.
pub fn guided_predict(cond: &[Scalar], uncond: &[Scalar], w: Scalar) -> Vec<Scalar> {
    cond.iter().zip(uncond).map(|(c, u)| c + w * (c - u)).collect()
}

fn check_order(cs: &ScheduleCoeffs, ct: &ScheduleCoeffs) -> Result<bool, SamplerError> {
    if ct.t > cs.t {
        return Err(SamplerError::Ordering { s: cs.t, t: ct.t });
    }
    Ok(ct.t == cs.t)
}

fn check_len(expected: usize, got: usize) -> Result<(), SamplerError> {
    if expected != got {
        return Err(SamplerError::Dimension { expected, got });
    }
    Ok(())
}

/// One stochastic transition `s → t`.
pub fn sde_step(
    x_s: &[Scalar],
    pred: &[Scalar],
    cs: &ScheduleCoeffs,
    ct: &ScheduleCoeffs,
    eps: &[Scalar],
) -> Result<Vec<Scalar>, SamplerError> {
    check_len(x_s.len(), pred.len())?;
    check_len(x_s.len(), eps.len())?;
    if check_order(cs, ct)? {
        return Ok(x_s.to_vec());
    }
    if !(cs.sigma2_t > 0.0) {
        return Err(SamplerError::Degenerate(cs.t));
    }
    let ratio = ct.sigma2_t / cs.sigma2_t;
    let c_state = ct.alpha_t * ct.sigma2_t / (cs.alpha_t * cs.sigma2_t);
    let c_pred = ct.alpha_t * (1.0 - ratio);
    let c_noise = ct.alpha_t * ct.sigma_t() * libm::sqrt(1.0 - ratio);
    Ok(x_s.iter().zip(pred).zip(eps).map(|((x, p), e)| c_state * x + c_pred * p + c_noise * e).collect())
}

/// One deterministic transition `s → t`.
///
/// At `s = 1` (`σ̄_s = 0`) the `x_s` coefficient and the second half of the
/// `x₁` coefficient are singular. Grouped together they read
/// `(α_tσ_tσ̄_t/σ̄_s)·(x_s/(α_sσ_s) − σ_s·x₁/(σ₁²α₁))`, and at `s = 1` the
/// bracket is `(x_s − x₁)/(α₁σ₁)`, which is zero on the bridge. The step then
/// reduces to the bridge mean at `t` with `x̂₀` in place of `x₀`.
pub fn ode_step(
    x_s: &[Scalar],
    pred: &[Scalar],
    x1: &[Scalar],
    cs: &ScheduleCoeffs,
    ct: &ScheduleCoeffs,
) -> Result<Vec<Scalar>, SamplerError> {
    check_len(x_s.len(), pred.len())?;
    check_len(x_s.len(), x1.len())?;
    if check_order(cs, ct)? {
        return Ok(x_s.to_vec());
    }
    if !(cs.sigma2_t > 0.0) {
        return Err(SamplerError::Degenerate(cs.t));
    }
    let (sig_s, sig_t) = (cs.sigma_t(), ct.sigma_t());
    let (bar_s, bar_t) = (cs.sigma_bar_t(), ct.sigma_bar_t());
    let s1 = ct.sigma2_1;
    let scale = ct.alpha_t / s1;
    let c_pred = scale * (ct.sigma_bar2_t - bar_s * bar_t * (sig_t / sig_s));
    if bar_s == 0.0 {
        if x_s != x1 {
            return Err(SamplerError::OffBridge);
        }
        let c_x1 = scale * ct.sigma2_t / ct.alpha_1;
        return Ok(pred.iter().zip(x1).map(|(p, y)| c_pred * p + c_x1 * y).collect());
    }
    let c_state = (ct.alpha_t / cs.alpha_t) * (sig_t / sig_s) * (bar_t / bar_s);
    let c_x1 = scale * (ct.sigma2_t - sig_s * sig_t * (bar_t / bar_s)) / ct.alpha_1;
    Ok(x_s.iter().zip(pred).zip(x1).map(|((x, p), y)| c_state * x + c_pred * p + c_x1 * y).collect())
}

/// Uniform descending grid `1 = t_0 > t_1 > … > t_steps = 0`.
pub fn time_grid(steps: usize) -> Vec<Scalar> {
    (0..=steps).map(|i| 1.0 - i as Scalar / steps as Scalar).collect()
}

/// Runs the chain from `x1` using a stream seeded by `config.rng_seed`.
pub fn sample(
    x1: &[Scalar],
    predictor: PredictorHandle<'_>,
    schedule: &ScheduleParams,
    config: &SamplerConfig,
) -> Result<Vec<Scalar>, SamplerError> {
    let mut rng = rng::seeded(config.rng_seed);
    sample_with_rng(x1, predictor, schedule, config, &mut rng)
}

/// Runs the chain from `x1`, drawing SDE noise from `rng`.
///
/// In guided mode `config.guidance_w` is ignored in favour of the handle's `w`.
pub fn sample_with_rng<R: Rng + ?Sized>(
    x1: &[Scalar],
    predictor: PredictorHandle<'_>,
    schedule: &ScheduleParams,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Scalar>, SamplerError> {
    if config.steps == 0 {
        return Err(SamplerError::NoSteps);
    }
    if let PredictorHandle::Guided { x1_uncond, .. } = predictor {
        check_len(x1.len(), x1_uncond.len())?;
    }
    let grid = time_grid(config.steps);
    let mut x = x1.to_vec();
    let mut cs = schedule.coeffs(grid[0])?;
    for step in 0..config.steps {
        let ct = schedule.coeffs(grid[step + 1])?;
        let pred = match predictor {
            PredictorHandle::Single(p) => p.predict_x0(&x, cs.t, x1),
            PredictorHandle::Guided { cond, uncond, x1_uncond, w } => {
                let c = cond.predict_x0(&x, cs.t, x1);
                if w == 0.0 {
                    c
                } else {
                    let u = uncond.predict_x0(&x, cs.t, x1_uncond);
                    check_len(c.len(), u.len())?;
                    guided_predict(&c, &u, w)
                }
            }
        };
        check_len(x.len(), pred.len())?;
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(SamplerError::NonFinite { step });
        }
        x = match config.mode {
            SamplerMode::Sde => {
                let eps = rng::normal_vec(rng, x.len());
                sde_step(&x, &pred, &cs, &ct, &eps)?
            }
            SamplerMode::Ode => ode_step(&x, &pred, x1, &cs, &ct)?,
        };
        cs = ct;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{marginal_params, BridgeEndpoints};
    use crate::schedule::ScheduleKind;
    use alloc::vec;

    fn gmax10() -> ScheduleParams {
        ScheduleParams::new(ScheduleKind::Gmax, 0.01, 10.0).unwrap()
    }

    fn both() -> [ScheduleParams; 2] {
        [gmax10(), ScheduleParams::new(ScheduleKind::Vp, 0.01, 20.0).unwrap()]
    }

    #[test]
    fn zero_elapsed_time_is_identity() {
        for p in both() {
            let c = p.coeffs(0.6).unwrap();
            let x = [0.3, -2.0, 1.1];
            assert_eq!(sde_step(&x, &[9.0; 3], &c, &c, &[1.0; 3]).unwrap(), x.to_vec());
            assert_eq!(ode_step(&x, &[9.0; 3], &[4.0; 3], &c, &c).unwrap(), x.to_vec());
        }
    }

    #[test]
    fn final_step_collapses_to_prediction() {
        for p in both() {
            let (cs, c0) = (p.coeffs(0.25).unwrap(), p.coeffs(0.0).unwrap());
            let pred = [0.125, -3.5, 7.0];
            let x = [1.0, 2.0, 3.0];
            assert_eq!(sde_step(&x, &pred, &cs, &c0, &[0.7, -0.2, 1.3]).unwrap(), pred.to_vec());
            assert_eq!(ode_step(&x, &pred, &[5.0; 3], &cs, &c0).unwrap(), pred.to_vec());
        }
    }

    #[test]
    fn sde_half_step_reference() {
        let p = gmax10();
        let (c1, ch) = (p.coeffs(1.0).unwrap(), p.coeffs(0.5).unwrap());
        let x1 = [2.0, -1.0];
        let x0 = [0.5, 0.25];
        let out = sde_step(&x1, &x0, &c1, &ch, &[0.0, 0.0]).unwrap();
        let r = 1.25375 / 5.005;
        for i in 0..2 {
            assert!((out[i] - (r * x1[i] + (1.0 - r) * x0[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn ordering_is_enforced() {
        let p = gmax10();
        let (a, b) = (p.coeffs(0.2).unwrap(), p.coeffs(0.4).unwrap());
        assert!(matches!(sde_step(&[0.0], &[0.0], &a, &b, &[0.0]), Err(SamplerError::Ordering { .. })));
        assert!(matches!(ode_step(&[0.0], &[0.0], &[0.0], &a, &b), Err(SamplerError::Ordering { .. })));
    }

    #[test]
    fn ode_start_matches_near_boundary_limit() {
        for p in both() {
            let x1 = [0.8, -0.3, 1.7];
            let pred = [-0.4, 0.9, 0.2];
            let ct = p.coeffs(0.75).unwrap();
            let at_one = ode_step(&x1, &pred, &x1, &p.coeffs(1.0).unwrap(), &ct).unwrap();
            // Just below s = 1, put x_s on the bridge through (pred, x1).
            let s = 1.0 - 1e-6;
            let cs = p.coeffs(s).unwrap();
            let ends = BridgeEndpoints::new(&pred, &x1).unwrap();
            let (x_s, _) = marginal_params(&ends, &cs).unwrap();
            let near = ode_step(&x_s, &pred, &x1, &cs, &ct).unwrap();
            for (a, b) in at_one.iter().zip(&near) {
                assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
            }
            // Starting exactly at x1 the gap shrinks as s → 1.
            let gap = |s: Scalar| {
                let cs = p.coeffs(s).unwrap();
                let y = ode_step(&x1, &pred, &x1, &cs, &ct).unwrap();
                y.iter().zip(&at_one).map(|(a, b)| (a - b).abs()).fold(0.0, Scalar::max)
            };
            assert!(gap(1.0 - 1e-10) < gap(1.0 - 1e-6));
            assert!(gap(1.0 - 1e-10) < 1e-3);
            assert_eq!(
                ode_step(&[0.0, 0.0, 0.0], &pred, &x1, &p.coeffs(1.0).unwrap(), &ct),
                Err(SamplerError::OffBridge)
            );
        }
    }

    #[test]
    fn single_step_sde_returns_prediction_at_start() {
        let x1 = vec![0.5, -0.5, 2.0];
        let pred = |x: &[Scalar], s: Scalar, y: &[Scalar]| -> Vec<Scalar> {
            x.iter().zip(y).map(|(a, b)| a * s + 0.5 * b).collect()
        };
        let expected = pred(&x1, 1.0, &x1);
        for seed in 0..5 {
            let cfg = SamplerConfig { mode: SamplerMode::Sde, steps: 1, guidance_w: 0.0, rng_seed: seed };
            let out = sample(&x1, PredictorHandle::Single(&pred), &gmax10(), &cfg).unwrap();
            assert_eq!(out, expected);
        }
    }

    #[test]
    fn guidance_arithmetic() {
        assert_eq!(guided_predict(&[1.0, 0.0], &[0.0, 1.0], 1.0), vec![2.0, -1.0]);
        assert_eq!(guided_predict(&[0.3, -0.7], &[5.0, 2.0], 0.0), vec![0.3, -0.7]);
        for w in [0.0, 0.8, 3.0] {
            assert_eq!(guided_predict(&[0.3, -0.7], &[0.3, -0.7], w), vec![0.3, -0.7]);
        }
    }

    #[test]
    fn non_finite_prediction_reports_step() {
        let bad = |x: &[Scalar], s: Scalar, _: &[Scalar]| -> Vec<Scalar> {
            x.iter().map(|v| if s < 0.6 { Scalar::NAN } else { *v }).collect()
        };
        let cfg = SamplerConfig { mode: SamplerMode::Ode, steps: 4, guidance_w: 0.0, rng_seed: 0 };
        let err = sample(&[1.0, 2.0], PredictorHandle::Single(&bad), &gmax10(), &cfg).unwrap_err();
        assert_eq!(err, SamplerError::NonFinite { step: 2 });
        let cfg = SamplerConfig { steps: 0, ..cfg };
        assert_eq!(sample(&[1.0], PredictorHandle::Single(&bad), &gmax10(), &cfg), Err(SamplerError::NoSteps));
    }

    #[test]
    fn grid_is_uniform_and_ends_at_zero() {
        assert_eq!(time_grid(4), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(*time_grid(7).last().unwrap(), 0.0);
    }
}
