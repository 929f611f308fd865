//! Drift/diffusion schedules and their bridge coefficients.
//!
//! Both schedules share the linear rate `β(t) = β₀ + t(β₁ − β₀)` with
//! `g²(t) = β(t)`. `gmax` has no drift; `vp` uses `f(t) = −β(t)/2`.
//! With `B(t) = ∫₀ᵗ β = β₀t + (β₁ − β₀)t²/2` the coefficients are
//!
//! | kind | `α_t`        | `σ_t²`          |
//! |------|--------------|-----------------|
//! | gmax | `1`          | `B(t)`          |
//! | vp   | `e^{−B(t)/2}`| `e^{B(t)} − 1`  |
//!
//! and for both `ᾱ_t = α_t/α₁`, `σ̄_t² = σ₁² − σ_t²`.

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("time {0} outside [0, 1]")]
    Domain(Scalar),
    #[error("invalid schedule parameters: {0}")]
    Params(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    Gmax,
    Vp,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gmax => "gmax",
            Self::Vp => "vp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gmax" => Some(Self::Gmax),
            "vp" => Some(Self::Vp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub beta0: Scalar,
    pub beta1: Scalar,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { kind: ScheduleKind::Gmax, beta0: 0.01, beta1: 10.0 }
    }
}

/// Coefficients of the bridge at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleCoeffs {
    pub t: Scalar,
    pub alpha_t: Scalar,
    pub alpha_bar_t: Scalar,
    pub sigma2_t: Scalar,
    pub sigma_bar2_t: Scalar,
    /// Total variance `σ₁²`.
    pub sigma2_1: Scalar,
    /// `α₁`, needed by the ODE sampler's `x₁/α₁` term.
    pub alpha_1: Scalar,
}

impl ScheduleParams {
    pub fn new(kind: ScheduleKind, beta0: Scalar, beta1: Scalar) -> Result<Self, ScheduleError> {
        let p = Self { kind, beta0, beta1 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return Err(ScheduleError::Params("beta0 must be positive"));
        }
        if !(self.beta1 > self.beta0 && self.beta1.is_finite()) {
            return Err(ScheduleError::Params("beta1 must exceed beta0"));
        }
        Ok(())
    }

    /// `β(t)`, equal to `g²(t)` for both kinds.
    pub fn beta(&self, t: Scalar) -> Scalar {
        self.beta0 + t * (self.beta1 - self.beta0)
    }

    /// Drift rate `f(t)`.
    pub fn drift(&self, t: Scalar) -> Scalar {
        match self.kind {
            ScheduleKind::Gmax => 0.0,
            ScheduleKind::Vp => -0.5 * self.beta(t),
        }
    }

    pub fn diffusion2(&self, t: Scalar) -> Scalar {
        self.beta(t)
    }

    /// `B(t) = ∫₀ᵗ β(τ) dτ`.
    fn integrated_beta(&self, t: Scalar) -> Scalar {
        self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t
    }

    fn alpha(&self, t: Scalar) -> Scalar {
        match self.kind {
            ScheduleKind::Gmax => 1.0,
            ScheduleKind::Vp => libm::exp(-0.5 * self.integrated_beta(t)),
        }
    }

    fn sigma2(&self, t: Scalar) -> Scalar {
        match self.kind {
            ScheduleKind::Gmax => self.integrated_beta(t),
            ScheduleKind::Vp => libm::expm1(self.integrated_beta(t)),
        }
    }

    /// Closed-form coefficients at time `t ∈ [0, 1]`.
    pub fn coeffs(&self, t: Scalar) -> Result<ScheduleCoeffs, ScheduleError> {
        check_time(t)?;
        let alpha_1 = self.alpha(1.0);
        let sigma2_1 = self.sigma2(1.0);
        let alpha_t = self.alpha(t);
        let sigma2_t = self.sigma2(t);
        let alpha_bar_t = if t == 1.0 { 1.0 } else { alpha_t / alpha_1 };
        Ok(ScheduleCoeffs { t, alpha_t, alpha_bar_t, sigma2_t, sigma_bar2_t: sigma2_1 - sigma2_t, sigma2_1, alpha_1 })
    }
}

fn check_time(t: Scalar) -> Result<(), ScheduleError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(ScheduleError::Domain(t))
    }
}

impl ScheduleCoeffs {
    pub fn sigma_t(&self) -> Scalar {
        libm::sqrt(self.sigma2_t)
    }

    pub fn sigma_bar_t(&self) -> Scalar {
        libm::sqrt(self.sigma_bar2_t)
    }

    pub fn sigma_1(&self) -> Scalar {
        libm::sqrt(self.sigma2_1)
    }

    /// Componentwise comparison: every field within `tol·max(1, |reference|)`.
    pub fn max_scaled_error(&self, reference: &ScheduleCoeffs) -> Scalar {
        let pairs = [
            (self.alpha_t, reference.alpha_t),
            (self.alpha_bar_t, reference.alpha_bar_t),
            (self.sigma2_t, reference.sigma2_t),
            (self.sigma_bar2_t, reference.sigma_bar2_t),
            (self.sigma2_1, reference.sigma2_1),
            (self.alpha_1, reference.alpha_1),
        ];
        pairs.iter().map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, Scalar::max)
    }
}

/// Direct numerical integration of the coefficient definitions.
///
/// Integrates `f` for the scale factors and `g²/α²` for the variances with
/// adaptive Simpson quadrature; nothing here uses the closed forms above.
pub mod oracle {
    use super::*;

    /// Absolute tolerance requested from each integral.
    pub const TOLERANCE: Scalar = 1e-10;

    /// Adaptive Simpson quadrature of `f` on `[a, b]`.
    pub fn adaptive_simpson<F: Fn(Scalar) -> Scalar>(f: &F, a: Scalar, b: Scalar, tol: Scalar) -> Scalar {
        if a == b {
            return 0.0;
        }
        let (fa, fb) = (f(a), f(b));
        let m = 0.5 * (a + b);
        let fm = f(m);
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        refine(f, a, b, fa, fm, fb, whole, tol, 48)
    }

    #[allow(clippy::too_many_arguments)]
    fn refine<F: Fn(Scalar) -> Scalar>(
        f: &F,
        a: Scalar,
        b: Scalar,
        fa: Scalar,
        fm: Scalar,
        fb: Scalar,
        whole: Scalar,
        tol: Scalar,
        depth: u32,
    ) -> Scalar {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        refine(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + refine(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }

    fn alpha(p: &ScheduleParams, t: Scalar) -> Scalar {
        libm::exp(adaptive_simpson(&|s| p.drift(s), 0.0, t, TOLERANCE))
    }

    /// `∫ₐᵇ g²/α² dτ`, scaled so the tolerance is relative for large values.
    fn variance_integral(p: &ScheduleParams, a: Scalar, b: Scalar) -> Scalar {
        let integrand = |s: Scalar| p.diffusion2(s) / (alpha(p, s) * alpha(p, s));
        let scale = integrand(b).abs().max(integrand(a).abs()).max(1.0);
        adaptive_simpson(&integrand, a, b, TOLERANCE * scale)
    }

    /// Coefficients at `t` by quadrature.
    pub fn coeffs(p: &ScheduleParams, t: Scalar) -> Result<ScheduleCoeffs, ScheduleError> {
        check_time(t)?;
        let alpha_t = alpha(p, t);
        let alpha_1 = alpha(p, 1.0);
        let alpha_bar_t = libm::exp(-adaptive_simpson(&|s| p.drift(s), t, 1.0, TOLERANCE));
        Ok(ScheduleCoeffs {
            t,
            alpha_t,
            alpha_bar_t,
            sigma2_t: variance_integral(p, 0.0, t),
            sigma_bar2_t: variance_integral(p, t, 1.0),
            sigma2_1: variance_integral(p, 0.0, 1.0),
            alpha_1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gmax(beta1: Scalar) -> ScheduleParams {
        ScheduleParams::new(ScheduleKind::Gmax, 0.01, beta1).unwrap()
    }

    #[test]
    fn gmax_reference_values() {
        let c = gmax(10.0).coeffs(1.0).unwrap();
        assert!((c.sigma2_1 - 5.005).abs() < 1e-12);
        assert_eq!((c.alpha_t, c.alpha_bar_t), (1.0, 1.0));
        let c = gmax(10.0).coeffs(0.5).unwrap();
        assert!((c.sigma2_t - 1.25375).abs() < 1e-12);
        assert!((c.sigma_bar2_t - 3.75125).abs() < 1e-12);
    }

    #[test]
    fn vp_alpha_one() {
        let p = ScheduleParams::new(ScheduleKind::Vp, 0.01, 20.0).unwrap();
        let c = p.coeffs(1.0).unwrap();
        assert!((c.alpha_t - libm::exp(-5.0025)).abs() < 1e-15);
        assert!((c.alpha_t - 6.720e-3).abs() < 5e-6);
    }

    #[test]
    fn boundaries_are_exact() {
        for kind in [ScheduleKind::Gmax, ScheduleKind::Vp] {
            for beta1 in [10.0, 20.0, 30.0, 40.0, 50.0] {
                let p = ScheduleParams::new(kind, 0.01, beta1).unwrap();
                let c0 = p.coeffs(0.0).unwrap();
                let c1 = p.coeffs(1.0).unwrap();
                assert_eq!(c0.alpha_t, 1.0);
                assert_eq!(c0.sigma2_t, 0.0);
                assert_eq!(c0.sigma_bar2_t, c0.sigma2_1);
                assert_eq!(c1.alpha_bar_t, 1.0);
                assert_eq!(c1.sigma_bar2_t, 0.0);
            }
        }
    }

    #[test]
    fn gmax_variances_partition_total() {
        let p = gmax(30.0);
        for i in 0..=20 {
            let c = p.coeffs(i as Scalar / 20.0).unwrap();
            assert_eq!((c.alpha_t, c.alpha_bar_t), (1.0, 1.0));
            assert!((c.sigma2_t + c.sigma_bar2_t - c.sigma2_1).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(gmax(10.0).coeffs(1.5), Err(ScheduleError::Domain(1.5)));
        assert!(gmax(10.0).coeffs(-0.1).is_err());
        assert!(ScheduleParams::new(ScheduleKind::Vp, 0.5, 0.1).is_err());
        assert!(ScheduleParams::new(ScheduleKind::Vp, 0.0, 1.0).is_err());
    }

    #[test]
    fn oracle_zero_time_and_sample_agreement() {
        let p = gmax(10.0);
        let o = oracle::coeffs(&p, 0.0).unwrap();
        assert_eq!(o.sigma2_t, 0.0);
        let o = oracle::coeffs(&p, 0.5).unwrap();
        assert!((o.sigma2_t - 1.25375).abs() < 1e-10);
        let v = ScheduleParams::new(ScheduleKind::Vp, 0.01, 20.0).unwrap();
        let (o, c) = (oracle::coeffs(&v, 0.3).unwrap(), v.coeffs(0.3).unwrap());
        assert!(c.max_scaled_error(&o) < 1e-8, "{c:?} vs {o:?}");
        assert!((c.alpha_bar_t * c.alpha_1 - c.alpha_t).abs() < 1e-15);
    }
}

#[cfg(test)]
mod sweep {
    use super::*;

    #[test]
    fn closed_form_matches_quadrature_on_grid() {
        let mut worst: Scalar = 0.0;
        for kind in [ScheduleKind::Gmax, ScheduleKind::Vp] {
            for beta1 in [10.0, 20.0, 30.0, 40.0, 50.0] {
                let p = ScheduleParams::new(kind, 0.01, beta1).unwrap();
                let mut prev: Option<ScheduleCoeffs> = None;
                for i in 0..=100 {
                    let t = i as Scalar / 100.0;
                    let c = p.coeffs(t).unwrap();
                    worst = worst.max(c.max_scaled_error(&oracle::coeffs(&p, t).unwrap()));
                    if let Some(q) = prev {
                        assert!(c.sigma2_t >= q.sigma2_t);
                        assert!(c.sigma_bar2_t <= q.sigma_bar2_t);
                    }
                    prev = Some(c);
                }
            }
        }
        assert!(worst < 1e-8, "worst scaled error {worst:e}");
    }
}
