//! Tractable Gaussian bridge between the user state and the target item.
//!
//! `x₀` is the target item embedding and `x₁` the encoded user state. At
//! time `t` the bridge marginal is isotropic Gaussian with
//!
//! ```text
//! mean = (α_t σ̄_t² x₀ + ᾱ_t σ_t² x₁) / σ₁²
//! var  =  α_t² σ̄_t² σ_t² / σ₁²
//! ```
//!
//! [`lemma_quantities`] evaluates the finite-width construction the marginal
//! is the limit of, and is only used for verification.

use alloc::vec::Vec;

use thiserror::Error;

use crate::schedule::ScheduleCoeffs;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BridgeError {
    #[error("endpoint dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("degenerate schedule: total variance is zero")]
    Degenerate,
    #[error("width parameter must be positive")]
    Width,
}

/// The two pinned ends of a bridge.
#[derive(Debug, Clone, Copy)]
pub struct BridgeEndpoints<'a> {
    /// Target item embedding.
    pub x0: &'a [Scalar],
    /// User state.
    pub x1: &'a [Scalar],
}

impl<'a> BridgeEndpoints<'a> {
    pub fn new(x0: &'a [Scalar], x1: &'a [Scalar]) -> Result<Self, BridgeError> {
        if x0.len() != x1.len() {
            return Err(BridgeError::Dimension(x0.len(), x1.len()));
        }
        Ok(Self { x0, x1 })
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }
}

/// Scalar weights of the marginal: `mean = w0·x₀ + w1·x₁`, `x_t = mean + std·ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalWeights {
    pub w0: Scalar,
    pub w1: Scalar,
    pub var: Scalar,
}

impl MarginalWeights {
    pub fn std(&self) -> Scalar {
        libm::sqrt(self.var)
    }
}

/// Mean/variance weights at the coefficients' time.
pub fn marginal_weights(c: &ScheduleCoeffs) -> Result<MarginalWeights, BridgeError> {
    if !(c.sigma2_1 > 0.0) {
        return Err(BridgeError::Degenerate);
    }
    Ok(MarginalWeights {
        w0: c.alpha_t * c.sigma_bar2_t / c.sigma2_1,
        w1: c.alpha_bar_t * c.sigma2_t / c.sigma2_1,
        var: c.alpha_t * c.alpha_t * c.sigma_bar2_t * c.sigma2_t / c.sigma2_1,
    })
}

/// Marginal mean vector and scalar variance.
pub fn marginal_params(ends: &BridgeEndpoints<'_>, c: &ScheduleCoeffs) -> Result<(Vec<Scalar>, Scalar), BridgeError> {
    let w = marginal_weights(c)?;
    let mean = ends.x0.iter().zip(ends.x1).map(|(a, b)| w.w0 * a + w.w1 * b).collect();
    Ok((mean, w.var))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSample {
    pub t: Scalar,
    pub x_t: Vec<Scalar>,
    pub eps: Vec<Scalar>,
}

/// Draws `x_t = mean + std·ε` for caller-supplied standard normal `eps`.
pub fn sample_xt(ends: &BridgeEndpoints<'_>, c: &ScheduleCoeffs, eps: &[Scalar]) -> Result<BridgeSample, BridgeError> {
    if eps.len() != ends.dim() {
        return Err(BridgeError::Dimension(ends.dim(), eps.len()));
    }
    let w = marginal_weights(c)?;
    let std = w.std();
    let x_t = ends.x0.iter().zip(ends.x1).zip(eps).map(|((a, b), e)| w.w0 * a + w.w1 * b + std * e).collect();
    Ok(BridgeSample { t: c.t, x_t, eps: eps.to_vec() })
}

/// Isotropic Gaussian `N(mean, var·I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsoGaussian {
    pub mean: Vec<Scalar>,
    pub var: Scalar,
}

impl IsoGaussian {
    /// Normalized product of two isotropic Gaussian densities.
    pub fn product(&self, other: &IsoGaussian) -> IsoGaussian {
        let (p, q) = (1.0 / self.var, 1.0 / other.var);
        let var = 1.0 / (p + q);
        let mean = self.mean.iter().zip(&other.mean).map(|(a, b)| var * (p * a + q * b)).collect();
        IsoGaussian { mean, var }
    }
}

/// Finite-width bridge potentials.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaQuantities {
    pub a: Vec<Scalar>,
    pub b: Vec<Scalar>,
    pub sigma2: Scalar,
    pub epsilon: Scalar,
    /// Forward potential `Ψ̂_t = N(α_t a, α_t²(σ² + σ_t²) I)`.
    pub psi_hat_t: IsoGaussian,
    /// Backward potential `Ψ_t = N(ᾱ_t b, α_t²(σ² + σ̄_t²) I)`.
    pub psi_t: IsoGaussian,
}

/// Potentials of the bridge whose endpoints have width `epsilon`.
///
/// `σ² = ε² + (√(σ₁⁴ + 4ε⁴) − σ₁²)/2`, `a = x₀ + (σ²/σ₁²)(x₀ − x₁/α₁)`,
/// `b = x₁ + (σ²/σ₁²)(x₁ − α₁x₀)`. `Ψ̂_t` propagates `N(a, σ²I)` forward from
/// time 0, giving variance `α_t²(σ² + σ_t²)`. `Ψ_t` propagates `N(b, α₁²σ²I)`
/// backward from time 1; in rescaled coordinates `x/α` that adds `σ̄_t²` to
/// `σ²`, giving variance `α_t²(σ² + σ̄_t²)`. As `ε → 0` these tend to
/// `N(α_t x₀, α_t²σ_t²I)` and `N(ᾱ_t x₁, α_t²σ̄_t²I)`.
pub fn lemma_quantities(
    ends: &BridgeEndpoints<'_>,
    c: &ScheduleCoeffs,
    epsilon: Scalar,
) -> Result<LemmaQuantities, BridgeError> {
    if !(epsilon > 0.0) {
        return Err(BridgeError::Width);
    }
    if !(c.sigma2_1 > 0.0) {
        return Err(BridgeError::Degenerate);
    }
    let s1 = c.sigma2_1;
    let sigma2 = width_variance(s1, epsilon);
    let r = sigma2 / s1;
    let a: Vec<Scalar> = ends.x0.iter().zip(ends.x1).map(|(x0, x1)| x0 + r * (x0 - x1 / c.alpha_1)).collect();
    let b: Vec<Scalar> = ends.x1.iter().zip(ends.x0).map(|(x1, x0)| x1 + r * (x1 - c.alpha_1 * x0)).collect();
    let a2 = c.alpha_t * c.alpha_t;
    let psi_hat_t = IsoGaussian { mean: a.iter().map(|v| c.alpha_t * v).collect(), var: a2 * (sigma2 + c.sigma2_t) };
    let psi_t =
        IsoGaussian { mean: b.iter().map(|v| c.alpha_bar_t * v).collect(), var: a2 * (sigma2 + c.sigma_bar2_t) };
    Ok(LemmaQuantities { a, b, sigma2, epsilon, psi_hat_t, psi_t })
}

/// `σ² = ε² + (√(σ₁⁴ + 4ε⁴) − σ₁²)/2`, evaluated without cancellation.
pub fn width_variance(sigma2_1: Scalar, epsilon: Scalar) -> Scalar {
    let e2 = epsilon * epsilon;
    let s4 = sigma2_1 * sigma2_1;
    // √(s⁴+4e⁴) − s² = 4e⁴ / (√(s⁴+4e⁴) + s²)
    e2 + 2.0 * e2 * e2 / (libm::sqrt(s4 + 4.0 * e2 * e2) + sigma2_1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{ScheduleKind, ScheduleParams};
    use alloc::vec;

    fn gmax10() -> ScheduleParams {
        ScheduleParams::new(ScheduleKind::Gmax, 0.01, 10.0).unwrap()
    }

    #[test]
    fn endpoints_pin_exactly() {
        let x0 = [0.3, -1.2, 2.0];
        let x1 = [1.5, 0.25, -0.75];
        let ends = BridgeEndpoints::new(&x0, &x1).unwrap();
        for kind in [ScheduleKind::Gmax, ScheduleKind::Vp] {
            let p = ScheduleParams::new(kind, 0.01, 20.0).unwrap();
            let (m0, v0) = marginal_params(&ends, &p.coeffs(0.0).unwrap()).unwrap();
            let (m1, v1) = marginal_params(&ends, &p.coeffs(1.0).unwrap()).unwrap();
            assert_eq!((m0.as_slice(), v0), (&x0[..], 0.0));
            assert_eq!((m1.as_slice(), v1), (&x1[..], 0.0));
        }
    }

    #[test]
    fn midpoint_weights() {
        let w = marginal_weights(&gmax10().coeffs(0.5).unwrap()).unwrap();
        assert!((w.w0 - 0.74950).abs() < 5e-6);
        assert!((w.w1 - 0.25050).abs() < 5e-6);
        assert!((w.std() - 0.96937).abs() < 5e-6);
    }

    #[test]
    fn sample_with_zero_noise_is_mean() {
        let x0 = [1.0, 2.0];
        let x1 = [-1.0, 0.5];
        let ends = BridgeEndpoints::new(&x0, &x1).unwrap();
        let c = gmax10().coeffs(0.3).unwrap();
        let (mean, _) = marginal_params(&ends, &c).unwrap();
        assert_eq!(sample_xt(&ends, &c, &[0.0, 0.0]).unwrap().x_t, mean);
        let c0 = gmax10().coeffs(0.0).unwrap();
        assert_eq!(sample_xt(&ends, &c0, &[3.0, -7.0]).unwrap().x_t, x0.to_vec());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert_eq!(BridgeEndpoints::new(&[1.0], &[1.0, 2.0]).err(), Some(BridgeError::Dimension(1, 2)));
    }

    #[test]
    fn width_variance_substitution() {
        // σ₁² = 5.005, ε = 1: σ₁⁴ = 5.005², reference from 40-digit arithmetic.
        let naive = 1.0 + (libm::sqrt(5.005f64 * 5.005 + 4.0) - 5.005) / 2.0;
        assert!((width_variance(5.005, 1.0) - naive).abs() < 1e-14);
        assert!((width_variance(5.005, 1.0) - 1.192_403_755_238_765_5).abs() < 1e-14);
        assert!((width_variance(5.005, 1e-4) - 1e-8).abs() < 1e-16);
    }

    #[test]
    fn small_width_recovers_endpoints() {
        let x0 = vec![0.5, -0.5];
        let x1 = vec![2.0, 1.0];
        let ends = BridgeEndpoints::new(&x0, &x1).unwrap();
        let q = lemma_quantities(&ends, &gmax10().coeffs(0.4).unwrap(), 1e-6).unwrap();
        assert!(q.sigma2 < 1e-11);
        for (a, x) in q.a.iter().zip(&x0) {
            assert!((a - x).abs() < 1e-11);
        }
        for (b, x) in q.b.iter().zip(&x1) {
            assert!((b - x).abs() < 1e-11);
        }
        assert!(lemma_quantities(&ends, &gmax10().coeffs(0.4).unwrap(), 0.0).is_err());
    }
}
