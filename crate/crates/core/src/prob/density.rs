//! Log-densities of the multivariate Gaussian and Laplace families.

use std::f64::consts::PI;

use super::linalg::{Cholesky, PrecisionFactor, SquareMatrix};
use crate::error::{CuError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn residual(y: &[f64], mu: &[f64], m: usize) -> Result<Vec<f64>> {
    for len in [y.len(), mu.len()] {
        if len != m {
            return Err(CuError::DimensionMismatch {
                expected: m,
                actual: len,
            });
        }
    }
    Ok(y.iter().zip(mu).map(|(a, b)| a - b).collect())
}

/// `q = (y−μ)ᵀ Λ (y−μ) = Σ_j d_j ((Lᵀ(y−μ))_j)²`.
pub fn quadratic_form(y: &[f64], mu: &[f64], factor: &PrecisionFactor) -> Result<f64> {
    let r = residual(y, mu, factor.dim())?;
    let mut u = vec![0.0; r.len()];
    factor.lt_mul(&r, &mut u);
    Ok(u.iter()
        .zip(factor.log_diag())
        .map(|(u, ld)| ld.exp() * u * u)
        .sum())
}

/// Multivariate Gaussian log-density with precision `Λ = L·D·Lᵀ`.
pub fn gaussian_logpdf(y: &[f64], mu: &[f64], factor: &PrecisionFactor) -> Result<f64> {
    let q = quadratic_form(y, mu, factor)?;
    let m = factor.dim() as f64;
    Ok(-0.5 * m * LN_2PI + 0.5 * factor.log_det() - 0.5 * q)
}

/// Gaussian log-density with covariance scaled by the mixture variable `phi`.
pub fn laplace_logpdf_mixture(
    y: &[f64],
    mu: &[f64],
    factor: &PrecisionFactor,
    phi: f64,
) -> Result<f64> {
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(CuError::NonPositivePhi(phi));
    }
    let q = quadratic_form(y, mu, factor)?;
    let m = factor.dim() as f64;
    Ok(0.5 * factor.log_det() - 0.5 * m * (2.0 * PI * phi).ln() - q / (2.0 * phi))
}

/// The mixture scale that maximizes `z ↦ z^{-m/2} exp(-q / 2z)`, namely `q / m`.
pub fn optimal_z(q: f64, m: usize) -> Result<f64> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(CuError::NonPositiveQ(q));
    }
    if m == 0 {
        return Err(CuError::InvalidParameter("dimension must be positive".into()));
    }
    Ok(q / m as f64)
}

/// `log f(z)` for `f(z) = z^{-m/2} exp(-q / 2z)`, the conditional likelihood profile in `z`.
pub fn log_mixture_profile(z: f64, q: f64, m: usize) -> f64 {
    -0.5 * m as f64 * z.ln() - q / (2.0 * z)
}

/// `log K_ν(x)` for half-integer order `ν = twice_order / 2`, `twice_order` odd.
///
/// Runs the upward recurrence `K_{ν+1} = K_{ν−1} + (2ν/x)·K_ν` from the closed
/// form `K_{±1/2}(x) = √(π/2x)·e^{−x}`, on `e^x`-scaled values with renormalization.
pub fn log_bessel_k_half_integer(twice_order: i64, x: f64) -> f64 {
    debug_assert!(twice_order % 2 != 0 && x > 0.0);
    let target = twice_order.unsigned_abs();
    let k_half = (PI / (2.0 * x)).sqrt();
    if target == 1 {
        return k_half.ln() - x;
    }
    // prev = k_{ν-1}, cur = k_ν, starting at ν = 1/2
    let (mut prev, mut cur) = (k_half, k_half);
    let mut log_offset = 0.0;
    let mut twice_nu = 1u64;
    while twice_nu < target {
        let next = prev + (twice_nu as f64 / x) * cur;
        prev = cur;
        cur = next;
        twice_nu += 2;
        if cur > 1e250 {
            prev /= 1e250;
            cur /= 1e250;
            log_offset += 250.0 * std::f64::consts::LN_10;
        }
    }
    cur.ln() + log_offset - x
}

/// Laplace log-density from the Mahalanobis radius `q = (y−μ)ᵀΣ⁻¹(y−μ)` and `log det Σ`.
///
/// `log p = log 2 − (m/2)·log 2π − log λ − ½·log|Σ| + log K_{m/2−1}(√(2q/λ)) − (m/2 − 1)·log √(λq/2)`,
/// the marginal of `y | z ~ N(μ, zΣ)` with `z ~ Exp(mean λ)`.
pub fn laplace_logpdf_from_radius(q: f64, log_det_cov: f64, m: usize, lambda: f64) -> Result<f64> {
    if m % 2 == 0 {
        return Err(CuError::UnsupportedOrder { dim: m });
    }
    if !(lambda > 0.0) {
        return Err(CuError::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let mf = m as f64;
    let base = 2f64.ln() - 0.5 * mf * LN_2PI - lambda.ln() - 0.5 * log_det_cov;
    if q <= 0.0 {
        if m == 1 {
            // finite limit of K_{1/2}(x)·(λq/2)^{1/4} as q → 0
            return Ok(base + 0.5 * (PI * lambda / 4.0).ln());
        }
        return Err(CuError::DegenerateRadius { dim: m });
    }
    let x = (2.0 * q / lambda).sqrt();
    let log_k = log_bessel_k_half_integer(m as i64 - 2, x);
    Ok(base + log_k - (0.5 * mf - 1.0) * (0.5 * (lambda * q / 2.0).ln()))
}

/// Exact multivariate Laplace log-density (odd dimensions only).
pub fn laplace_logpdf_exact(y: &[f64], mu: &[f64], cov: &SquareMatrix, lambda: f64) -> Result<f64> {
    let m = cov.dim();
    let r = residual(y, mu, m)?;
    if m % 2 == 0 {
        return Err(CuError::UnsupportedOrder { dim: m });
    }
    let chol = Cholesky::factorize(cov)?;
    laplace_logpdf_from_radius(chol.mahalanobis(&r), chol.log_det(), m, lambda)
}
