//! Probability primitives: LDLᵀ precision factors, densities and samplers.

pub mod density;
pub mod linalg;
pub mod sampling;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use density::{
    gaussian_logpdf, laplace_logpdf_exact, laplace_logpdf_from_radius, laplace_logpdf_mixture,
    log_bessel_k_half_integer, log_mixture_profile, optimal_z, quadratic_form,
};
pub use linalg::{
    assemble_precision, ldl_factorize, precision_to_covariance, Cholesky, PrecisionFactor,
    SquareMatrix,
};
pub use sampling::{sample_gaussian, sample_laplace, MultivariateSample, NoiseSampler};

/// Distribution family of generated noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    Laplace,
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Laplace => "laplace",
        })
    }
}

impl FromStr for NoiseFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(NoiseFamily::Gaussian),
            "laplace" => Ok(NoiseFamily::Laplace),
            other => Err(format!("unknown family `{other}` (expected gaussian|laplace)")),
        }
    }
}
