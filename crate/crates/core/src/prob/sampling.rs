//! Seeded sampling from the Gaussian and (scale-mixture) Laplace families.

use rand::Rng;
use rand_distr::{Exp, StandardNormal};

use super::linalg::{Cholesky, SquareMatrix};
use super::NoiseFamily;
use crate::error::{CuError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSample {
    pub values: Vec<f64>,
    pub source_family: NoiseFamily,
}

/// Zero-mean sampler with a cached Cholesky root.
///
/// Draw order per sample is part of the dataset format: for Laplace the
/// mixture variable `z` is drawn first, then `m` standard normals.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    family: NoiseFamily,
    root: Cholesky,
    exp: Option<Exp<f64>>,
    normals: Vec<f64>,
}

impl NoiseSampler {
    pub fn new(family: NoiseFamily, cov: &SquareMatrix, lambda: f64) -> Result<Self> {
        let root = Cholesky::factorize(cov)?;
        let exp = match family {
            NoiseFamily::Gaussian => None,
            NoiseFamily::Laplace => {
                if !(lambda > 0.0) || !lambda.is_finite() {
                    return Err(CuError::InvalidParameter(format!(
                        "lambda must be positive, got {lambda}"
                    )));
                }
                Some(Exp::new(1.0 / lambda).map_err(|e| CuError::InvalidParameter(e.to_string()))?)
            }
        };
        let normals = vec![0.0; root.dim()];
        Ok(Self {
            family,
            root,
            exp,
            normals,
        })
    }

    pub fn dim(&self) -> usize {
        self.root.dim()
    }

    pub fn family(&self) -> NoiseFamily {
        self.family
    }

    /// Writes one zero-mean draw into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut [f64]) {
        let scale = match &self.exp {
            Some(exp) => rng.sample(exp).sqrt(),
            None => 1.0,
        };
        for n in self.normals.iter_mut() {
            *n = rng.sample(StandardNormal);
        }
        self.root.mul_vec(&self.normals, out);
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
    }
}

fn sample_with<R: Rng + ?Sized>(
    family: NoiseFamily,
    mu: &[f64],
    cov: &SquareMatrix,
    lambda: f64,
    rng: &mut R,
) -> Result<MultivariateSample> {
    if mu.len() != cov.dim() {
        return Err(CuError::DimensionMismatch {
            expected: cov.dim(),
            actual: mu.len(),
        });
    }
    let mut sampler = NoiseSampler::new(family, cov, lambda)?;
    let mut values = vec![0.0; mu.len()];
    sampler.sample_into(rng, &mut values);
    for (v, m) in values.iter_mut().zip(mu) {
        *v += m;
    }
    Ok(MultivariateSample {
        values,
        source_family: family,
    })
}

/// `y = μ + C·n`, `C` the Cholesky root of `cov`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mu: &[f64],
    cov: &SquareMatrix,
    rng: &mut R,
) -> Result<MultivariateSample> {
    sample_with(NoiseFamily::Gaussian, mu, cov, 1.0, rng)
}

/// `y = μ + √z·C·n` with `z ~ Exp(mean λ)`.
pub fn sample_laplace<R: Rng + ?Sized>(
    mu: &[f64],
    cov: &SquareMatrix,
    lambda: f64,
    rng: &mut R,
) -> Result<MultivariateSample> {
    sample_with(NoiseFamily::Laplace, mu, cov, lambda, rng)
}
