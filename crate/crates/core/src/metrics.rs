//! Evaluation metrics and the split evaluator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CuError, Result};
use crate::losses::{AgentColumns, LossFamily, Precision, PredictiveParams};
use crate::model::Predictor;
use crate::prob::density::laplace_logpdf_from_radius;
use crate::prob::linalg::{assemble_precision, ldl_factorize, precision_to_covariance, Cholesky, PrecisionFactor, SquareMatrix};
use crate::prob::sampling::NoiseSampler;
use crate::prob::NoiseFamily;
use crate::synthgen::{Dataset, Instance, Split};

pub const DEFAULT_KL_SAMPLES: usize = 200_000;
pub const MIN_KL_SAMPLES: usize = 10_000;
const MC_CHUNK: usize = 8192;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(CuError::DimensionMismatch {
            expected: b.len(),
            actual: a.len(),
        });
    }
    Ok(())
}

fn point_distances<'a>(pred: &'a [f64], gt: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    pred.chunks_exact(2)
        .zip(gt.chunks_exact(2))
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
}

/// Mean Euclidean distance between predicted and true mean points; inputs `[agent][t][axis]`.
pub fn l2_of_mu(pred_mu: &[f64], gt_mu: &[f64]) -> Result<f64> {
    check_len(pred_mu, gt_mu)?;
    if pred_mu.is_empty() || pred_mu.len() % 2 != 0 {
        return Err(CuError::InvalidParameter("expected a nonempty list of 2-D points".into()));
    }
    Ok(point_distances(pred_mu, gt_mu).sum::<f64>() / (pred_mu.len() / 2) as f64)
}

/// Mean absolute entrywise difference.
pub fn l1_of_sigma(pred: &SquareMatrix, gt: &SquareMatrix) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(CuError::DimensionMismatch {
            expected: gt.dim(),
            actual: pred.dim(),
        });
    }
    let n = pred.entries().len() as f64;
    Ok(pred.entries().iter().zip(gt.entries()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Average displacement error over all points.
pub fn ade(pred: &[f64], gt: &[f64]) -> Result<f64> {
    l2_of_mu(pred, gt)
}

/// Mean over agents of the final-point distance; inputs `[agent][t][axis]` with `timesteps` steps.
pub fn fde(pred: &[f64], gt: &[f64], timesteps: usize) -> Result<f64> {
    check_len(pred, gt)?;
    let per_agent = 2 * timesteps;
    if timesteps == 0 || pred.is_empty() || pred.len() % per_agent != 0 {
        return Err(CuError::InvalidParameter(format!(
            "length {} is not a whole number of {timesteps}-step trajectories",
            pred.len()
        )));
    }
    let agents = pred.len() / per_agent;
    let sum: f64 = (0..agents)
        .map(|i| {
            let k = i * per_agent + per_agent - 2;
            (pred[k] - gt[k]).hypot(pred[k + 1] - gt[k + 1])
        })
        .sum();
    Ok(sum / agents as f64)
}

fn trace_of_product(a: &SquareMatrix, b: &SquareMatrix) -> f64 {
    let m = a.dim();
    (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| a.get(i, j) * b.get(j, i)).sum()
}

/// `KL(N(μ_g, Σ_g) ‖ N(μ_e, Σ_e))` in closed form.
pub fn kl_gaussian(mu_g: &[f64], sigma_g: &SquareMatrix, mu_e: &[f64], sigma_e: &SquareMatrix) -> Result<f64> {
    check_len(mu_g, mu_e)?;
    sigma_g.check_dim(mu_g.len())?;
    sigma_e.check_dim(mu_g.len())?;
    let diff: Vec<f64> = mu_g.iter().zip(mu_e).map(|(a, b)| a - b).collect();
    let mut second = SquareMatrix::zeros(diff.len());
    for i in 0..diff.len() {
        for j in 0..diff.len() {
            second.set(i, j, diff[i] * diff[j]);
        }
    }
    kl_gaussian_mean_offset(sigma_g, sigma_e, &second)
}

/// KL between zero-mean-offset Gaussians averaged over mean offsets `δ = μ_g − μ_e`,
/// given `E[δδᵀ]`.
pub fn kl_gaussian_mean_offset(sigma_g: &SquareMatrix, sigma_e: &SquareMatrix, offset_second_moment: &SquareMatrix) -> Result<f64> {
    let k = sigma_g.dim();
    sigma_e.check_dim(k)?;
    offset_second_moment.check_dim(k)?;
    let chol_g = Cholesky::factorize(sigma_g)?;
    let chol_e = Cholesky::factorize(sigma_e)?;
    let inv_e = chol_e.inverse();
    let kl = 0.5
        * (chol_e.log_det() - chol_g.log_det() - k as f64
            + trace_of_product(&inv_e, sigma_g)
            + trace_of_product(&inv_e, offset_second_moment));
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte-Carlo `KL(p_g ‖ p_e)` for Laplace distributions sharing `λ`.
pub fn kl_laplace_mc(
    mu_g: &[f64],
    sigma_g: &SquareMatrix,
    mu_e: &[f64],
    sigma_e: &SquareMatrix,
    lambda: f64,
    n_samples: usize,
    seed: u64,
) -> Result<KlEstimate> {
    check_len(mu_g, mu_e)?;
    if n_samples < MIN_KL_SAMPLES {
        return Err(CuError::InvalidParameter(format!(
            "Laplace KL needs at least {MIN_KL_SAMPLES} samples, got {n_samples}"
        )));
    }
    let offset: Vec<f64> = mu_g.iter().zip(mu_e).map(|(a, b)| a - b).collect();
    kl_laplace_mc_offsets(sigma_g, sigma_e, lambda, &offset, n_samples, seed)
}

/// Monte-Carlo Laplace KL averaged over a list of mean offsets `μ_g − μ_e`
/// (row-major, `m` per offset); sample `k` uses offset `⌊k·n_off/n⌋`.
///
/// Samples are drawn in fixed chunks, each from its own ChaCha stream, so
/// the estimate does not depend on the thread count.
pub fn kl_laplace_mc_offsets(
    sigma_g: &SquareMatrix,
    sigma_e: &SquareMatrix,
    lambda: f64,
    offsets: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<KlEstimate> {
    let m = sigma_g.dim();
    sigma_e.check_dim(m)?;
    if m % 2 == 0 {
        return Err(CuError::UnsupportedOrder { dim: m });
    }
    if offsets.is_empty() || offsets.len() % m != 0 {
        return Err(CuError::DimensionMismatch {
            expected: m,
            actual: offsets.len(),
        });
    }
    if n_samples < 2 {
        return Err(CuError::InvalidParameter("need at least two samples".into()));
    }
    let n_off = offsets.len() / m;
    let chol_g = Cholesky::factorize(sigma_g)?;
    let chol_e = Cholesky::factorize(sigma_e)?;
    let (ld_g, ld_e) = (chol_g.log_det(), chol_e.log_det());
    let sampler = NoiseSampler::new(NoiseFamily::Laplace, sigma_g, lambda)?;
    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let values: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64 + 1);
            let mut sampler = sampler.clone();
            let (mut e, mut shifted) = (vec![0.0; m], vec![0.0; m]);
            let end = ((c + 1) * MC_CHUNK).min(n_samples);
            (c * MC_CHUNK..end)
                .map(|k| {
                    sampler.sample_into(&mut rng, &mut e);
                    let off = (k as u128 * n_off as u128 / n_samples as u128) as usize;
                    for i in 0..m {
                        shifted[i] = e[i] + offsets[off * m + i];
                    }
                    let lp_g = laplace_logpdf_from_radius(chol_g.mahalanobis(&e), ld_g, m, lambda)?;
                    let lp_e = laplace_logpdf_from_radius(chol_e.mahalanobis(&shifted), ld_e, m, lambda)?;
                    Ok(lp_g - lp_e)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let n = n_samples as f64;
    let mean = values.iter().flatten().sum::<f64>() / n;
    let var = values.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(KlEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
        samples: n_samples,
    })
}

/// How the single evaluation covariance is formed from per-sample predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaAveraging {
    /// Average precisions, then invert.
    #[default]
    Precision,
    /// Average per-sample covariances.
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub kl_samples: usize,
    pub seed: u64,
    pub sigma_averaging: SigmaAveraging,
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            kl_samples: DEFAULT_KL_SAMPLES,
            seed: 0,
            sigma_averaging: SigmaAveraging::Precision,
            batch: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub loss_family: LossFamily,
    pub noise_family: NoiseFamily,
    pub split: Split,
    pub l2_mu: f64,
    pub l1_sigma: f64,
    pub kl: f64,
    /// Standard error of the Monte-Carlo KL (Laplace data only).
    pub mc_std_error: Option<f64>,
    pub ade: f64,
    pub fde: f64,
    pub instances: usize,
    pub points: usize,
    pub kl_samples: usize,
    /// Row-major estimated covariance.
    pub sigma_est: Vec<f64>,
    pub sigma_gt: Vec<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "loss,l2_mu,l1_sigma,kl,ade,fde";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.loss_family, self.l2_mu, self.l1_sigma, self.kl, self.ade, self.fde
        )
    }
}

/// Running sum of the model's predicted data covariance.
enum SigmaAccumulator {
    Identity,
    Matrix(SquareMatrix),
    /// Laplace DIA scales `b = exp(−s)` per agent (or `2b²` when averaging covariances).
    Scales(Vec<f64>),
}

struct Accumulators {
    m: usize,
    mode: SigmaAveraging,
    sigma: SigmaAccumulator,
    weight: f64,
    dist_mu: f64,
    dist_x: f64,
    final_x: f64,
    points: usize,
    finals: usize,
    second: SquareMatrix,
    columns: usize,
    offsets: Vec<f64>,
    keep_offsets: bool,
}

impl Accumulators {
    fn new(m: usize, family: LossFamily, mode: SigmaAveraging, keep_offsets: bool) -> Self {
        let sigma = match family {
            LossFamily::IdL1 | LossFamily::IdL2 => SigmaAccumulator::Identity,
            LossFamily::LaplaceDia => SigmaAccumulator::Scales(vec![0.0; m]),
            _ => SigmaAccumulator::Matrix(SquareMatrix::zeros(m)),
        };
        Self {
            m,
            mode,
            sigma,
            weight: 0.0,
            dist_mu: 0.0,
            dist_x: 0.0,
            final_x: 0.0,
            points: 0,
            finals: 0,
            second: SquareMatrix::zeros(m),
            columns: 0,
            offsets: Vec::new(),
            keep_offsets,
        }
    }

    fn add_factor(&mut self, f: &PrecisionFactor, phi: Option<f64>, w: f64) -> Result<()> {
        let phi = phi.unwrap_or(1.0);
        match &mut self.sigma {
            SigmaAccumulator::Identity => {}
            SigmaAccumulator::Scales(acc) => {
                for (a, s) in acc.iter_mut().zip(f.log_diag()) {
                    let b = (-s).exp();
                    *a += w * match self.mode {
                        SigmaAveraging::Precision => b,
                        SigmaAveraging::Covariance => 2.0 * b * b,
                    };
                }
            }
            SigmaAccumulator::Matrix(acc) => {
                let contrib = match self.mode {
                    SigmaAveraging::Precision => assemble_precision(f).scaled(w / phi),
                    SigmaAveraging::Covariance => precision_to_covariance(f)?.scaled(w * phi),
                };
                acc.add_assign(&contrib)?;
            }
        }
        Ok(())
    }

    fn add(&mut self, inst: &Instance, p: &PredictiveParams) -> Result<()> {
        let (m, t_len) = (inst.x.agents, inst.x.timesteps);
        let mu = p.mu.values();
        if m != self.m || p.mu.agents() != m || p.mu.cols() != 2 * t_len {
            return Err(CuError::DimensionMismatch {
                expected: m * 2 * t_len,
                actual: mu.len(),
            });
        }
        self.dist_mu += point_distances(mu, &inst.mu_gt.coords).sum::<f64>();
        self.dist_x += point_distances(mu, &inst.x.coords).sum::<f64>();
        for i in 0..m {
            let k = inst.x.index(i, t_len - 1, 0);
            self.final_x += (mu[k] - inst.x.coords[k]).hypot(mu[k + 1] - inst.x.coords[k + 1]);
        }
        self.points += m * t_len;
        self.finals += m;

        let cols = 2 * t_len;
        let mut d = vec![0.0; m];
        for c in 0..cols {
            for (i, di) in d.iter_mut().enumerate() {
                *di = inst.mu_gt.coords[i * cols + c] - mu[i * cols + c];
            }
            for i in 0..m {
                for j in 0..m {
                    let v = self.second.get(i, j) + d[i] * d[j];
                    self.second.set(i, j, v);
                }
            }
            if self.keep_offsets {
                self.offsets.extend_from_slice(&d);
            }
        }
        self.columns += cols;

        match &p.precision {
            None => {}
            Some(Precision::Shared(f)) => self.add_factor(f, p.phi, 1.0)?,
            Some(Precision::PerColumn(fs)) => {
                let w = 1.0 / fs.len() as f64;
                for f in fs {
                    self.add_factor(f, p.phi, w)?;
                }
            }
        }
        self.weight += 1.0;
        Ok(())
    }

    /// Predicted data covariance averaged over the split.
    fn data_covariance(&self) -> Result<SquareMatrix> {
        let n = self.weight;
        Ok(match (&self.sigma, self.mode) {
            (SigmaAccumulator::Identity, _) => SquareMatrix::identity(self.m),
            (SigmaAccumulator::Scales(acc), SigmaAveraging::Precision) => {
                SquareMatrix::from_diag(&acc.iter().map(|b| 2.0 * (b / n).powi(2)).collect::<Vec<_>>())
            }
            (SigmaAccumulator::Scales(acc), SigmaAveraging::Covariance) => {
                SquareMatrix::from_diag(&acc.iter().map(|v| v / n).collect::<Vec<_>>())
            }
            (SigmaAccumulator::Matrix(acc), SigmaAveraging::Precision) => {
                precision_to_covariance(&ldl_factorize(&acc.scaled(1.0 / n))?)?
            }
            (SigmaAccumulator::Matrix(acc), SigmaAveraging::Covariance) => acc.scaled(1.0 / n),
        })
    }
}

/// Scores `predictor` on one split against the dataset's ground truth.
///
/// The evaluation `Σ` is the predicted data covariance, divided by `λ` on
/// Laplace data so that it is comparable with the manifest's `Σ_gt`. Models
/// without a covariance head are scored with `Σ = I`.
pub fn evaluate_split<P: Predictor + ?Sized>(
    predictor: &P,
    dataset: &Dataset,
    split: Split,
    options: &EvalOptions,
) -> Result<MetricReport> {
    let manifest = &dataset.manifest;
    let noise = manifest.family;
    let family = predictor.family();
    let sigma_gt = manifest.sigma_gt_matrix()?;
    let m = manifest.agents;
    if noise == NoiseFamily::Laplace && m % 2 == 0 {
        return Err(CuError::UnsupportedOrder { dim: m });
    }
    let mut acc = Accumulators::new(m, family, options.sigma_averaging, noise == NoiseFamily::Laplace);
    let mut chunk = Vec::with_capacity(options.batch.max(1));
    let mut reader = dataset.reader(split)?;
    loop {
        chunk.clear();
        for inst in reader.by_ref().take(options.batch.max(1)) {
            chunk.push(inst?);
        }
        if chunk.is_empty() {
            break;
        }
        let preds = predictor.predict(&chunk)?;
        if preds.len() != chunk.len() {
            return Err(CuError::DimensionMismatch {
                expected: chunk.len(),
                actual: preds.len(),
            });
        }
        for (inst, p) in chunk.iter().zip(&preds) {
            acc.add(inst, p)?;
        }
    }
    if acc.weight == 0.0 {
        return Err(CuError::EmptyBatch);
    }
    let mut sigma_est = acc.data_covariance()?;
    if noise == NoiseFamily::Laplace && family.has_factor() {
        sigma_est = sigma_est.scaled(1.0 / manifest.lambda);
    }
    let (kl, mc_std_error, kl_samples) = match noise {
        NoiseFamily::Gaussian => {
            let second = acc.second.scaled(1.0 / acc.columns as f64);
            (kl_gaussian_mean_offset(&sigma_gt, &sigma_est, &second)?, None, 0)
        }
        NoiseFamily::Laplace => {
            let est = kl_laplace_mc_offsets(&sigma_gt, &sigma_est, manifest.lambda, &acc.offsets, options.kl_samples, options.seed)?;
            (est.estimate, Some(est.std_error), est.samples)
        }
    };
    Ok(MetricReport {
        loss_family: family,
        noise_family: noise,
        split,
        l2_mu: acc.dist_mu / acc.points as f64,
        l1_sigma: l1_of_sigma(&sigma_est, &sigma_gt)?,
        kl,
        mc_std_error,
        ade: acc.dist_x / acc.points as f64,
        fde: acc.final_x / acc.finals as f64,
        instances: acc.weight as usize,
        points: acc.points,
        kl_samples,
        sigma_est: sigma_est.into_entries(),
        sigma_gt: sigma_gt.into_entries(),
    })
}

/// Predicted data covariance of one sample (first column's factor); `None` without a covariance head.
pub fn predicted_covariance(p: &PredictiveParams) -> Result<Option<SquareMatrix>> {
    let f = match &p.precision {
        None => return Ok(None),
        Some(Precision::Shared(f)) => f,
        Some(Precision::PerColumn(fs)) => &fs[0],
    };
    Ok(Some(match p.family {
        LossFamily::LaplaceDia => {
            SquareMatrix::from_diag(&f.log_diag().iter().map(|s| 2.0 * (-2.0 * s).exp()).collect::<Vec<_>>())
        }
        _ => precision_to_covariance(f)?.scaled(p.phi.unwrap_or(1.0)),
    }))
}

/// Predicts the true mean and the exact ground-truth covariance: the best any model can score.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    family: LossFamily,
    factor: PrecisionFactor,
}

impl OraclePredictor {
    pub fn new(noise: NoiseFamily, sigma_gt: &SquareMatrix, lambda: f64) -> Result<Self> {
        let (family, cov) = match noise {
            NoiseFamily::Gaussian => (LossFamily::GaussianFull, sigma_gt.clone()),
            NoiseFamily::Laplace => (LossFamily::LaplaceFull, sigma_gt.scaled(lambda)),
        };
        let factor = ldl_factorize(&Cholesky::factorize(&cov)?.inverse())?;
        Ok(Self { family, factor })
    }

    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let m = &dataset.manifest;
        Self::new(m.family, &m.sigma_gt_matrix()?, m.lambda)
    }
}

impl Predictor for OraclePredictor {
    fn family(&self) -> LossFamily {
        self.family
    }

    fn predict(&self, batch: &[Instance]) -> Result<Vec<PredictiveParams>> {
        batch
            .iter()
            .map(|inst| {
                let mu = AgentColumns::new(inst.mu_gt.agents, 2 * inst.mu_gt.timesteps, inst.mu_gt.coords.clone())?;
                let phi = self.family.has_phi().then_some(1.0);
                PredictiveParams::new(self.family, mu, Some(Precision::Shared(self.factor.clone())), phi)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_and_ade_examples() {
        let gt = vec![0.0; 12];
        assert_eq!(l2_of_mu(&gt, &gt).unwrap(), 0.0);
        let off: Vec<f64> = (0..12).map(|k| if k % 2 == 0 { 3.0 } else { 4.0 }).collect();
        assert_eq!(l2_of_mu(&off, &gt).unwrap(), 5.0);
        assert_eq!(ade(&off, &gt).unwrap(), 5.0);
        assert_eq!(fde(&off, &gt, 3).unwrap(), 5.0);
        assert!(l2_of_mu(&off[..10], &gt).is_err());
    }

    #[test]
    fn final_step_offset_only() {
        let t = 4;
        let gt = vec![0.0; 2 * t];
        let mut pred = gt.clone();
        pred[2 * t - 1] = 2.0;
        assert!((ade(&pred, &gt).unwrap() - 2.0 / t as f64).abs() < 1e-15);
        assert_eq!(fde(&pred, &gt, t).unwrap(), 2.0);
    }

    #[test]
    fn l1_sigma_examples() {
        let a = SquareMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(l1_of_sigma(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        for i in 0..2 {
            for j in 0..2 {
                b.set(i, j, a.get(i, j) + 1.0);
            }
        }
        assert_eq!(l1_of_sigma(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn kl_gaussian_examples() {
        let one = SquareMatrix::identity(1);
        let two = SquareMatrix::from_diag(&[2.0]);
        assert_eq!(kl_gaussian(&[0.0], &one, &[0.0], &one).unwrap(), 0.0);
        let expected = 0.5 * (2f64.ln() - 1.0 + 0.5);
        assert!((kl_gaussian(&[0.0], &one, &[0.0], &two).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.09657).abs() < 1e-5);
    }

    #[test]
    fn kl_laplace_rejects_even_and_small() {
        let i2 = SquareMatrix::identity(2);
        assert!(matches!(
            kl_laplace_mc(&[0.0; 2], &i2, &[0.0; 2], &i2, 1.0, 20_000, 0),
            Err(CuError::UnsupportedOrder { .. })
        ));
        let i3 = SquareMatrix::identity(3);
        assert!(kl_laplace_mc(&[0.0; 3], &i3, &[0.0; 3], &i3, 1.0, 100, 0).is_err());
    }

    #[test]
    fn kl_laplace_identical_is_exactly_zero() {
        let s = SquareMatrix::from_rows(&[vec![2.0, 0.5, 0.1], vec![0.5, 1.0, 0.2], vec![0.1, 0.2, 1.5]]).unwrap();
        let est = kl_laplace_mc(&[1.0; 3], &s, &[1.0; 3], &s, 1.0, 20_000, 3).unwrap();
        assert_eq!(est.estimate, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn report_csv() {
        let r = MetricReport {
            loss_family: LossFamily::GaussianFull,
            noise_family: NoiseFamily::Gaussian,
            split: Split::Test,
            l2_mu: 0.5,
            l1_sigma: 0.25,
            kl: 0.125,
            mc_std_error: None,
            ade: 1.0,
            fde: 2.0,
            instances: 1,
            points: 150,
            kl_samples: 0,
            sigma_est: vec![],
            sigma_gt: vec![],
        };
        assert_eq!(r.csv_row(), "gauss-full,0.500000,0.250000,0.125000,1.000000,2.000000");
    }
}
