//! Negative log-likelihood losses for the ID / DIA / FULL covariance assumptions
//! under Gaussian and Laplace predictive distributions, with analytic gradients
//! with respect to every decoder output.
//!
//! A sample is an `m × d` grid: `m` agents, `d` output coordinates (for a
//! trajectory, `d = 2·T` with column `c = 2t + axis`). Covariance couples agents
//! within a column; columns are independent.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CuError, Result};
use crate::prob::linalg::{lower_index, lower_len, PrecisionFactor};
use crate::prob::NoiseFamily;

/// The six loss families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossFamily {
    #[serde(rename = "id-l2")]
    IdL2,
    #[serde(rename = "id-l1")]
    IdL1,
    #[serde(rename = "gauss-dia")]
    GaussianDia,
    #[serde(rename = "gauss-full")]
    GaussianFull,
    #[serde(rename = "lap-dia")]
    LaplaceDia,
    #[serde(rename = "lap-full")]
    LaplaceFull,
}

impl LossFamily {
    pub const ALL: [LossFamily; 6] = [
        LossFamily::IdL2,
        LossFamily::IdL1,
        LossFamily::GaussianDia,
        LossFamily::GaussianFull,
        LossFamily::LaplaceDia,
        LossFamily::LaplaceFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossFamily::IdL2 => "id-l2",
            LossFamily::IdL1 => "id-l1",
            LossFamily::GaussianDia => "gauss-dia",
            LossFamily::GaussianFull => "gauss-full",
            LossFamily::LaplaceDia => "lap-dia",
            LossFamily::LaplaceFull => "lap-full",
        }
    }

    /// Whether a precision factor is predicted.
    pub fn has_factor(self) -> bool {
        !matches!(self, LossFamily::IdL2 | LossFamily::IdL1)
    }

    /// Whether the factor carries off-diagonal (collaborative) terms.
    pub fn is_full(self) -> bool {
        matches!(self, LossFamily::GaussianFull | LossFamily::LaplaceFull)
    }

    pub fn has_phi(self) -> bool {
        self == LossFamily::LaplaceFull
    }

    /// The noise family whose likelihood this loss is derived from.
    pub fn noise_family(self) -> NoiseFamily {
        match self {
            LossFamily::IdL2 | LossFamily::GaussianDia | LossFamily::GaussianFull => {
                NoiseFamily::Gaussian
            }
            LossFamily::IdL1 | LossFamily::LaplaceDia | LossFamily::LaplaceFull => {
                NoiseFamily::Laplace
            }
        }
    }

    /// DIA and FULL counterparts for a noise family.
    pub fn dia_full(family: NoiseFamily) -> (LossFamily, LossFamily) {
        match family {
            NoiseFamily::Gaussian => (LossFamily::GaussianDia, LossFamily::GaussianFull),
            NoiseFamily::Laplace => (LossFamily::LaplaceDia, LossFamily::LaplaceFull),
        }
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        LossFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                format!("unknown loss `{s}` (expected id-l2|id-l1|gauss-dia|gauss-full|lap-dia|lap-full)")
            })
    }
}

/// Row-major `agents × cols` grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentColumns {
    agents: usize,
    cols: usize,
    values: Vec<f64>,
}

impl AgentColumns {
    pub fn new(agents: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != agents * cols {
            return Err(CuError::DimensionMismatch {
                expected: agents * cols,
                actual: values.len(),
            });
        }
        Ok(Self { agents, cols, values })
    }

    pub fn zeros(agents: usize, cols: usize) -> Self {
        Self {
            agents,
            cols,
            values: vec![0.0; agents * cols],
        }
    }

    #[inline]
    pub fn agents(&self) -> usize {
        self.agents
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, agent: usize, col: usize) -> f64 {
        self.values[agent * self.cols + col]
    }

    #[inline]
    pub fn get_mut(&mut self, agent: usize, col: usize) -> &mut f64 {
        &mut self.values[agent * self.cols + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.agents).map(|i| self.get(i, col)).collect()
    }

    /// Rows reordered so that new agent `i` is old agent `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.agents, self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.values[i * self.cols..(i + 1) * self.cols]
                .copy_from_slice(&self.values[p * self.cols..(p + 1) * self.cols]);
        }
        out
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.agents != other.agents || self.cols != other.cols {
            return Err(CuError::DimensionMismatch {
                expected: self.values.len(),
                actual: other.values.len(),
            });
        }
        Ok(())
    }
}

/// Precision shared by all columns of a sample, or one factor per column.
#[derive(Debug, Clone, PartialEq)]
pub enum Precision {
    Shared(PrecisionFactor),
    PerColumn(Vec<PrecisionFactor>),
}

impl Precision {
    fn for_column(&self, col: usize) -> &PrecisionFactor {
        match self {
            Precision::Shared(f) => f,
            Precision::PerColumn(fs) => &fs[col],
        }
    }

    fn grad_slots(&self) -> usize {
        match self {
            Precision::Shared(_) => 1,
            Precision::PerColumn(fs) => fs.len(),
        }
    }

    fn validate(&self, agents: usize, cols: usize) -> Result<()> {
        let factors: &[PrecisionFactor] = match self {
            Precision::Shared(f) => std::slice::from_ref(f),
            Precision::PerColumn(fs) => {
                if fs.len() != cols {
                    return Err(CuError::DimensionMismatch {
                        expected: cols,
                        actual: fs.len(),
                    });
                }
                fs
            }
        };
        for f in factors {
            if f.dim() != agents {
                return Err(CuError::DimensionMismatch {
                    expected: agents,
                    actual: f.dim(),
                });
            }
        }
        Ok(())
    }
}

/// Decoder outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveParams {
    pub family: LossFamily,
    pub mu: AgentColumns,
    pub precision: Option<Precision>,
    pub phi: Option<f64>,
}

impl PredictiveParams {
    pub fn new(
        family: LossFamily,
        mu: AgentColumns,
        precision: Option<Precision>,
        phi: Option<f64>,
    ) -> Result<Self> {
        if precision.is_some() != family.has_factor() {
            return Err(CuError::InvalidParameter(format!(
                "{family}: precision factor must be {}",
                if family.has_factor() { "present" } else { "absent" }
            )));
        }
        if phi.is_some() != family.has_phi() {
            return Err(CuError::InvalidParameter(format!(
                "{family}: phi must be {}",
                if family.has_phi() { "present" } else { "absent" }
            )));
        }
        if let Some(p) = &precision {
            p.validate(mu.agents(), mu.cols())?;
        }
        Ok(Self {
            family,
            mu,
            precision,
            phi,
        })
    }
}

/// Gradient with respect to one precision factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrad {
    pub d_lower: Vec<f64>,
    pub d_log_diag: Vec<f64>,
}

impl FactorGrad {
    fn zeros(m: usize) -> Self {
        Self {
            d_lower: vec![0.0; lower_len(m)],
            d_log_diag: vec![0.0; m],
        }
    }
}

/// Loss value and its gradients; `d_factors` has one entry per factor in the input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub value: f64,
    pub d_mu: AgentColumns,
    pub d_factors: Vec<FactorGrad>,
    pub d_phi: Option<f64>,
}

impl LossGradients {
    pub fn scale(&mut self, s: f64) {
        self.value *= s;
        self.d_mu.values_mut().iter_mut().for_each(|v| *v *= s);
        for f in &mut self.d_factors {
            f.d_lower.iter_mut().chain(&mut f.d_log_diag).for_each(|v| *v *= s);
        }
        if let Some(p) = &mut self.d_phi {
            *p *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.d_mu.values().iter().all(|v| v.is_finite())
            && self
                .d_factors
                .iter()
                .all(|f| f.d_lower.iter().chain(&f.d_log_diag).all(|v| v.is_finite()))
            && self.d_phi.map_or(true, f64::is_finite)
    }
}

/// How per-column contributions are combined within one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnReduction {
    #[default]
    Mean,
    Sum,
}

impl ColumnReduction {
    pub fn factor(self, cols: usize) -> f64 {
        match self {
            ColumnReduction::Mean => 1.0 / cols as f64,
            ColumnReduction::Sum => 1.0,
        }
    }
}

fn check_family(params: &PredictiveParams, expected: LossFamily) -> Result<()> {
    if params.family != expected {
        return Err(CuError::FamilyMismatch {
            expected: expected.to_string(),
            actual: params.family.to_string(),
        });
    }
    Ok(())
}

fn precision_of(params: &PredictiveParams) -> Result<&Precision> {
    params
        .precision
        .as_ref()
        .ok_or_else(|| CuError::InvalidParameter(format!("{}: missing precision factor", params.family)))
}

/// Shared FULL kernel: per column, `u = Lᵀr`, `w = D·u`, `q = wᵀu`.
///
/// Accumulates `q_total`, `Σ log d` over columns, and `∂q/∂·` scaled by `weight`
/// into the output buffers. `∂q/∂μ = −2·L·w`, `∂q/∂L_ij = 2·w_j·r_i`, `∂q/∂log d_j = w_j·u_j`.
struct FullKernel {
    q_total: f64,
    log_det_total: f64,
}

fn full_kernel(
    y: &AgentColumns,
    mu: &AgentColumns,
    precision: &Precision,
    weight: f64,
    grads: &mut LossGradients,
) -> FullKernel {
    let m = mu.agents();
    let (mut r, mut u, mut w) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut out = FullKernel {
        q_total: 0.0,
        log_det_total: 0.0,
    };
    let shared = matches!(precision, Precision::Shared(_));
    for c in 0..mu.cols() {
        let f = precision.for_column(c);
        for i in 0..m {
            r[i] = y.get(i, c) - mu.get(i, c);
        }
        f.lt_mul(&r, &mut u);
        let ld = f.log_diag();
        for j in 0..m {
            w[j] = ld[j].exp() * u[j];
        }
        out.q_total += w.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
        out.log_det_total += f.log_det();

        for i in 0..m {
            let mut lw = w[i];
            for j in 0..i {
                lw += f.lower()[lower_index(i, j)] * w[j];
            }
            *grads.d_mu.get_mut(i, c) -= 2.0 * weight * lw;
        }
        let g = &mut grads.d_factors[if shared { 0 } else { c }];
        for i in 1..m {
            for j in 0..i {
                g.d_lower[lower_index(i, j)] += 2.0 * weight * w[j] * r[i];
            }
        }
        for j in 0..m {
            g.d_log_diag[j] += weight * w[j] * u[j];
        }
    }
    out
}

fn columns_per_slot(precision: &Precision, cols: usize) -> f64 {
    match precision {
        Precision::Shared(_) => cols as f64,
        Precision::PerColumn(_) => 1.0,
    }
}

fn empty_grads(params: &PredictiveParams, slots: usize) -> LossGradients {
    let m = params.mu.agents();
    LossGradients {
        value: 0.0,
        d_mu: AgentColumns::zeros(m, params.mu.cols()),
        d_factors: (0..slots).map(|_| FactorGrad::zeros(m)).collect(),
        d_phi: None,
    }
}

/// `½ Σ_c [q_c − Σ_j log d_jj]`.
pub fn loss_gaussian_full(y: &AgentColumns, params: &PredictiveParams) -> Result<LossGradients> {
    check_family(params, LossFamily::GaussianFull)?;
    y.check_same_shape(&params.mu)?;
    let precision = precision_of(params)?;
    let mut grads = empty_grads(params, precision.grad_slots());
    let k = full_kernel(y, &params.mu, precision, 0.5, &mut grads);
    grads.value = 0.5 * (k.q_total - k.log_det_total);
    let per_slot = columns_per_slot(precision, params.mu.cols());
    for g in &mut grads.d_factors {
        g.d_log_diag.iter_mut().for_each(|v| *v -= 0.5 * per_slot);
    }
    Ok(grads)
}

/// `½ Σ_c [q_c/Φ + m·log Φ − Σ_j log d_jj]`.
pub fn loss_laplace_full(y: &AgentColumns, params: &PredictiveParams) -> Result<LossGradients> {
    check_family(params, LossFamily::LaplaceFull)?;
    y.check_same_shape(&params.mu)?;
    let phi = params.phi.unwrap_or(f64::NAN);
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(CuError::NonPositivePhi(phi));
    }
    let precision = precision_of(params)?;
    let mut grads = empty_grads(params, precision.grad_slots());
    let k = full_kernel(y, &params.mu, precision, 0.5 / phi, &mut grads);
    let m = params.mu.agents() as f64;
    let cols = params.mu.cols() as f64;
    grads.value = 0.5 * (k.q_total / phi + m * cols * phi.ln() - k.log_det_total);
    let per_slot = columns_per_slot(precision, params.mu.cols());
    for g in &mut grads.d_factors {
        g.d_log_diag.iter_mut().for_each(|v| *v -= 0.5 * per_slot);
    }
    grads.d_phi = Some(0.5 * (-k.q_total / (phi * phi) + m * cols / phi));
    Ok(grads)
}

fn dia_log_diag(params: &PredictiveParams, col: usize) -> Result<&[f64]> {
    Ok(precision_of(params)?.for_column(col).log_diag())
}

/// `½ Σ_i [exp(s_i)·‖r_i‖² − s_i·d]` with `s_i = log σ_ii⁻²`; `L` is ignored (taken as `I`).
pub fn loss_gaussian_dia(y: &AgentColumns, params: &PredictiveParams) -> Result<LossGradients> {
    check_family(params, LossFamily::GaussianDia)?;
    y.check_same_shape(&params.mu)?;
    let precision = precision_of(params)?;
    let shared = matches!(precision, Precision::Shared(_));
    let mut grads = empty_grads(params, precision.grad_slots());
    let m = params.mu.agents();
    for c in 0..params.mu.cols() {
        let ld = dia_log_diag(params, c)?;
        let g = &mut grads.d_factors[if shared { 0 } else { c }];
        for i in 0..m {
            let prec = ld[i].exp();
            let r = y.get(i, c) - params.mu.get(i, c);
            grads.value += 0.5 * (prec * r * r - ld[i]);
            *grads.d_mu.get_mut(i, c) = -prec * r;
            g.d_log_diag[i] += 0.5 * (prec * r * r - 1.0);
        }
    }
    Ok(grads)
}

#[inline]
fn sign0(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σ_i [exp(s_i)·‖r_i‖₁ − s_i·d]` with `s_i = log σ_ii⁻²`; subgradient 0 at `r = 0`.
pub fn loss_laplace_dia(y: &AgentColumns, params: &PredictiveParams) -> Result<LossGradients> {
    check_family(params, LossFamily::LaplaceDia)?;
    y.check_same_shape(&params.mu)?;
    let precision = precision_of(params)?;
    let shared = matches!(precision, Precision::Shared(_));
    let mut grads = empty_grads(params, precision.grad_slots());
    let m = params.mu.agents();
    for c in 0..params.mu.cols() {
        let ld = dia_log_diag(params, c)?;
        let g = &mut grads.d_factors[if shared { 0 } else { c }];
        for i in 0..m {
            let prec = ld[i].exp();
            let r = y.get(i, c) - params.mu.get(i, c);
            grads.value += prec * r.abs() - ld[i];
            *grads.d_mu.get_mut(i, c) = -prec * sign0(r);
            g.d_log_diag[i] += prec * r.abs() - 1.0;
        }
    }
    Ok(grads)
}

/// `‖y − μ‖₂²`.
pub fn loss_id_l2(y: &AgentColumns, params: &PredictiveParams) -> Result<LossGradients> {
    check_family(params, LossFamily::IdL2)?;
    y.check_same_shape(&params.mu)?;
    let mut grads = empty_grads(params, 0);
    for ((d, &yv), &mv) in grads.d_mu.values_mut().iter_mut().zip(y.values()).zip(params.mu.values()) {
        let r = yv - mv;
        grads.value += r * r;
        *d = -2.0 * r;
    }
    Ok(grads)
}

/// `‖y − μ‖₁`, subgradient 0 at `r = 0`.
pub fn loss_id_l1(y: &AgentColumns, params: &PredictiveParams) -> Result<LossGradients> {
    check_family(params, LossFamily::IdL1)?;
    y.check_same_shape(&params.mu)?;
    let mut grads = empty_grads(params, 0);
    for ((d, &yv), &mv) in grads.d_mu.values_mut().iter_mut().zip(y.values()).zip(params.mu.values()) {
        let r = yv - mv;
        grads.value += r.abs();
        *d = -sign0(r);
    }
    Ok(grads)
}

/// Dispatches on `params.family`.
pub fn loss(y: &AgentColumns, params: &PredictiveParams) -> Result<LossGradients> {
    match params.family {
        LossFamily::IdL2 => loss_id_l2(y, params),
        LossFamily::IdL1 => loss_id_l1(y, params),
        LossFamily::GaussianDia => loss_gaussian_dia(y, params),
        LossFamily::GaussianFull => loss_gaussian_full(y, params),
        LossFamily::LaplaceDia => loss_laplace_dia(y, params),
        LossFamily::LaplaceFull => loss_laplace_full(y, params),
    }
}

/// Mean loss over a batch; per-sample gradients come back scaled by `1/N`.
///
/// Samples are evaluated in parallel and reduced in index order, so the result
/// does not depend on the thread count.
pub fn batch_loss(
    batch: &[(AgentColumns, PredictiveParams)],
    family: LossFamily,
) -> Result<(f64, Vec<LossGradients>)> {
    if batch.is_empty() {
        return Err(CuError::EmptyBatch);
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut grads = batch
        .par_iter()
        .map(|(y, p)| {
            check_family(p, family)?;
            loss(y, p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for g in &mut grads {
        total += g.value;
        g.scale(inv_n);
    }
    Ok((total * inv_n, grads))
}
