//! Encoder/decoder MLPs with a hand-written reverse pass.
//!
//! All parameters live in one flat vector; each layer is a view `(offset, in, out)`
//! with a row-major `out × in` weight followed by the bias.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CuError, Result};
use crate::losses::{AgentColumns, LossFamily, LossGradients, Precision, PredictiveParams};
use crate::prob::linalg::{lower_len, PrecisionFactor};
use crate::synthgen::Instance;

/// Range of the smooth clamp applied to log-diagonal and log-phi outputs.
pub const LOG_CLAMP: f64 = 10.0;
pub const MLP_DEPTH: usize = 4;
const CHECKPOINT_MAGIC: &str = "cu-checkpoint 1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub family: LossFamily,
    pub agents: usize,
    /// Output columns per agent (`2·T`).
    pub cols: usize,
    pub hidden: usize,
    /// Inputs are multiplied by this before the encoder.
    pub input_scale: f64,
    /// Raw mean outputs are multiplied by this.
    pub output_scale: f64,
}

impl NetworkConfig {
    pub fn toy(family: LossFamily) -> Self {
        Self {
            family,
            agents: 3,
            cols: 100,
            hidden: 128,
            input_scale: 0.1,
            output_scale: 10.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.agents * self.cols
    }

    pub fn prec_dim(&self) -> usize {
        lower_len(self.agents) + self.agents
    }

    fn validate(&self) -> Result<()> {
        if self.agents == 0 || self.cols == 0 || self.hidden == 0 {
            return Err(CuError::InvalidParameter(format!("network dims must be positive: {self:?}")));
        }
        if !(self.input_scale.is_finite() && self.output_scale.is_finite()) {
            return Err(CuError::InvalidParameter("network scales must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub offset: usize,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.input * self.output
    }

    fn len(&self) -> usize {
        self.weight_len() + self.output
    }

    fn weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.weight_len()]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset + self.weight_len()..self.offset + self.len()]
    }
}

/// Layout of one four-layer MLP: ReLU between layers, identity after the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpParams {
    pub layers: Vec<LayerShape>,
}

impl MlpParams {
    fn new(dims: &[usize], offset: &mut usize) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let l = LayerShape {
                    input: w[0],
                    output: w[1],
                    offset: *offset,
                };
                *offset += l.len();
                l
            })
            .collect();
        Self { layers }
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    fn forward(&self, params: &[f64], x: Vec<f64>, batch: usize) -> (Vec<f64>, MlpTape) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut margin = f64::INFINITY;
        let mut cur = x;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(batch * l.output);
            let bias = l.bias(params);
            for _ in 0..batch {
                z.extend_from_slice(bias);
            }
            // Z = X·Wᵀ + b
            gemm(batch, l.input, l.output, &cur, (l.input, 1), l.weight(params), (1, l.input), 1.0, &mut z);
            if k + 1 < self.layers.len() {
                margin = z.iter().fold(margin, |a, v| a.min(v.abs()));
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(cur);
            cur = z;
        }
        (cur, MlpTape { inputs, margin })
    }

    /// Accumulates parameter gradients into `grad`; returns `∂/∂input`.
    fn backward(&self, params: &[f64], tape: &MlpTape, d_out: Vec<f64>, batch: usize, grad: &mut [f64]) -> Vec<f64> {
        let mut dz = d_out;
        for (k, l) in self.layers.iter().enumerate().rev() {
            let x = &tape.inputs[k];
            let (gw, gb) = grad[l.offset..l.offset + l.len()].split_at_mut(l.weight_len());
            // dW += dZᵀ·X
            gemm(l.output, batch, l.input, &dz, (1, l.output), x, (l.input, 1), 1.0, gw);
            for row in dz.chunks_exact(l.output) {
                gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
            let mut dx = vec![0.0; batch * l.input];
            gemm(batch, l.output, l.input, &dz, (l.output, 1), l.weight(params), (l.input, 1), 0.0, &mut dx);
            if k > 0 {
                // layer input is a ReLU output: zero where the unit was inactive
                dx.iter_mut().zip(x).for_each(|(d, a)| {
                    if *a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            dz = dx;
        }
        dz
    }
}

/// `C = A·B + beta·C`, `A` is `m × k`, `B` is `k × n`, `C` row-major `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index (i·rs + j·cs) touched is below the asserted lengths for i < rows, j < cols.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
struct MlpTape {
    inputs: Vec<Vec<f64>>,
    /// Smallest `|z|` over the ReLU pre-activations.
    margin: f64,
}

/// Everything the reverse pass needs from one batched forward.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    batch: usize,
    param_len: usize,
    family: LossFamily,
    encoder: MlpTape,
    enc_out: Vec<f64>,
    mu: MlpTape,
    prec: Option<(MlpTape, Vec<f64>)>,
    phi: Option<(MlpTape, Vec<f64>)>,
}

impl ForwardTape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Distance of the nearest ReLU pre-activation from its kink at 0.
    pub fn relu_margin(&self) -> f64 {
        let mut m = self.enc_out.iter().fold(self.encoder.margin.min(self.mu.margin), |a, v| a.min(v.abs()));
        for (t, _) in self.prec.iter().chain(&self.phi) {
            m = m.min(t.margin);
        }
        m
    }
}

#[inline]
fn smooth_clamp(raw: f64) -> f64 {
    LOG_CLAMP * (raw / LOG_CLAMP).tanh()
}

#[inline]
fn smooth_clamp_grad(raw: f64) -> f64 {
    let t = (raw / LOG_CLAMP).tanh();
    1.0 - t * t
}

/// Encoder with mean, precision and phi decoders; the encoder output passes a ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct CuNetwork {
    config: NetworkConfig,
    seed: u64,
    params: Vec<f64>,
    encoder: MlpParams,
    dec_mu: MlpParams,
    dec_prec: Option<MlpParams>,
    dec_phi: Option<MlpParams>,
}

impl CuNetwork {
    /// Zero-initialized network.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut offset = 0;
        let encoder = MlpParams::new(&[config.input_dim(), h, h, h, h], &mut offset);
        let dec_mu = MlpParams::new(&[h, h, h, h, config.input_dim()], &mut offset);
        let dec_prec = config
            .family
            .has_factor()
            .then(|| MlpParams::new(&[h, h, h, h, config.prec_dim()], &mut offset));
        let dec_phi = config.family.has_phi().then(|| MlpParams::new(&[h, h, h, h, 1], &mut offset));
        Ok(Self {
            config,
            seed: 0,
            params: vec![0.0; offset],
            encoder,
            dec_mu,
            dec_prec,
            dec_phi,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        net.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<LayerShape> = net.mlps().flat_map(|m| m.layers.clone()).collect();
        for l in layers {
            let a = (6.0 / (l.input + l.output) as f64).sqrt();
            for w in &mut net.params[l.offset..l.offset + l.weight_len()] {
                *w = rng.random_range(-a..a);
            }
        }
        Ok(net)
    }

    fn mlps(&self) -> impl Iterator<Item = &MlpParams> {
        [Some(&self.encoder), Some(&self.dec_mu), self.dec_prec.as_ref(), self.dec_phi.as_ref()]
            .into_iter()
            .flatten()
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn family(&self) -> LossFamily {
        self.config.family
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn encoder(&self) -> &MlpParams {
        &self.encoder
    }

    pub fn dec_mu(&self) -> &MlpParams {
        &self.dec_mu
    }

    pub fn dec_prec(&self) -> Option<&MlpParams> {
        self.dec_prec.as_ref()
    }

    pub fn dec_phi(&self) -> Option<&MlpParams> {
        self.dec_phi.as_ref()
    }

    /// Batched forward over `batch` rows of `x` (`agents × cols` each, agent-major).
    pub fn forward(&self, x: &[f64], batch: usize) -> Result<(Vec<PredictiveParams>, ForwardTape)> {
        let d_in = self.config.input_dim();
        if x.len() != batch * d_in {
            return Err(CuError::DimensionMismatch {
                expected: batch * d_in,
                actual: x.len(),
            });
        }
        let scaled: Vec<f64> = x.iter().map(|v| v * self.config.input_scale).collect();
        let (enc_out, encoder) = self.encoder.forward(&self.params, scaled, batch);
        let h: Vec<f64> = enc_out.iter().map(|v| v.max(0.0)).collect();
        let (mu_raw, mu_tape) = self.dec_mu.forward(&self.params, h.clone(), batch);
        let prec = self.dec_prec.as_ref().map(|d| {
            let (raw, tape) = d.forward(&self.params, h.clone(), batch);
            (tape, raw)
        });
        let phi = self.dec_phi.as_ref().map(|d| {
            let (raw, tape) = d.forward(&self.params, h, batch);
            (tape, raw)
        });

        let (m, cols) = (self.config.agents, self.config.cols);
        let n_lower = lower_len(m);
        let full = self.config.family.is_full();
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let mu: Vec<f64> = mu_raw[b * d_in..(b + 1) * d_in]
                .iter()
                .map(|v| v * self.config.output_scale)
                .collect();
            let precision = match &prec {
                Some((_, raw)) => {
                    let row = &raw[b * self.config.prec_dim()..(b + 1) * self.config.prec_dim()];
                    let lower = if full { row[..n_lower].to_vec() } else { vec![0.0; n_lower] };
                    let log_diag = row[n_lower..].iter().map(|v| smooth_clamp(*v)).collect();
                    Some(Precision::Shared(PrecisionFactor::new(lower, log_diag)?))
                }
                None => None,
            };
            let phi_v = phi.as_ref().map(|(_, raw)| smooth_clamp(raw[b]).exp());
            out.push(PredictiveParams::new(
                self.config.family,
                AgentColumns::new(m, cols, mu)?,
                precision,
                phi_v,
            )?);
        }
        let tape = ForwardTape {
            batch,
            param_len: self.params.len(),
            family: self.config.family,
            encoder,
            enc_out,
            mu: mu_tape,
            prec,
            phi,
        };
        Ok((out, tape))
    }

    /// Gradient of `Σ_b loss_b` with respect to every parameter.
    pub fn backward(&self, tape: &ForwardTape, grads: &[LossGradients]) -> Result<Vec<f64>> {
        if tape.param_len != self.params.len() || tape.family != self.config.family || tape.batch != grads.len() {
            return Err(CuError::TapeMismatch);
        }
        let batch = tape.batch;
        let (d_in, pd) = (self.config.input_dim(), self.config.prec_dim());
        let n_lower = lower_len(self.config.agents);
        let full = self.config.family.is_full();
        let mut grad = vec![0.0; self.params.len()];

        let mut d_mu = Vec::with_capacity(batch * d_in);
        for g in grads {
            if g.d_mu.values().len() != d_in {
                return Err(CuError::TapeMismatch);
            }
            d_mu.extend(g.d_mu.values().iter().map(|v| v * self.config.output_scale));
        }
        let mut dh = self.dec_mu.backward(&self.params, &tape.mu, d_mu, batch, &mut grad);

        if let (Some(dec), Some((prec_tape, raw))) = (&self.dec_prec, &tape.prec) {
            let mut d_raw = vec![0.0; batch * pd];
            for (b, g) in grads.iter().enumerate() {
                let [f] = g.d_factors.as_slice() else {
                    return Err(CuError::TapeMismatch);
                };
                let row = &mut d_raw[b * pd..(b + 1) * pd];
                if full {
                    row[..n_lower].copy_from_slice(&f.d_lower);
                }
                for (j, d) in f.d_log_diag.iter().enumerate() {
                    row[n_lower + j] = d * smooth_clamp_grad(raw[b * pd + n_lower + j]);
                }
            }
            let d = dec.backward(&self.params, prec_tape, d_raw, batch, &mut grad);
            dh.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        if let (Some(dec), Some((phi_tape, raw))) = (&self.dec_phi, &tape.phi) {
            let mut d_raw = Vec::with_capacity(batch);
            for (b, g) in grads.iter().enumerate() {
                let d_phi = g.d_phi.ok_or(CuError::TapeMismatch)?;
                let phi = smooth_clamp(raw[b]).exp();
                d_raw.push(d_phi * phi * smooth_clamp_grad(raw[b]));
            }
            let d = dec.backward(&self.params, phi_tape, d_raw, batch, &mut grad);
            dh.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        dh.iter_mut().zip(&tape.enc_out).for_each(|(d, z)| {
            if *z <= 0.0 {
                *d = 0.0
            }
        });
        self.encoder.backward(&self.params, &tape.encoder, dh, batch, &mut grad);
        Ok(grad)
    }

    fn header(&self, epoch: Option<usize>, payload_sha: &str) -> String {
        let c = &self.config;
        let mut h = String::new();
        let _ = writeln!(h, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(h, "family {}", c.family);
        let _ = writeln!(h, "agents {}", c.agents);
        let _ = writeln!(h, "cols {}", c.cols);
        let _ = writeln!(h, "hidden {}", c.hidden);
        let _ = writeln!(h, "input_scale {:.16e}", c.input_scale);
        let _ = writeln!(h, "output_scale {:.16e}", c.output_scale);
        let _ = writeln!(h, "seed {}", self.seed);
        if let Some(e) = epoch {
            let _ = writeln!(h, "epoch {e}");
        }
        let _ = writeln!(h, "params {}", self.params.len());
        let _ = writeln!(h, "payload_sha256 {payload_sha}");
        h.push_str("end\n");
        h
    }

    /// Text header followed by the parameters as little-endian `f64`.
    pub fn to_checkpoint_bytes(&self, epoch: Option<usize>) -> Vec<u8> {
        let payload: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut out = self.header(epoch, &hex::encode(Sha256::digest(&payload))).into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, Option<usize>)> {
        let bad = |m: String| CuError::CorruptCheckpoint(m);
        let marker = b"\nend\n";
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| bad("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let payload = &bytes[end + marker.len()..];
        let mut lines = header.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("unknown checkpoint format".into()));
        }
        let mut fields = std::collections::BTreeMap::new();
        for line in lines {
            let (k, v) = line.split_once(' ').ok_or_else(|| bad(format!("bad header line `{line}`")))?;
            fields.insert(k, v);
        }
        fn field<T: std::str::FromStr>(f: &std::collections::BTreeMap<&str, &str>, k: &str) -> Result<T> {
            f.get(k)
                .ok_or_else(|| CuError::CorruptCheckpoint(format!("missing `{k}`")))?
                .parse()
                .map_err(|_| CuError::CorruptCheckpoint(format!("bad value for `{k}`")))
        }
        let family: LossFamily = field(&fields, "family")?;
        let config = NetworkConfig {
            family,
            agents: field(&fields, "agents")?,
            cols: field(&fields, "cols")?,
            hidden: field(&fields, "hidden")?,
            input_scale: field(&fields, "input_scale")?,
            output_scale: field(&fields, "output_scale")?,
        };
        let mut net = Self::zeros(config)?;
        net.seed = field(&fields, "seed")?;
        let n: usize = field(&fields, "params")?;
        if n != net.params.len() || payload.len() != 8 * n {
            return Err(bad(format!(
                "expected {} parameters, header says {n}, payload holds {} bytes",
                net.params.len(),
                payload.len()
            )));
        }
        let sha: String = field(&fields, "payload_sha256")?;
        if hex::encode(Sha256::digest(payload)) != sha {
            return Err(bad("payload digest mismatch".into()));
        }
        for (p, chunk) in net.params.iter_mut().zip(payload.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        let epoch = fields.get("epoch").map(|_| field(&fields, "epoch")).transpose()?;
        Ok((net, epoch))
    }

    pub fn save(&self, path: &Path, epoch: Option<usize>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes(epoch)).map_err(|e| CuError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<usize>)> {
        Self::from_checkpoint_bytes(&fs::read(path).map_err(|e| CuError::io(path, e))?)
    }
}

/// Anything that maps instances to predictive parameters.
pub trait Predictor {
    fn family(&self) -> LossFamily;
    fn predict(&self, batch: &[Instance]) -> Result<Vec<PredictiveParams>>;
}

impl Predictor for CuNetwork {
    fn family(&self) -> LossFamily {
        self.config.family
    }

    fn predict(&self, batch: &[Instance]) -> Result<Vec<PredictiveParams>> {
        let mut x = Vec::with_capacity(batch.len() * self.config.input_dim());
        for inst in batch {
            x.extend_from_slice(&inst.x.coords);
        }
        Ok(self.forward(&x, batch.len())?.0)
    }
}
