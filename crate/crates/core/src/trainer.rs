//! Adam training loop with best-validation checkpointing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CuError, Result};
use crate::losses::{batch_loss, AgentColumns, ColumnReduction, LossFamily};
use crate::model::{CuNetwork, NetworkConfig};
use crate::synthgen::{Dataset, Split, SplitData};

/// ChaCha stream for the shuffle; the network initializer uses stream 0.
const SHUFFLE_STREAM: u64 = 1;
const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves both the
/// parameters and the state untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(CuError::DimensionMismatch {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(CuError::NonFiniteGradient);
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] -= state.lr * (m / c1) / ((v / c2).sqrt() + state.eps);
    }
    Ok(())
}

/// Rescales `grads` so its Euclidean norm is at most `max_norm`; returns the norm before.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` at each epoch `⌊f·epochs⌋` for `f` in `fractions`.
    Step { fractions: Vec<f64>, gamma: f64 },
}

impl LrSchedule {
    pub fn default_step() -> Self {
        LrSchedule::Step {
            fractions: vec![2.0 / 3.0, 8.0 / 9.0],
            gamma: 0.1,
        }
    }

    pub fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { fractions, gamma } => {
                let passed = fractions
                    .iter()
                    .filter(|f| epoch >= (*f * epochs as f64).floor() as usize)
                    .count();
                base * gamma.powi(passed as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: LossFamily,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub hidden: usize,
    pub column_reduction: ColumnReduction,
    /// Train on data whose noise family differs from the loss family.
    pub allow_cross_family: bool,
    pub save_epoch_checkpoints: bool,
}

impl TrainConfig {
    pub fn new(family: LossFamily, seed: u64) -> Self {
        Self {
            family,
            epochs: 36,
            batch_size: 72,
            lr: 1e-3,
            lr_schedule: LrSchedule::default_step(),
            grad_clip: Some(100.0),
            seed,
            hidden: 128,
            column_reduction: ColumnReduction::Mean,
            allow_cross_family: false,
            save_epoch_checkpoints: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CuError::InvalidParameter(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be a finite non-negative number");
        }
        if self.hidden == 0 {
            return bad("hidden must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Seconds per epoch; kept out of `log.jsonl` so that file is reproducible.
    pub wall_seconds: Vec<f64>,
    pub best_epoch: usize,
    pub total_steps: usize,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_loss
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_net: CuNetwork,
    pub best_net: CuNetwork,
    pub log: TrainLog,
}

fn ckpt_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Network configuration for a dataset of the given shape.
pub fn network_config(config: &TrainConfig, agents: usize, timesteps: usize) -> NetworkConfig {
    NetworkConfig {
        hidden: config.hidden,
        agents,
        cols: 2 * timesteps,
        ..NetworkConfig::toy(config.family)
    }
}

/// Mean per-sample loss of `net` over a split (same reduction as training).
pub fn mean_loss(net: &CuNetwork, data: &SplitData, reduction: ColumnReduction) -> Result<f64> {
    let cfg = net.config();
    let scale = reduction.factor(cfg.cols);
    let mut total = 0.0;
    let mut start = 0;
    while start < data.len {
        let n = EVAL_CHUNK.min(data.len - start);
        let x = &data.x[start * data.width()..(start + n) * data.width()];
        let (chunk_mean, _) = step_loss(net, x, n)?;
        total += chunk_mean * n as f64;
        start += n;
    }
    Ok(total * scale / data.len as f64)
}

/// Forward plus batch loss; the target of the toy task is the input itself.
fn step_loss(net: &CuNetwork, x: &[f64], n: usize) -> Result<(f64, Vec<crate::losses::LossGradients>)> {
    let cfg = net.config();
    let (params, _) = net.forward(x, n)?;
    let batch: Vec<_> = params
        .into_iter()
        .enumerate()
        .map(|(b, p)| {
            let y = AgentColumns::new(cfg.agents, cfg.cols, x[b * cfg.input_dim()..(b + 1) * cfg.input_dim()].to_vec())?;
            Ok((y, p))
        })
        .collect::<Result<_>>()?;
    batch_loss(&batch, cfg.family)
}

/// In-memory training; `run_dir` (when given) receives config, logs and checkpoints.
pub fn train_on(
    config: &TrainConfig,
    train: &SplitData,
    val: &SplitData,
    net: CuNetwork,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if net.family() != config.family {
        return Err(CuError::FamilyMismatch {
            expected: config.family.to_string(),
            actual: net.family().to_string(),
        });
    }
    let cfg = *net.config();
    if train.width() != cfg.input_dim() || val.width() != cfg.input_dim() {
        return Err(CuError::DimensionMismatch {
            expected: cfg.input_dim(),
            actual: train.width(),
        });
    }
    if train.len == 0 || val.len == 0 {
        return Err(CuError::EmptyBatch);
    }
    let files = run_dir.map(RunFiles::create).transpose()?;
    if let Some(f) = &files {
        f.write_json("config.json", config)?;
    }

    let mut net = net;
    let mut adam = AdamState::new(net.param_count(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len).collect();
    let width = train.width();
    let scale = config.column_reduction.factor(cfg.cols);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, CuNetwork)> = None;
    let mut x = Vec::with_capacity(config.batch_size * width);

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        adam.lr = config.lr_schedule.lr_at(config.lr, epoch - 1, config.epochs);
        order.shuffle(&mut rng);
        let (mut sum, mut steps, mut skipped) = (0.0, 0, 0);
        for idx in order.chunks(config.batch_size) {
            x.clear();
            for &k in idx {
                x.extend_from_slice(train.x_row(k));
            }
            let (params, tape) = net.forward(&x, idx.len())?;
            let batch: Vec<_> = params
                .into_iter()
                .enumerate()
                .map(|(b, p)| Ok((AgentColumns::new(cfg.agents, cfg.cols, x[b * width..(b + 1) * width].to_vec())?, p)))
                .collect::<Result<_>>()?;
            let (value, mut grads) = batch_loss(&batch, cfg.family)?;
            let value = value * scale;
            if !value.is_finite() {
                return Err(CuError::DivergedLoss { epoch, loss: value });
            }
            grads.iter_mut().for_each(|g| g.scale(scale));
            let mut g = net.backward(&tape, &grads)?;
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut g, c);
            }
            match adam_step(net.params_mut(), &g, &mut adam) {
                Ok(()) => {}
                Err(CuError::NonFiniteGradient) => skipped += 1,
                Err(e) => return Err(e),
            }
            sum += value;
            steps += 1;
        }
        let train_loss = sum / steps as f64;
        if !train_loss.is_finite() {
            return Err(CuError::DivergedLoss { epoch, loss: train_loss });
        }
        let val_loss = mean_loss(&net, val, config.column_reduction)?;
        let bytes = net.to_checkpoint_bytes(Some(epoch));
        let record = EpochRecord {
            epoch,
            lr: adam.lr,
            steps,
            skipped_steps: skipped,
            train_loss,
            val_loss,
            checkpoint_sha256: ckpt_digest(&bytes),
        };
        if best.as_ref().map_or(true, |(v, _)| val_loss < *v) {
            best = Some((val_loss, net.clone()));
            log.best_epoch = epoch;
            if let Some(f) = &files {
                f.write_bytes(&f.best_path(), &bytes)?;
            }
        }
        log.total_steps += steps;
        log.wall_seconds.push(started.elapsed().as_secs_f64());
        if let Some(f) = &files {
            if config.save_epoch_checkpoints {
                f.write_bytes(&f.dir.join("checkpoints").join(format!("epoch_{epoch}.ckpt")), &bytes)?;
            }
            f.append_line("log.jsonl", &serde_json::to_string(&record)?)?;
            f.append_line(
                "timing.jsonl",
                &serde_json::to_string(&serde_json::json!({"epoch": epoch, "wall_seconds": log.wall_seconds[epoch - 1]}))?,
            )?;
        }
        log.epochs.push(record);
    }
    let (_, best_net) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        final_net: net,
        best_net,
        log,
    })
}

/// Trains on a loaded dataset, checking family compatibility first.
pub fn train(config: &TrainConfig, dataset: &Dataset, net: CuNetwork, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    let data_family = dataset.manifest.family;
    if data_family != config.family.noise_family() && !config.allow_cross_family {
        return Err(CuError::DatasetFamilyMismatch {
            dataset: data_family.to_string(),
            config: config.family.to_string(),
        });
    }
    if net.family() != config.family {
        return Err(CuError::FamilyMismatch {
            expected: config.family.to_string(),
            actual: net.family().to_string(),
        });
    }
    let cfg = network_config(config, dataset.manifest.agents, dataset.manifest.timesteps);
    if net.config() != &cfg {
        return Err(CuError::InvalidParameter(format!(
            "network {:?} does not fit dataset/config {:?}",
            net.config(),
            cfg
        )));
    }
    let train_split = dataset.read_split(Split::Train)?;
    let val_split = dataset.read_split(Split::Val)?;
    train_on(config, &train_split, &val_split, net, run_dir)
}

struct RunFiles {
    dir: PathBuf,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<Self> {
        let ck = dir.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| CuError::io(&ck, e))?;
        for name in ["log.jsonl", "timing.jsonl"] {
            let p = dir.join(name);
            File::create(&p).map_err(|e| CuError::io(&p, e))?;
        }
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn best_path(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(&self.dir.join(name), text.as_bytes())
    }

    fn write_bytes(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        fs::write(path, bytes).map_err(|e| CuError::io(path, e))
    }

    fn append_line(&self, name: &str, line: &str) -> Result<()> {
        let p = self.dir.join(name);
        let file = fs::OpenOptions::new().append(true).open(&p).map_err(|e| CuError::io(&p, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| CuError::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_by_hand() {
        let mut p = [0.0];
        let mut s = AdamState::new(1, 1e-3);
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((p[0] - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-18);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [1.0, -2.0];
        let mut s = AdamState::new(2, 1e-2);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        }
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut p = [1.0];
        let mut s = AdamState::new(1, 1e-2);
        assert!(matches!(adam_step(&mut p, &[f64::NAN], &mut s), Err(CuError::NonFiniteGradient)));
        assert_eq!((p[0], s.step_count), (1.0, 0));
    }

    #[test]
    fn clipping() {
        let mut g = [3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 100.0), 5.0);
        assert_eq!(g, [3.0, 4.0]);
        clip_grad_norm(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn step_schedule() {
        let s = LrSchedule::default_step();
        assert_eq!(s.lr_at(1.0, 0, 36), 1.0);
        assert_eq!(s.lr_at(1.0, 23, 36), 1.0);
        assert!((s.lr_at(1.0, 24, 36) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(1.0, 32, 36) - 0.01).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.lr_at(5e-3, 30, 36), 5e-3);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(LossFamily::GaussianFull, 0);
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(c.validate().is_err());
    }
}
