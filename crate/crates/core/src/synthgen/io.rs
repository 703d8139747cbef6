//! Dataset directory: `manifest.json` plus one JSON-lines file per split.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    make_sigma_gt, make_sigma_gt_with_min_cu, Instance, InstanceGenerator, MotionConfig, Split,
    SplitSizes, TrajectoryBatch, TrajectoryRole, TOY_AGENTS, TOY_TIMESTEPS,
};
use crate::error::{CuError, Result};
use crate::prob::linalg::{Cholesky, SquareMatrix};
use crate::prob::NoiseFamily;

pub const FORMAT_VERSION: u32 = 1;
pub const GENERATOR_VERSION: &str = "cu-synthgen/1";
const MANIFEST_FILE: &str = "manifest.json";
const MAX_SIGMA_DRAWS: usize = 100_000;

/// Inputs to [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub family: NoiseFamily,
    pub seed: u64,
    pub lambda: f64,
    pub sizes: SplitSizes,
    pub motion: MotionConfig,
    pub agents: usize,
    pub timesteps: usize,
    pub sigma_scale: f64,
    /// Redraw `Σ_gt` until its correlation reaches this strength; `None` keeps the first draw.
    pub min_cu_strength: Option<f64>,
}

impl DatasetConfig {
    pub fn toy(family: NoiseFamily, seed: u64) -> Self {
        Self {
            family,
            seed,
            lambda: 1.0,
            sizes: SplitSizes::default(),
            motion: MotionConfig::default(),
            agents: TOY_AGENTS,
            timesteps: TOY_TIMESTEPS,
            sigma_scale: 1.0,
            min_cu_strength: Some(0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitDigests {
    pub train: String,
    pub val: String,
    pub test: String,
}

impl SplitDigests {
    fn get_mut(&mut self, split: Split) -> &mut String {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn get(&self, split: Split) -> &str {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator_version: String,
    pub family: NoiseFamily,
    pub agents: usize,
    pub timesteps: usize,
    /// Row-major `agents × agents`.
    pub sigma_gt: Vec<f64>,
    pub sigma_scale: f64,
    pub min_cu_strength: Option<f64>,
    pub lambda: f64,
    pub seed: u64,
    pub sizes: SplitSizes,
    pub motion: MotionConfig,
    pub split_digests: SplitDigests,
    /// SHA-256 of this manifest serialized with an empty `digest`.
    pub digest: String,
}

impl DatasetManifest {
    pub fn from_config(config: &DatasetConfig) -> Result<Self> {
        let sigma = match config.min_cu_strength {
            Some(min) => make_sigma_gt_with_min_cu(config.seed, config.agents, config.sigma_scale, min, MAX_SIGMA_DRAWS)?,
            None => make_sigma_gt(config.seed, config.agents, config.sigma_scale)?,
        };
        let manifest = Self {
            format_version: FORMAT_VERSION,
            generator_version: GENERATOR_VERSION.to_string(),
            family: config.family,
            agents: config.agents,
            timesteps: config.timesteps,
            sigma_gt: sigma.into_entries(),
            sigma_scale: config.sigma_scale,
            min_cu_strength: config.min_cu_strength,
            lambda: config.lambda,
            seed: config.seed,
            sizes: config.sizes,
            motion: config.motion,
            split_digests: SplitDigests::default(),
            digest: String::new(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn sigma_gt_matrix(&self) -> Result<SquareMatrix> {
        SquareMatrix::new(self.agents, self.sigma_gt.clone())
            .map_err(|e| CuError::InvalidManifest(format!("sigma_gt: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CuError::InvalidManifest(msg));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format_version {}", self.format_version));
        }
        if self.agents == 0 || self.timesteps == 0 {
            return bad("agents and timesteps must be positive".into());
        }
        if self.sizes.train == 0 || self.sizes.val == 0 || self.sizes.test == 0 {
            return bad(format!("split sizes must be positive, got {:?}", self.sizes));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        let sigma = self.sigma_gt_matrix()?;
        sigma
            .check_symmetric()
            .and_then(|_| Cholesky::factorize(&sigma))
            .map_err(|e| CuError::InvalidManifest(format!("sigma_gt: {e}")))?;
        self.motion.validate()
    }

    pub fn compute_digest(&self) -> Result<String> {
        let mut body = self.clone();
        body.digest.clear();
        Ok(sha256_hex(&serde_json::to_vec(&body)?))
    }

    /// Number of output columns per agent (`2·T`).
    pub fn cols(&self) -> usize {
        2 * self.timesteps
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_batch(out: &mut String, b: &TrajectoryBatch) {
    out.push('[');
    for i in 0..b.agents {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for t in 0..b.timesteps {
            if t > 0 {
                out.push(',');
            }
            let _ = write!(out, "[{:.16e},{:.16e}]", b.at(i, t, 0), b.at(i, t, 1));
        }
        out.push(']');
    }
    out.push(']');
}

fn format_record(out: &mut String, inst: &Instance) {
    out.clear();
    out.push_str("{\"mu_gt\":");
    write_batch(out, &inst.mu_gt);
    out.push_str(",\"x\":");
    write_batch(out, &inst.x);
    out.push_str("}\n");
}

/// Generates all three splits into `out` and writes the manifest last.
pub fn generate_dataset(config: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::from_config(config)?;
    fs::create_dir_all(out).map_err(|e| CuError::io(out, e))?;
    let mut generator = InstanceGenerator::from_manifest(&manifest)?;
    let mut line = String::new();
    for split in Split::ALL {
        let path = out.join(split.file_name());
        let file = File::create(&path).map_err(|e| CuError::io(&path, e))?;
        let mut writer = BufWriter::with_capacity(1 << 20, file);
        let mut hasher = Sha256::new();
        let mut rng = split.rng(config.seed);
        for _ in 0..manifest.sizes.get(split) {
            format_record(&mut line, &generator.generate(&mut rng));
            hasher.update(line.as_bytes());
            writer.write_all(line.as_bytes()).map_err(|e| CuError::io(&path, e))?;
        }
        writer.flush().map_err(|e| CuError::io(&path, e))?;
        *manifest.split_digests.get_mut(split) = hex::encode(hasher.finalize());
    }
    manifest.digest = manifest.compute_digest()?;
    let path = out.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| CuError::io(&path, e))?;
    Ok(manifest)
}

/// An opened, digest-checked dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

/// Opens `dir`, validating the manifest and its self-digest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CuError::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| CuError::InvalidManifest(format!("{}: {e}", path.display())))?;
    if manifest.compute_digest()? != manifest.digest {
        return Err(CuError::ManifestMismatch { path });
    }
    manifest.validate()?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
    })
}

impl Dataset {
    pub fn reader(&self, split: Split) -> Result<SplitReader> {
        let path = self.dir.join(split.file_name());
        let file = File::open(&path).map_err(|e| CuError::io(&path, e))?;
        Ok(SplitReader {
            reader: BufReader::with_capacity(1 << 20, file),
            path,
            agents: self.manifest.agents,
            timesteps: self.manifest.timesteps,
            expected: self.manifest.sizes.get(split),
            digest: self.manifest.split_digests.get(split).to_string(),
            hasher: Some(Sha256::new()),
            line: 0,
            buf: Vec::new(),
        })
    }

    /// Reads a whole split into contiguous arrays.
    pub fn read_split(&self, split: Split) -> Result<SplitData> {
        let n = self.manifest.sizes.get(split);
        let width = self.manifest.agents * self.manifest.timesteps * 2;
        let mut data = SplitData {
            len: 0,
            agents: self.manifest.agents,
            timesteps: self.manifest.timesteps,
            x: Vec::with_capacity(n * width),
            mu_gt: Vec::with_capacity(n * width),
        };
        for inst in self.reader(split)? {
            let inst = inst?;
            data.x.extend_from_slice(&inst.x.coords);
            data.mu_gt.extend_from_slice(&inst.mu_gt.coords);
            data.len += 1;
        }
        Ok(data)
    }
}

/// A split held in memory; row `k` of `x`/`mu_gt` is one instance laid out `[agent][t][axis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub len: usize,
    pub agents: usize,
    pub timesteps: usize,
    pub x: Vec<f64>,
    pub mu_gt: Vec<f64>,
}

impl SplitData {
    pub fn width(&self) -> usize {
        self.agents * self.timesteps * 2
    }

    pub fn x_row(&self, k: usize) -> &[f64] {
        let w = self.width();
        &self.x[k * w..(k + 1) * w]
    }

    pub fn instance(&self, k: usize) -> Instance {
        let w = self.width();
        let batch = |coords: &[f64], role| TrajectoryBatch {
            agents: self.agents,
            timesteps: self.timesteps,
            coords: coords.to_vec(),
            role,
        };
        let x = batch(&self.x[k * w..(k + 1) * w], TrajectoryRole::NoisyObservation);
        let mu_gt = batch(&self.mu_gt[k * w..(k + 1) * w], TrajectoryRole::MeanGt);
        let epsilon = x.coords.iter().zip(&mu_gt.coords).map(|(a, b)| a - b).collect();
        Instance { x, mu_gt, epsilon }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    mu_gt: Vec<Vec<[f64; 2]>>,
    x: Vec<Vec<[f64; 2]>>,
}

/// Streaming reader; the record count and file digest are checked on reaching EOF.
pub struct SplitReader {
    reader: BufReader<File>,
    path: PathBuf,
    agents: usize,
    timesteps: usize,
    expected: usize,
    digest: String,
    hasher: Option<Sha256>,
    line: usize,
    buf: Vec<u8>,
}

impl SplitReader {
    fn corrupt(&self, reason: String) -> CuError {
        CuError::CorruptRecord {
            path: self.path.clone(),
            line: self.line,
            reason,
        }
    }

    fn to_batch(&self, raw: Vec<Vec<[f64; 2]>>, name: &str, role: TrajectoryRole) -> Result<TrajectoryBatch> {
        if raw.len() != self.agents {
            return Err(self.corrupt(format!("{name}: expected {} agents, found {}", self.agents, raw.len())));
        }
        let mut coords = Vec::with_capacity(self.agents * self.timesteps * 2);
        for (i, agent) in raw.iter().enumerate() {
            if agent.len() != self.timesteps {
                return Err(self.corrupt(format!(
                    "{name}: expected {} timesteps for agent {i}, found {}",
                    self.timesteps,
                    agent.len()
                )));
            }
            coords.extend(agent.iter().flatten());
        }
        Ok(TrajectoryBatch {
            agents: self.agents,
            timesteps: self.timesteps,
            coords,
            role,
        })
    }

    fn parse(&self) -> Result<Instance> {
        let raw: RawRecord =
            serde_json::from_slice(&self.buf).map_err(|e| self.corrupt(format!("malformed record: {e}")))?;
        let mu_gt = self.to_batch(raw.mu_gt, "mu_gt", TrajectoryRole::MeanGt)?;
        let x = self.to_batch(raw.x, "x", TrajectoryRole::NoisyObservation)?;
        let epsilon = x.coords.iter().zip(&mu_gt.coords).map(|(a, b)| a - b).collect();
        Ok(Instance { x, mu_gt, epsilon })
    }

    fn finish(&mut self, hasher: Sha256) -> Option<Result<Instance>> {
        if self.line != self.expected {
            self.line += 1;
            return Some(Err(self.corrupt(format!(
                "expected {} records, found {}",
                self.expected,
                self.line - 1
            ))));
        }
        if hex::encode(hasher.finalize()) != self.digest {
            return Some(Err(CuError::ManifestMismatch { path: self.path.clone() }));
        }
        None
    }
}

impl Iterator for SplitReader {
    type Item = Result<Instance>;

    fn next(&mut self) -> Option<Self::Item> {
        let hasher = self.hasher.as_mut()?;
        self.buf.clear();
        match self.reader.read_until(b'\n', &mut self.buf) {
            Err(e) => {
                self.hasher = None;
                Some(Err(CuError::io(&self.path, e)))
            }
            Ok(0) => {
                let hasher = self.hasher.take()?;
                self.finish(hasher)
            }
            Ok(_) => {
                hasher.update(&self.buf);
                self.line += 1;
                if self.line > self.expected {
                    self.hasher = None;
                    return Some(Err(self.corrupt(format!("more than {} records", self.expected))));
                }
                let out = self.parse();
                if out.is_err() {
                    self.hasher = None;
                }
                Some(out)
            }
        }
    }
}
