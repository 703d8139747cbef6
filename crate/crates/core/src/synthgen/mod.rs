//! Synthetic multi-agent trajectories: straight-line means plus noise that is
//! correlated across agents at every (timestep, axis).

mod io;

pub use io::{
    generate_dataset, load_dataset, Dataset, DatasetConfig, DatasetManifest, SplitData,
    SplitReader, FORMAT_VERSION, GENERATOR_VERSION,
};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CuError, Result};
use crate::prob::linalg::{Cholesky, SquareMatrix};
use crate::prob::sampling::NoiseSampler;
use crate::prob::NoiseFamily;

pub const TOY_AGENTS: usize = 3;
pub const TOY_TIMESTEPS: usize = 50;

/// Grid used for start positions and velocities; keeps every `p₀ + t·v` exact.
const MOTION_QUANTUM: f64 = 1.0 / 4_294_967_296.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionConfig {
    pub position_box: [f64; 2],
    pub speed_range: [f64; 2],
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            position_box: [-10.0, 10.0],
            speed_range: [0.05, 0.5],
        }
    }
}

impl MotionConfig {
    fn validate(&self) -> Result<()> {
        let [lo, hi] = self.position_box;
        let [smin, smax] = self.speed_range;
        if !(lo < hi) || !(0.0 <= smin && smin <= smax) || ![lo, hi, smin, smax].iter().all(|v| v.is_finite()) {
            return Err(CuError::InvalidManifest(format!("bad motion config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 36000,
            val: 7000,
            test: 7000,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }

    /// ChaCha stream index; stream 0 is reserved for `Σ_gt`.
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn rng(self, seed: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self.stream());
        rng
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown split `{s}` (expected train|val|test)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryRole {
    MeanGt,
    NoisyObservation,
}

/// Coordinates laid out `[agent][timestep][axis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub agents: usize,
    pub timesteps: usize,
    pub coords: Vec<f64>,
    pub role: TrajectoryRole,
}

impl TrajectoryBatch {
    #[inline]
    pub fn index(&self, agent: usize, t: usize, axis: usize) -> usize {
        (agent * self.timesteps + t) * 2 + axis
    }

    #[inline]
    pub fn at(&self, agent: usize, t: usize, axis: usize) -> f64 {
        self.coords[self.index(agent, t, axis)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub x: TrajectoryBatch,
    pub mu_gt: TrajectoryBatch,
    pub epsilon: Vec<f64>,
}

fn quantize(v: f64) -> f64 {
    (v / MOTION_QUANTUM).round() * MOTION_QUANTUM
}

/// Constant-velocity trajectories for `agents` agents.
///
/// Per agent the draws are: start x, start y, heading, speed.
pub fn generate_mean<R: Rng + ?Sized>(
    rng: &mut R,
    agents: usize,
    timesteps: usize,
    motion: &MotionConfig,
) -> TrajectoryBatch {
    let mut coords = vec![0.0; agents * timesteps * 2];
    let [lo, hi] = motion.position_box;
    let [smin, smax] = motion.speed_range;
    for i in 0..agents {
        let p0 = [quantize(rng.random_range(lo..=hi)), quantize(rng.random_range(lo..=hi))];
        let heading = rng.random_range(0.0..2.0 * PI);
        let speed = if smax > smin { rng.random_range(smin..=smax) } else { smin };
        let v = [quantize(speed * heading.cos()), quantize(speed * heading.sin())];
        for t in 0..timesteps {
            for axis in 0..2 {
                coords[(i * timesteps + t) * 2 + axis] = p0[axis] + t as f64 * v[axis];
            }
        }
    }
    TrajectoryBatch {
        agents,
        timesteps,
        coords,
        role: TrajectoryRole::MeanGt,
    }
}

/// Reusable per-dataset sampler.
///
/// An all-zero `Σ_gt` is accepted and yields noiseless instances.
#[derive(Debug, Clone)]
pub struct InstanceGenerator {
    agents: usize,
    timesteps: usize,
    motion: MotionConfig,
    sampler: Option<NoiseSampler>,
    buf: Vec<f64>,
}

impl InstanceGenerator {
    pub fn new(
        family: NoiseFamily,
        sigma_gt: &SquareMatrix,
        lambda: f64,
        timesteps: usize,
        motion: MotionConfig,
    ) -> Result<Self> {
        motion.validate()?;
        let agents = sigma_gt.dim();
        let sampler = if sigma_gt.entries().iter().all(|v| *v == 0.0) {
            None
        } else {
            Some(NoiseSampler::new(family, sigma_gt, lambda)?)
        };
        Ok(Self {
            agents,
            timesteps,
            motion,
            sampler,
            buf: vec![0.0; agents],
        })
    }

    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        Self::new(
            manifest.family,
            &manifest.sigma_gt_matrix()?,
            manifest.lambda,
            manifest.timesteps,
            manifest.motion,
        )
    }

    pub fn generate<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Instance {
        let (m, t_len) = (self.agents, self.timesteps);
        let mu_gt = generate_mean(rng, m, t_len, &self.motion);
        let mut raw = vec![0.0; m * t_len * 2];
        if let Some(sampler) = &mut self.sampler {
            for t in 0..t_len {
                for axis in 0..2 {
                    sampler.sample_into(rng, &mut self.buf);
                    for i in 0..m {
                        raw[(i * t_len + t) * 2 + axis] = self.buf[i];
                    }
                }
            }
        }
        let x: Vec<f64> = mu_gt.coords.iter().zip(&raw).map(|(a, e)| a + e).collect();
        // store the rounded noise so that x == μ + ε and x − μ == ε hold bitwise
        let epsilon = x.iter().zip(&mu_gt.coords).map(|(x, a)| x - a).collect();
        Instance {
            x: TrajectoryBatch {
                agents: m,
                timesteps: t_len,
                coords: x,
                role: TrajectoryRole::NoisyObservation,
            },
            mu_gt,
            epsilon,
        }
    }
}

/// One instance from a fresh generator; prefer [`InstanceGenerator`] in loops.
pub fn generate_instance<R: Rng + ?Sized>(manifest: &DatasetManifest, rng: &mut R) -> Result<Instance> {
    Ok(InstanceGenerator::from_manifest(manifest)?.generate(rng))
}

fn draw_sigma<R: Rng + ?Sized>(rng: &mut R, m: usize, scale: f64) -> SquareMatrix {
    let a: Vec<f64> = (0..m * m).map(|_| rng.sample(StandardNormal)).collect();
    let mut s = SquareMatrix::zeros(m);
    for i in 0..m {
        for j in 0..=i {
            let dot: f64 = (0..m).map(|k| a[i * m + k] * a[j * m + k]).sum();
            let mut v = dot / m as f64;
            if i == j {
                v += 0.5;
            }
            s.set(i, j, scale * v);
            s.set(j, i, scale * v);
        }
    }
    s
}

fn sigma_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// `scale·(A·Aᵀ/m + ½I)` with `A` standard normal.
pub fn make_sigma_gt(seed: u64, m: usize, scale: f64) -> Result<SquareMatrix> {
    check_scale(scale, m)?;
    Ok(draw_sigma(&mut sigma_rng(seed), m, scale))
}

/// Like [`make_sigma_gt`], redrawing from the same stream until
/// [`cu_strength`] reaches `min_strength`.
pub fn make_sigma_gt_with_min_cu(
    seed: u64,
    m: usize,
    scale: f64,
    min_strength: f64,
    max_draws: usize,
) -> Result<SquareMatrix> {
    check_scale(scale, m)?;
    let mut rng = sigma_rng(seed);
    for _ in 0..max_draws.max(1) {
        let s = draw_sigma(&mut rng, m, scale);
        if cu_strength(&s)? >= min_strength {
            return Ok(s);
        }
    }
    Err(CuError::InvalidParameter(format!(
        "no Σ_gt with collaborative strength ≥ {min_strength} in {max_draws} draws"
    )))
}

fn check_scale(scale: f64, m: usize) -> Result<()> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(CuError::InvalidParameter(format!("scale must be positive, got {scale}")));
    }
    if m == 0 {
        return Err(CuError::InvalidParameter("m must be positive".into()));
    }
    Ok(())
}

/// `−½·log det R` for the correlation matrix `R` of `sigma`: the gap in
/// expected log-likelihood between the full Gaussian and its diagonal part.
pub fn cu_strength(sigma: &SquareMatrix) -> Result<f64> {
    let m = sigma.dim();
    let mut r = SquareMatrix::zeros(m);
    for i in 0..m {
        for j in 0..m {
            r.set(i, j, sigma.get(i, j) / (sigma.get(i, i) * sigma.get(j, j)).sqrt());
        }
    }
    Ok(-0.5 * Cholesky::factorize(&r)?.log_det())
}
