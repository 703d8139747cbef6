//! Experiment driver for dataset generation, training, evaluation and self-checks.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage, 3 I/O, 4 compatibility, 5 divergence.

pub mod svg;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use cu_core::losses::{ColumnReduction, LossFamily};
use cu_core::metrics::{evaluate_split, predicted_covariance, EvalOptions, MetricReport, SigmaAveraging};
use cu_core::model::{CuNetwork, Predictor};
use cu_core::prob::NoiseFamily;
use cu_core::selfcheck::{self, LossTable, Suite};
use cu_core::synthgen::{generate_dataset, load_dataset, DatasetConfig, Split, SplitSizes};
use cu_core::trainer::{network_config, train, LrSchedule, TrainConfig};
use cu_core::CuError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_COMPAT: i32 = 4;
pub const EXIT_DIVERGED: i32 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn compat(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_COMPAT,
            message: message.into(),
        }
    }
}

impl From<CuError> for Failure {
    fn from(e: CuError) -> Self {
        let code = match &e {
            CuError::Io { .. } | CuError::CorruptRecord { .. } | CuError::ManifestMismatch { .. } | CuError::InvalidManifest(_) => EXIT_IO,
            CuError::DatasetFamilyMismatch { .. } | CuError::FamilyMismatch { .. } | CuError::CorruptCheckpoint(_) => EXIT_COMPAT,
            CuError::DivergedLoss { .. } => EXIT_DIVERGED,
            CuError::InvalidParameter(_) => EXIT_USAGE,
            _ => EXIT_FAILED,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self {
            code: EXIT_FAILED,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<i32, Failure>;

#[derive(Debug, Parser)]
#[command(name = "cu", version, about = "Collaborative-uncertainty experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the fast invariant batteries.
    Selfcheck(SelfcheckArgs),
    /// Generate, train DIA and FULL, evaluate and compare.
    Reproduce(ReproduceArgs),
}

/// `self.field = self.field.or(file.field)` for each listed field.
macro_rules! merge_from {
    ($dst:expr, $src:expr, $($f:ident),* $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f; } )*
    };
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> std::result::Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn required<T>(v: Option<T>, flag: &str) -> std::result::Result<T, Failure> {
    v.ok_or_else(|| Failure::usage(format!("missing required option --{flag}")))
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateArgs {
    /// Noise family: gaussian | laplace.
    #[arg(long)]
    pub family: Option<NoiseFamily>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub sigma_scale: Option<f64>,
    /// Minimum collaborative strength `−½·log det R` required of Σ_gt (negative disables).
    #[arg(long, allow_hyphen_values = true)]
    pub min_cu: Option<f64>,
    /// JSON file with the same keys; flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl GenerateArgs {
    fn resolve(mut self) -> std::result::Result<(DatasetConfig, PathBuf), Failure> {
        let file: GenerateArgs = read_config(self.config.as_deref())?;
        merge_from!(self, file, family, seed, out, lambda, train_size, val_size, test_size, sigma_scale, min_cu);
        let family = required(self.family, "family")?;
        let out = required(self.out, "out")?;
        let mut cfg = DatasetConfig::toy(family, self.seed.unwrap_or(0));
        let sizes = SplitSizes::default();
        cfg.sizes = SplitSizes {
            train: self.train_size.unwrap_or(sizes.train),
            val: self.val_size.unwrap_or(sizes.val),
            test: self.test_size.unwrap_or(sizes.test),
        };
        cfg.lambda = self.lambda.unwrap_or(cfg.lambda);
        cfg.sigma_scale = self.sigma_scale.unwrap_or(cfg.sigma_scale);
        if let Some(v) = self.min_cu {
            cfg.min_cu_strength = (v >= 0.0).then_some(v);
        }
        if cfg.sizes.train == 0 || cfg.sizes.val == 0 || cfg.sizes.test == 0 {
            return Err(Failure::usage("split sizes must be positive"));
        }
        Ok((cfg, out))
    }
}

pub fn cmd_generate(args: GenerateArgs, out: &mut dyn Write) -> CmdResult {
    let (cfg, dir) = args.resolve()?;
    let manifest = generate_dataset(&cfg, &dir)?;
    writeln!(out, "dataset {}", dir.display())?;
    writeln!(out, "digest {}", manifest.digest)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Loss: id-l2 | id-l1 | gauss-dia | gauss-full | lap-dia | lap-full.
    #[arg(long)]
    pub loss: Option<LossFamily>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// constant | step
    #[arg(long)]
    pub lr_schedule: Option<String>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub no_clip: bool,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// mean | sum over output columns.
    #[arg(long)]
    pub column_reduction: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    pub no_epoch_checkpoints: bool,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn parse_schedule(s: &str) -> std::result::Result<LrSchedule, Failure> {
    match s {
        "constant" => Ok(LrSchedule::Constant),
        "step" => Ok(LrSchedule::default_step()),
        other => Err(Failure::usage(format!("unknown lr schedule `{other}` (expected constant|step)"))),
    }
}

fn parse_reduction(s: &str) -> std::result::Result<ColumnReduction, Failure> {
    match s {
        "mean" => Ok(ColumnReduction::Mean),
        "sum" => Ok(ColumnReduction::Sum),
        other => Err(Failure::usage(format!("unknown column reduction `{other}` (expected mean|sum)"))),
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    data: &'a Path,
    dataset_digest: &'a str,
    init: Option<&'a Path>,
    train: &'a TrainConfig,
}

pub fn cmd_train(mut args: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let file: TrainArgs = read_config(args.config.as_deref())?;
    merge_from!(args, file, data, loss, seed, out, epochs, batch_size, lr, lr_schedule, grad_clip, hidden, column_reduction, init);
    let data = required(args.data, "data")?;
    let loss = required(args.loss, "loss")?;
    let run_dir = required(args.out, "out")?;
    let mut cfg = TrainConfig::new(loss, args.seed.unwrap_or(0));
    cfg.epochs = args.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr = args.lr.unwrap_or(cfg.lr);
    if let Some(s) = &args.lr_schedule {
        cfg.lr_schedule = parse_schedule(s)?;
    }
    cfg.grad_clip = if args.no_clip { None } else { Some(args.grad_clip.unwrap_or(100.0)) };
    cfg.hidden = args.hidden.unwrap_or(cfg.hidden);
    if let Some(s) = &args.column_reduction {
        cfg.column_reduction = parse_reduction(s)?;
    }
    cfg.save_epoch_checkpoints = !args.no_epoch_checkpoints;
    cfg.allow_cross_family = true;
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;

    let dataset = load_dataset(&data)?;
    if dataset.manifest.family != loss.noise_family() {
        writeln!(
            err,
            "warning: training {loss} ({} likelihood) on {} data",
            loss.noise_family(),
            dataset.manifest.family
        )?;
    }
    let net_cfg = network_config(&cfg, dataset.manifest.agents, dataset.manifest.timesteps);
    let net = match &args.init {
        Some(path) => {
            let (net, _) = CuNetwork::load(path)?;
            if net.family() != loss {
                return Err(Failure::compat(format!("checkpoint family {} does not match --loss {loss}", net.family())));
            }
            if net.config() != &net_cfg {
                return Err(Failure::compat(format!(
                    "checkpoint network {:?} does not fit this dataset/config {net_cfg:?}",
                    net.config()
                )));
            }
            net
        }
        None => CuNetwork::init_params(net_cfg, cfg.seed)?,
    };
    fs::create_dir_all(&run_dir)?;
    let record = RunRecord {
        data: &data,
        dataset_digest: &dataset.manifest.digest,
        init: args.init.as_deref(),
        train: &cfg,
    };
    fs::write(run_dir.join("run.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    let outcome = train(&cfg, &dataset, net, Some(&run_dir))?;
    let last = outcome.log.epochs.last().expect("epochs > 0");
    writeln!(out, "best epoch {} val_loss {:.6}", outcome.log.best_epoch, outcome.log.best_val_loss())?;
    writeln!(out, "final val_loss {:.6}", last.val_loss)?;
    writeln!(out, "run {}", run_dir.display())?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train | val | test
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub kl_samples: Option<usize>,
    /// Seed of the Monte-Carlo KL.
    #[arg(long)]
    pub seed: Option<u64>,
    /// precision | covariance
    #[arg(long)]
    pub sigma_averaging: Option<String>,
    /// Directory for report.json and metrics.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-instance SVG plots.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Number of instances to plot.
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn cmd_eval(mut args: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let file: EvalArgs = read_config(args.config.as_deref())?;
    merge_from!(args, file, checkpoint, data, split, kl_samples, seed, sigma_averaging, out, svg, instances);
    let ckpt = required(args.checkpoint, "checkpoint")?;
    if !ckpt.is_file() {
        return Err(Failure::usage(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let data = required(args.data, "data")?;
    let split = args.split.unwrap_or(Split::Test);
    let mut options = EvalOptions::default();
    options.kl_samples = args.kl_samples.unwrap_or(options.kl_samples);
    options.seed = args.seed.unwrap_or(options.seed);
    options.sigma_averaging = match args.sigma_averaging.as_deref() {
        None | Some("precision") => SigmaAveraging::Precision,
        Some("covariance") => SigmaAveraging::Covariance,
        Some(other) => return Err(Failure::usage(format!("unknown sigma averaging `{other}`"))),
    };
    let (net, _) = CuNetwork::load(&ckpt)?;
    let dataset = load_dataset(&data)?;
    let m = &dataset.manifest;
    if net.config().agents != m.agents || net.config().cols != m.cols() {
        return Err(Failure::compat(format!(
            "checkpoint expects {} agents × {} columns, dataset has {} × {}",
            net.config().agents,
            net.config().cols,
            m.agents,
            m.cols()
        )));
    }
    let report = evaluate_split(&net, &dataset, split, &options)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    writeln!(out, "{}", MetricReport::CSV_HEADER)?;
    writeln!(out, "{}", report.csv_row())?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        fs::write(dir.join("metrics.csv"), format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()))?;
    }
    if let Some(dir) = &args.svg {
        fs::create_dir_all(dir)?;
        let n = args.instances.unwrap_or(3);
        let insts: Vec<_> = dataset.reader(split)?.take(n).collect::<Result<_, _>>()?;
        let preds = net.predict(&insts)?;
        for (k, (inst, p)) in insts.iter().zip(&preds).enumerate() {
            let cov = predicted_covariance(p)?;
            fs::write(dir.join(format!("instance_{k}.svg")), svg::render_instance(inst, p, cov.as_ref()))?;
        }
        writeln!(out, "wrote {} plots to {}", insts.len(), dir.display())?;
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Default, Args)]
pub struct SelfcheckArgs {
    /// ldl | gradients | zstar | kl (repeatable; default all).
    #[arg(long = "suite")]
    pub suites: Vec<Suite>,
}

/// Runs suites against `table`; exit 1 names every failing suite and check.
pub fn selfcheck_with(suites: &[Suite], table: &LossTable, out: &mut dyn Write) -> CmdResult {
    let suites = if suites.is_empty() { &Suite::ALL[..] } else { suites };
    let mut code = EXIT_OK;
    for r in selfcheck::run(suites, table) {
        if r.passed() {
            writeln!(out, "PASS {} ({} checks)", r.suite, r.checks)?;
        } else {
            code = EXIT_FAILED;
            writeln!(out, "FAIL {} ({} of {} checks)", r.suite, r.failures.len(), r.checks)?;
            for f in &r.failures {
                writeln!(out, "  {f}")?;
            }
        }
    }
    Ok(code)
}

pub fn cmd_selfcheck(args: SelfcheckArgs, out: &mut dyn Write) -> CmdResult {
    selfcheck_with(&args.suites, &LossTable::default(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FamilyChoice {
    Gaussian,
    Laplace,
    Both,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproduceArgs {
    #[arg(long, value_enum)]
    pub family: Option<FamilyChoice>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub kl_samples: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Fully resolved settings of one reproduce pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceSettings {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub eval: EvalOptions,
}

impl ReproduceSettings {
    pub fn toy(family: NoiseFamily, seed: u64) -> Self {
        let train = TrainConfig::new(LossFamily::GaussianFull, seed);
        Self {
            seed,
            dataset: DatasetConfig::toy(family, seed),
            epochs: train.epochs,
            lr: train.lr,
            hidden: train.hidden,
            eval: EvalOptions {
                seed,
                ..EvalOptions::default()
            },
        }
    }

    fn train_config(&self, loss: LossFamily) -> TrainConfig {
        let mut c = TrainConfig::new(loss, self.seed);
        c.epochs = self.epochs;
        c.lr = self.lr;
        c.hidden = self.hidden;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionCheck {
    pub metric: String,
    pub rule: String,
    pub dia: f64,
    pub full: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub family: NoiseFamily,
    pub seed: u64,
    pub dataset_digest: String,
    pub dia: MetricReport,
    pub full: MetricReport,
    pub checks: Vec<CriterionCheck>,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn new(family: NoiseFamily, seed: u64, dataset_digest: String, dia: MetricReport, full: MetricReport) -> Self {
        let check = |metric: &str, rule: &str, d: f64, f: f64, passed: bool| CriterionCheck {
            metric: metric.into(),
            rule: rule.into(),
            dia: d,
            full: f,
            passed,
        };
        let checks = vec![
            check("kl", "FULL <= 0.5 * DIA", dia.kl, full.kl, full.kl <= 0.5 * dia.kl),
            check("l1_sigma", "FULL < DIA", dia.l1_sigma, full.l1_sigma, full.l1_sigma < dia.l1_sigma),
            check("l2_mu", "FULL <= DIA + 0.05", dia.l2_mu, full.l2_mu, full.l2_mu <= dia.l2_mu + 0.05),
        ];
        Self {
            family,
            seed,
            dataset_digest,
            dia,
            full,
            checks,
        }
    }

    pub fn table(&self) -> String {
        let mut s = format!("{} (seed {})\n", self.family, self.seed);
        s += &format!("{:<10} {:>12} {:>12}  {:<20} {}\n", "metric", "DIA", "FULL", "criterion", "result");
        for c in &self.checks {
            s += &format!(
                "{:<10} {:>12.6} {:>12.6}  {:<20} {}\n",
                c.metric,
                c.dia,
                c.full,
                c.rule,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        if let (Some(a), Some(b)) = (self.dia.mc_std_error, self.full.mc_std_error) {
            s += &format!("kl standard errors: DIA {a:.6}, FULL {b:.6}\n");
        }
        s
    }
}

/// Generates the dataset, trains DIA and FULL, evaluates both on the test split.
///
/// Layout under `root`: `data/`, `runs/<loss>/`, `reports/<loss>.json`, `comparison.json`.
pub fn reproduce_family(settings: &ReproduceSettings, root: &Path) -> std::result::Result<Comparison, Failure> {
    let family = settings.dataset.family;
    let data_dir = root.join("data");
    generate_dataset(&settings.dataset, &data_dir)?;
    let dataset = load_dataset(&data_dir)?;
    let (dia_loss, full_loss) = LossFamily::dia_full(family);
    let mut reports = Vec::new();
    fs::create_dir_all(root.join("reports"))?;
    for loss in [dia_loss, full_loss] {
        let cfg = settings.train_config(loss);
        let net = CuNetwork::init_params(network_config(&cfg, dataset.manifest.agents, dataset.manifest.timesteps), cfg.seed)?;
        let outcome = train(&cfg, &dataset, net, Some(&root.join("runs").join(loss.name())))?;
        let report = evaluate_split(&outcome.best_net, &dataset, Split::Test, &settings.eval)?;
        fs::write(
            root.join("reports").join(format!("{}.json", loss.name())),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        reports.push(report);
    }
    let full = reports.pop().expect("two reports");
    let dia = reports.pop().expect("two reports");
    let cmp = Comparison::new(family, settings.seed, dataset.manifest.digest.clone(), dia, full);
    fs::write(root.join("comparison.json"), serde_json::to_string_pretty(&cmp)? + "\n")?;
    Ok(cmp)
}

pub fn cmd_reproduce(mut args: ReproduceArgs, out: &mut dyn Write) -> CmdResult {
    let file: ReproduceArgs = read_config(args.config.as_deref())?;
    merge_from!(args, file, family, seed, out, epochs, lr, hidden, train_size, val_size, test_size, kl_samples);
    let root = required(args.out, "out")?;
    let seed = args.seed.unwrap_or(7);
    let families: &[NoiseFamily] = match args.family.unwrap_or(FamilyChoice::Both) {
        FamilyChoice::Gaussian => &[NoiseFamily::Gaussian],
        FamilyChoice::Laplace => &[NoiseFamily::Laplace],
        FamilyChoice::Both => &[NoiseFamily::Gaussian, NoiseFamily::Laplace],
    };
    let started = Instant::now();
    let mut code = EXIT_OK;
    for &family in families {
        let mut s = ReproduceSettings::toy(family, seed);
        s.epochs = args.epochs.unwrap_or(s.epochs);
        s.lr = args.lr.unwrap_or(s.lr);
        s.hidden = args.hidden.unwrap_or(s.hidden);
        s.dataset.sizes.train = args.train_size.unwrap_or(s.dataset.sizes.train);
        s.dataset.sizes.val = args.val_size.unwrap_or(s.dataset.sizes.val);
        s.dataset.sizes.test = args.test_size.unwrap_or(s.dataset.sizes.test);
        s.eval.kl_samples = args.kl_samples.unwrap_or(s.eval.kl_samples);
        if s.epochs == 0 || s.hidden == 0 {
            return Err(Failure::usage("epochs and hidden must be positive"));
        }
        let cmp = reproduce_family(&s, &root.join(family.to_string()))?;
        write!(out, "{}", cmp.table())?;
        if !cmp.passed() {
            code = EXIT_FAILED;
        }
    }
    writeln!(out, "wall time {:.1} s", started.elapsed().as_secs_f64())?;
    Ok(code)
}

/// Caps rayon's pool at `CU_NUM_THREADS` when set.
pub fn configure_threads() -> std::result::Result<(), Failure> {
    if let Ok(v) = std::env::var("CU_NUM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::usage(format!("CU_NUM_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Failure::usage("CU_NUM_THREADS must be positive"));
        }
        // a pool that is already initialized keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Selfcheck(a) => cmd_selfcheck(a, out),
        Command::Reproduce(a) => cmd_reproduce(a, out),
    });
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            if f.code == EXIT_USAGE {
                let _ = writeln!(err, "run `cu --help` for usage");
            }
            f.code
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli, out, err),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            code
        }
    }
}
