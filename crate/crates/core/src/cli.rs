//! Command-line front end: `train`, `eval`, `gradcheck` and `inspect`.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_cifar10, load_cifar100, synthetic_split, Colorspace, Dataset};
use crate::error::Error;
use crate::gradcheck::{run_suite, SuiteOptions};
use crate::hope::{ortho_measure, penalty_value, row_norm_range};
use crate::model::{
    read_checkpoint, save_checkpoint, stacked_config, Architecture, Checkpoint, Network,
    NetworkConfig,
};
use crate::optim::{Hyperparameters, TrainState};
use crate::scalar::Scalar;
use crate::train::{evaluate, run_epoch, EpochMetrics, METRICS_HEADER};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ROLLING_CHECKPOINT: &str = "checkpoint.bin";
pub const FINAL_CHECKPOINT: &str = "final.bin";
pub const SUMMARY_FILE: &str = "summary.txt";

const SYNTHETIC_CLASSES: usize = 10;
const SYNTHETIC_TRAIN: usize = 5000;
const SYNTHETIC_VAL: usize = 1000;

#[derive(Debug, Parser)]
#[command(
    name = "hope-cnn",
    version,
    about = "Train and inspect CNNs with orthogonal projection layers"
)]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network, writing metrics and checkpoints to --out-dir.
    Train(TrainArgs),
    /// Validation error and per-class accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Orthogonality diagnostics for the projection layers.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Builtin architecture name.
    #[arg(long, default_value = "hope_input")]
    pub arch: Architecture,
    /// Number of conv blocks of the builtin architecture to keep (1-5).
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub blocks: u8,
    /// Architecture file; overrides --arch.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ModelArgs {
    fn network_config(&self, classes: usize) -> anyhow::Result<NetworkConfig> {
        match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let config = NetworkConfig::parse(&text)
                    .with_context(|| format!("parsing {}", path.display()))?;
                if config.num_classes != classes {
                    return Err(Error::ClassMismatch {
                        network: config.num_classes,
                        dataset: classes,
                    }
                    .into());
                }
                Ok(config)
            }
            None => Ok(stacked_config(self.arch, classes, usize::from(self.blocks))),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Directory holding the CIFAR binary files (or their parent).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub colorspace: Option<Colorspace>,
    /// Keep only the first N training records (synthetic: generate N).
    #[arg(long)]
    pub limit_train: Option<usize>,
    /// Keep only the first N validation records (synthetic: generate N).
    #[arg(long)]
    pub limit_val: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub beta0: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Continue from a checkpoint; data and precision settings come from it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write 0 in the seconds column so metrics files are reproducible.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the settings recorded in the checkpoint.
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Offset added to the analytic penalty gradient (negative control).
    #[arg(long, hide = true, default_value_t = 0.0)]
    pub inject_penalty_fault: f64,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    /// Inspect a saved network instead of a fresh one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Print the architecture file and exit.
    #[arg(long)]
    pub dump_config: bool,
}

/// Resolved dataset settings, also recorded in checkpoint metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub colorspace: Colorspace,
    pub limit_train: Option<usize>,
    pub limit_val: Option<usize>,
    /// Only used by the synthetic generator.
    pub seed: u64,
}

impl DataSpec {
    fn from_args(args: &DataArgs, seed: u64) -> Self {
        Self {
            dataset: args.dataset.unwrap_or(DatasetKind::Cifar10),
            data_dir: args
                .data_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("data")),
            colorspace: args.colorspace.unwrap_or_default(),
            limit_train: args.limit_train,
            limit_val: args.limit_val,
            seed,
        }
    }

    fn to_meta(&self) -> Vec<(String, String)> {
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |n| n.to_string());
        vec![
            ("dataset".into(), self.dataset.to_string()),
            ("data_dir".into(), self.data_dir.display().to_string()),
            ("colorspace".into(), self.colorspace.to_string()),
            ("limit_train".into(), opt(self.limit_train)),
            ("limit_val".into(), opt(self.limit_val)),
            ("data_seed".into(), self.seed.to_string()),
        ]
    }

    fn from_meta(ckpt: &Checkpoint) -> anyhow::Result<Self> {
        let get = |key: &str| {
            ckpt.meta(key)
                .with_context(|| format!("checkpoint metadata lacks `{key}`"))
        };
        let opt = |key: &str| -> anyhow::Result<Option<usize>> {
            match get(key)? {
                "none" => Ok(None),
                v => Ok(Some(
                    v.parse()
                        .with_context(|| format!("bad `{key}` value {v}"))?,
                )),
            }
        };
        Ok(Self {
            dataset: DatasetKind::from_str(get("dataset")?, true).map_err(anyhow::Error::msg)?,
            data_dir: PathBuf::from(get("data_dir")?),
            colorspace: get("colorspace")?.parse()?,
            limit_train: opt("limit_train")?,
            limit_val: opt("limit_val")?,
            seed: get("data_seed")?.parse()?,
        })
    }

    /// Explicit flags win over the recorded settings.
    fn overlay(mut self, args: &DataArgs) -> Self {
        if let Some(d) = args.dataset {
            self.dataset = d;
        }
        if let Some(d) = &args.data_dir {
            self.data_dir = d.clone();
        }
        if let Some(c) = args.colorspace {
            self.colorspace = c;
        }
        if args.limit_train.is_some() {
            self.limit_train = args.limit_train;
        }
        if args.limit_val.is_some() {
            self.limit_val = args.limit_val;
        }
        self
    }

    pub fn num_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
            DatasetKind::Synthetic => SYNTHETIC_CLASSES,
        }
    }

    pub fn load<T: Scalar>(&self) -> anyhow::Result<(Dataset<T>, Dataset<T>)> {
        let loaded = match self.dataset {
            DatasetKind::Cifar10 => load_cifar10(
                &self.data_dir,
                self.colorspace,
                self.limit_train,
                self.limit_val,
            ),
            DatasetKind::Cifar100 => load_cifar100(
                &self.data_dir,
                self.colorspace,
                self.limit_train,
                self.limit_val,
            ),
            DatasetKind::Synthetic => synthetic_split(
                self.limit_train.unwrap_or(SYNTHETIC_TRAIN),
                self.limit_val.unwrap_or(SYNTHETIC_VAL),
                SYNTHETIC_CLASSES,
                self.seed,
                self.colorspace,
            ),
        };
        loaded.with_context(|| format!("loading {} from {}", self.dataset, self.data_dir.display()))
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; errors go to stderr, reports to `out`.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let config = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&config, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Runs a parsed command and returns its exit code.
pub fn execute(config: &RunConfig, out: &mut dyn Write) -> anyhow::Result<i32> {
    match &config.command {
        Command::Train(args) => cmd_train(args, out),
        Command::Eval(args) => cmd_eval(args, out),
        Command::Gradcheck(args) => cmd_gradcheck(args, out),
        Command::Inspect(args) => cmd_inspect(args, out),
    }
}

fn precision_of(ckpt: &Checkpoint) -> anyhow::Result<Precision> {
    match ckpt.meta("precision") {
        Some(p) => Precision::from_str(p, true).map_err(anyhow::Error::msg),
        None => Ok(Precision::F32),
    }
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    match &args.resume {
        Some(path) => {
            let ckpt =
                read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
            match precision_of(&ckpt)? {
                Precision::F32 => resume_run::<f32>(args, ckpt, out),
                Precision::F64 => resume_run::<f64>(args, ckpt, out),
            }
        }
        None => match args.precision {
            Precision::F32 => fresh_run::<f32>(args, out),
            Precision::F64 => fresh_run::<f64>(args, out),
        },
    }
}

fn hyperparameters(args: &TrainArgs, mut h: Hyperparameters) -> anyhow::Result<Hyperparameters> {
    if let Some(v) = args.epochs {
        h.epochs = v;
    }
    if let Some(v) = args.batch {
        h.batch = v;
    }
    if let Some(v) = args.lr0 {
        h.lr0 = v;
    }
    if let Some(v) = args.beta0 {
        h.beta0 = v;
    }
    h.validate()?;
    Ok(h)
}

fn fresh_run<T: Scalar>(args: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let spec = DataSpec::from_args(&args.data, args.seed);
    let config = args.model.network_config(spec.num_classes())?;
    let net = Network::<T>::build(&config, args.seed)?;
    let hyper = hyperparameters(args, Hyperparameters::default())?;
    let state = TrainState::new(&net, hyper, args.seed)?;
    let (train, val) = spec.load::<T>()?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    fs::write(
        args.out_dir.join(METRICS_FILE),
        format!("{METRICS_HEADER}\n"),
    )?;
    train_loop(args, &spec, net, state, &train, &val, out)
}

fn resume_run<T: Scalar>(
    args: &TrainArgs,
    ckpt: Checkpoint,
    out: &mut dyn Write,
) -> anyhow::Result<i32> {
    let spec = DataSpec::from_meta(&ckpt)?;
    let (net, mut state) = ckpt.restore::<T>()?;
    state.hyper = hyperparameters(args, state.hyper)?;
    let (train, val) = spec.load::<T>()?;
    if train.num_classes != net.num_classes() {
        return Err(Error::ClassMismatch {
            network: net.num_classes(),
            dataset: train.num_classes,
        }
        .into());
    }
    fs::create_dir_all(&args.out_dir)?;
    truncate_metrics(&args.out_dir.join(METRICS_FILE), state.epoch)?;
    train_loop(args, &spec, net, state, &train, &val, out)
}

/// Keeps the header and the rows of epochs `1..=epochs`.
fn truncate_metrics(path: &Path, epochs: usize) -> anyhow::Result<()> {
    let mut text = format!("{METRICS_HEADER}\n");
    if let Ok(existing) = fs::read_to_string(path) {
        for line in existing.lines().skip(1) {
            let epoch: usize = line
                .split(',')
                .next()
                .and_then(|e| e.parse().ok())
                .with_context(|| format!("malformed row in {}: {line}", path.display()))?;
            if epoch <= epochs {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn train_loop<T: Scalar>(
    args: &TrainArgs,
    spec: &DataSpec,
    mut net: Network<T>,
    mut state: TrainState<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    out: &mut dyn Write,
) -> anyhow::Result<i32> {
    let precision = if std::mem::size_of::<T>() == 4 {
        Precision::F32
    } else {
        Precision::F64
    };
    let mut meta = spec.to_meta();
    meta.push(("precision".into(), precision.to_string()));
    meta.push(("network".into(), net.config().name.clone()));
    let metrics_path = args.out_dir.join(METRICS_FILE);
    let mut history = Vec::new();
    writeln!(
        out,
        "{}: {} parameters, {} train / {} val, epochs {}..{}",
        net.config().name,
        net.param_count(),
        train.len(),
        val.len(),
        state.epoch + 1,
        state.hyper.epochs
    )?;
    while state.epoch < state.hyper.epochs {
        let m = run_epoch(&mut net, &mut state, train, val, !args.no_timing)?;
        let mut file = fs::OpenOptions::new().append(true).open(&metrics_path)?;
        writeln!(file, "{m}")?;
        save_checkpoint(
            &net,
            &state,
            meta.clone(),
            &args.out_dir.join(ROLLING_CHECKPOINT),
        )
        .context("writing rolling checkpoint")?;
        writeln!(
            out,
            "epoch {:>3}  loss {:.4}  train_err {:.4}  val_err {:.4}  penalty {:.4}  ortho {:.4}",
            m.epoch, m.train_loss, m.train_err, m.val_err, m.penalty_sum, m.ortho_max
        )?;
        history.push(m);
    }
    save_checkpoint(&net, &state, meta, &args.out_dir.join(FINAL_CHECKPOINT))
        .context("writing final checkpoint")?;
    fs::write(
        args.out_dir.join(SUMMARY_FILE),
        summary(&net, &state, &history),
    )?;
    Ok(0)
}

fn summary<T: Scalar>(net: &Network<T>, state: &TrainState<T>, history: &[EpochMetrics]) -> String {
    let mut s = format!("network {}\nepochs {}\n", net.config().name, state.epoch);
    if let Some(last) = history.last() {
        s += &format!(
            "final_val_err {}\nfinal_train_loss {}\npenalty_sum {}\northo_max {}\n",
            last.val_err, last.train_loss, last.penalty_sum, last.ortho_max
        );
    }
    if let Some(best) = history
        .iter()
        .min_by(|a, b| a.val_err.total_cmp(&b.val_err))
    {
        s += &format!("best_val_err {} (epoch {})\n", best.val_err, best.epoch);
    }
    s
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let ckpt = read_checkpoint(&args.checkpoint)
        .with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let spec = match DataSpec::from_meta(&ckpt) {
        Ok(recorded) => recorded.overlay(&args.data),
        Err(_) => DataSpec::from_args(&args.data, ckpt.seed),
    };
    match precision_of(&ckpt)? {
        Precision::F32 => eval_with::<f32>(&ckpt, &spec, args.batch, out),
        Precision::F64 => eval_with::<f64>(&ckpt, &spec, args.batch, out),
    }
}

fn eval_with<T: Scalar>(
    ckpt: &Checkpoint,
    spec: &DataSpec,
    batch: usize,
    out: &mut dyn Write,
) -> anyhow::Result<i32> {
    let (net, _) = ckpt.restore::<T>()?;
    if spec.num_classes() != net.num_classes() {
        return Err(Error::ClassMismatch {
            network: net.num_classes(),
            dataset: spec.num_classes(),
        }
        .into());
    }
    let (_, val) = spec.load::<T>()?;
    let e = evaluate(&net, &val, batch)?;
    writeln!(out, "network {} (epoch {})", net.config().name, ckpt.epoch)?;
    writeln!(out, "val_loss {}", e.loss)?;
    writeln!(out, "val_err {}", e.error)?;
    for (c, acc) in e.per_class.iter().enumerate() {
        writeln!(out, "class {c:>3} accuracy {acc:.4}")?;
    }
    Ok(0)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let results = run_suite(SuiteOptions {
        penalty_fault: args.inject_penalty_fault,
    })?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        writeln!(
            out,
            "{:<28} {:.3e}  < {:.0e}  {verdict}",
            r.name, r.error, r.threshold
        )?;
        if !r.passed() {
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        writeln!(out, "all {} checks passed", results.len())?;
        Ok(0)
    } else {
        writeln!(out, "failed: {}", failed.join(", "))?;
        Ok(1)
    }
}

pub fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let (net, origin) = match &args.checkpoint {
        Some(path) => {
            let ckpt =
                read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
            let (net, _) = ckpt.restore::<f64>()?;
            (net, format!("{} (epoch {})", path.display(), ckpt.epoch))
        }
        None => {
            let config = args.model.network_config(args.classes)?;
            (
                Network::<f64>::build(&config, args.seed)?,
                format!("fresh, seed {}", args.seed),
            )
        }
    };
    if args.dump_config {
        write!(out, "{}", net.config().to_text())?;
        return Ok(0);
    }
    writeln!(
        out,
        "network {} [{origin}], {} parameters",
        net.config().name,
        net.param_count()
    )?;
    let mut constrained = 0;
    for (index, p) in net.projections() {
        let (lo, hi) = row_norm_range(&p.u);
        writeln!(
            out,
            "layer {index} {} {}x{}: penalty_value {:.6}  ortho_measure {:.6}  row_norm [{:.4}, {:.4}]",
            if p.constrained { "hope_projection" } else { "lin_projection" },
            p.u.rows(),
            p.u.cols(),
            penalty_value(&p.u)?,
            ortho_measure(&p.u)?,
            lo,
            hi
        )?;
        constrained += usize::from(p.constrained);
    }
    if constrained == 0 {
        writeln!(out, "no constrained layers")?;
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_config;

    const MINI: &str = "network name=mini classes=10 input=3x32x32\n\
        hope_projection kernel=3 maps=8 stride=1 pad=1\n\
        conv kernel=3 maps=8 stride=1 pad=1\n\
        batchnorm\nrelu\n\
        maxpool size=4 stride=4\n\
        maxpool size=4 stride=4\n\
        dense units=10\nsoftmax_ce\n";

    fn call(args: &[&str]) -> (i32, String) {
        let mut out = Vec::new();
        let code = run(
            std::iter::once("hope-cnn").chain(args.iter().copied()),
            &mut out,
        );
        (code, String::from_utf8(out).unwrap())
    }

    fn mini_config(dir: &Path, text: &str) -> String {
        let path = dir.join("mini.cfg");
        fs::write(&path, text).unwrap();
        path.display().to_string()
    }

    fn train(config: &str, out_dir: &Path, extra: &[&str]) -> i32 {
        let out = out_dir.display().to_string();
        let mut args = vec![
            "train",
            "--config",
            config,
            "--dataset",
            "synthetic",
            "--limit-train",
            "60",
            "--limit-val",
            "40",
            "--batch",
            "20",
            "--no-timing",
            "--out-dir",
            &out,
        ];
        args.extend_from_slice(extra);
        call(&args).0
    }

    fn metrics(dir: &Path) -> String {
        fs::read_to_string(dir.join(METRICS_FILE)).unwrap()
    }

    #[test]
    fn train_writes_rows_checkpoints_and_summary() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = mini_config(tmp.path(), MINI);
        let run_dir = tmp.path().join("run");
        assert_eq!(train(&cfg, &run_dir, &["--epochs", "2"]), 0);
        let text = metrics(&run_dir);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], METRICS_HEADER);
        assert!(lines[2].starts_with("2,"));
        for f in [ROLLING_CHECKPOINT, FINAL_CHECKPOINT, SUMMARY_FILE] {
            assert!(run_dir.join(f).exists(), "{f}");
        }
        let ckpt = read_checkpoint(&run_dir.join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(ckpt.epoch, 2);
        assert_eq!(ckpt.meta("dataset"), Some("synthetic"));
        assert_eq!(ckpt.meta("precision"), Some("f32"));
    }

    #[test]
    fn penalty_column_is_zero_without_projections() {
        let tmp = tempfile::tempdir().unwrap();
        let plain = MINI.replace("hope_projection kernel=3 maps=8 stride=1 pad=1\n", "");
        let cfg = mini_config(tmp.path(), &plain);
        assert_eq!(train(&cfg, tmp.path(), &["--epochs", "1"]), 0);
        let text = metrics(tmp.path());
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!((row[6], row[7]), ("0", "0"));
    }

    #[test]
    fn identical_runs_give_identical_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = mini_config(tmp.path(), MINI);
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        assert_eq!(train(&cfg, &a, &["--epochs", "2"]), 0);
        assert_eq!(train(&cfg, &b, &["--epochs", "2"]), 0);
        assert_eq!(metrics(&a), metrics(&b));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = mini_config(tmp.path(), MINI);
        let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
        assert_eq!(train(&cfg, &full, &["--epochs", "3"]), 0);
        assert_eq!(train(&cfg, &split, &["--epochs", "2"]), 0);
        let first = split.join("first.bin");
        fs::copy(split.join(ROLLING_CHECKPOINT), &first).unwrap();
        // a stale row past the checkpoint must be dropped on resume
        let mut stale = metrics(&split);
        stale.push_str("3,9,9,9,9,9,9,9,0.000\n");
        fs::write(split.join(METRICS_FILE), stale).unwrap();
        let resume = first.display().to_string();
        assert_eq!(
            train(&cfg, &split, &["--epochs", "3", "--resume", &resume]),
            0
        );
        assert_eq!(metrics(&split), metrics(&full));
        assert_eq!(
            fs::read(split.join(FINAL_CHECKPOINT)).unwrap(),
            fs::read(full.join(FINAL_CHECKPOINT)).unwrap()
        );
    }

    #[test]
    fn eval_is_repeatable_and_checks_classes() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = mini_config(tmp.path(), MINI);
        assert_eq!(train(&cfg, tmp.path(), &["--epochs", "1"]), 0);
        let ckpt = tmp.path().join(FINAL_CHECKPOINT).display().to_string();
        let (c1, o1) = call(&["eval", "--checkpoint", &ckpt]);
        let (c2, o2) = call(&["eval", "--checkpoint", &ckpt]);
        assert_eq!((c1, c2), (0, 0));
        assert_eq!(o1, o2);
        assert!(o1.contains("val_err "));
        assert_eq!(o1.lines().filter(|l| l.starts_with("class")).count(), 10);
        let (code, _) = call(&["eval", "--checkpoint", &ckpt, "--dataset", "cifar100"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn config_class_mismatch_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = mini_config(
            tmp.path(),
            &MINI
                .replace("classes=10", "classes=4")
                .replace("units=10", "units=4"),
        );
        assert_eq!(train(&cfg, tmp.path(), &["--epochs", "1"]), 1);
    }

    #[test]
    fn gradcheck_exit_codes() {
        let (code, out) = call(&["gradcheck"]);
        assert_eq!(code, 0, "{out}");
        assert!(out.contains("all "));
        let (code, out) = call(&["gradcheck", "--inject-penalty-fault", "1e-4"]);
        assert_eq!(code, 1);
        assert!(out.lines().last().unwrap().contains("penalty/u"));
    }

    #[test]
    fn inspect_reports_projections() {
        let (code, out) = call(&["inspect", "--arch", "hope_input"]);
        assert_eq!(code, 0);
        let line = out.lines().find(|l| l.contains("hope_projection")).unwrap();
        let value: f64 = line
            .split("penalty_value ")
            .nth(1)
            .unwrap()
            .split_whitespace()
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert!(value > 0.0);
        let (_, out) = call(&["inspect", "--arch", "baseline"]);
        assert!(out.contains("no constrained layers"));
        let (_, out) = call(&["inspect", "--arch", "lin_input"]);
        assert!(out.contains("lin_projection") && out.contains("no constrained layers"));
    }

    #[test]
    fn inspect_reads_checkpoints() {
        let tmp = tempfile::tempdir().unwrap();
        let plain = MINI.replace("hope_projection kernel=3 maps=8 stride=1 pad=1\n", "");
        let cfg = mini_config(tmp.path(), &plain);
        assert_eq!(train(&cfg, tmp.path(), &["--epochs", "1"]), 0);
        let ckpt = tmp.path().join(FINAL_CHECKPOINT).display().to_string();
        let (code, out) = call(&["inspect", "--checkpoint", &ckpt]);
        assert_eq!(code, 0);
        assert!(out.contains("no constrained layers"));
        let (code, _) = call(&["inspect", "--checkpoint", "/nonexistent/x.bin"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn dump_config_round_trips() {
        for arch in Architecture::ALL {
            let (code, out) = call(&["inspect", "--arch", arch.name(), "--dump-config"]);
            assert_eq!(code, 0);
            assert_eq!(
                NetworkConfig::parse(&out).unwrap().canonical().unwrap(),
                builtin_config(arch, 10).canonical().unwrap()
            );
        }
    }

    #[test]
    fn bad_arguments_exit_nonzero() {
        assert_eq!(call(&["train", "--arch", "resnet"]).0, 2);
        assert_eq!(call(&["train", "--dataset", "mnist"]).0, 2);
        assert_eq!(call(&["train", "--blocks", "6"]).0, 2);
        assert_eq!(call(&[]).0, 2);
        let tmp = tempfile::tempdir().unwrap();
        let missing = tmp.path().join("nothing");
        let out = tmp.path().join("out").display().to_string();
        let code = call(&[
            "train",
            "--dataset",
            "cifar10",
            "--data-dir",
            &missing.display().to_string(),
            "--out-dir",
            &out,
        ])
        .0;
        assert_eq!(code, 1);
    }
}
