//! Command-line front end: dataset generation, training runs and
//! comparison reports.
//!
//! Exit codes: 0 success, 1 I/O or format failure, 2 invalid configuration,
//! 3 divergence.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{config_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_folds, default_class_names, records_to_csv, MetricsRecord};
use crate::phantom::{generate_dataset, load_dataset, make_folds, save_dataset, DatasetBundle, PhantomSpec};
use crate::plot::training_curves_svg;
use crate::segnet::{AugmentConfig, NormKind};
use crate::trainer::{make_method_state, EpochRecord, Method, TrainConfig, TrainState, TABLE1_SUITE, TABLE2_SUITE};

pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Environment variable capping the number of concurrent training workers.
pub const THREADS_ENV: &str = "DUALTEACHER_THREADS";

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CURVES_FILE: &str = "curves.svg";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_LAST: &str = "checkpoint_last.json";
pub const CHECKPOINT_BEST: &str = "checkpoint_best.json";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final.json";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) => EXIT_CONFIG,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        _ => EXIT_IO,
    }
}

#[derive(Debug, Parser)]
#[command(name = "dualteacher", version, about = "Dual-teacher semi-supervised domain adaptation on synthetic phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Commands,
}

#[derive(Debug, Subcommand)]
pub enum Commands {
    /// Generate a phantom dataset split into cross-validation folds.
    GenerateData(GenerateArgs),
    /// Train one method on one fold.
    Train(TrainArgs),
    /// Train (or collect) a grid of runs and print the aggregate table.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub n_source: usize,
    #[arg(long, default_value_t = 40)]
    pub n_target: usize,
    #[arg(long, default_value_t = 4)]
    pub folds: usize,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub labeled_frac: f64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Group,
    Batch,
}

/// Hyperparameter overrides shared by `train` and `compare`.
#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size of every stream.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_kd: Option<f64>,
    #[arg(long)]
    pub lambda_con_max: Option<f64>,
    #[arg(long)]
    pub ema_alpha: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub pseudo_threshold: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub ema_after_student: bool,
    #[arg(long)]
    pub no_augment: bool,
    /// Average the Dice loss over foreground classes only.
    #[arg(long)]
    pub dice_foreground_only: bool,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
}

impl HyperArgs {
    pub fn to_config(&self, method: Method, seed: u64, num_classes: usize) -> TrainConfig {
        let mut c = TrainConfig::new(method, seed).with_epochs(self.epochs);
        c.network.num_classes = num_classes;
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(b) = self.batch_size {
            c.batch_source = b;
            c.batch_target = b;
            c.batch_unlabeled = b;
        }
        if let Some(v) = self.lambda_kd {
            c.loss_weights.lambda_kd = v;
        }
        if let Some(v) = self.lambda_con_max {
            c.loss_weights.lambda_con_max = v;
        }
        if let Some(v) = self.ema_alpha {
            c.ema_alpha = v;
        }
        if let Some(v) = self.noise_sigma {
            c.noise_sigma = v;
        }
        if let Some(v) = self.pseudo_threshold {
            c.pseudo_label_threshold = v;
        }
        c.warmup_epochs = self.warmup_epochs;
        c.ema_after_student = self.ema_after_student;
        if self.no_augment {
            c.augment = AugmentConfig::disabled();
        }
        c.loss_weights.dice_include_background = !self.dice_foreground_only;
        if let Some(v) = self.base_channels {
            c.network.base_channels = v;
        }
        if let Some(v) = self.depth {
            c.network.depth = v;
        }
        if let Some(n) = self.norm {
            c.network.norm = match n {
                NormArg::Group => NormKind::Group,
                NormArg::Batch => NormKind::Batch,
            };
        }
        c
    }

    /// The same overrides as command-line flags, for worker processes.
    pub fn to_flags(&self) -> Vec<String> {
        let mut f = vec!["--epochs".to_string(), self.epochs.to_string()];
        let mut opt = |name: &str, v: Option<String>| {
            if let Some(v) = v {
                f.push(format!("--{name}"));
                f.push(v);
            }
        };
        opt("lr", self.lr.map(|v| v.to_string()));
        opt("batch-size", self.batch_size.map(|v| v.to_string()));
        opt("lambda-kd", self.lambda_kd.map(|v| v.to_string()));
        opt("lambda-con-max", self.lambda_con_max.map(|v| v.to_string()));
        opt("ema-alpha", self.ema_alpha.map(|v| v.to_string()));
        opt("noise-sigma", self.noise_sigma.map(|v| v.to_string()));
        opt("pseudo-threshold", self.pseudo_threshold.map(|v| v.to_string()));
        opt("warmup-epochs", self.warmup_epochs.map(|v| v.to_string()));
        opt("base-channels", self.base_channels.map(|v| v.to_string()));
        opt("depth", self.depth.map(|v| v.to_string()));
        opt(
            "norm",
            self.norm.map(|n| match n {
                NormArg::Group => "group".to_string(),
                NormArg::Batch => "batch".to_string(),
            }),
        );
        for (on, name) in [
            (self.ema_after_student, "--ema-after-student"),
            (self.no_augment, "--no-augment"),
            (self.dice_foreground_only, "--dice-foreground-only"),
        ] {
            if on {
                f.push(name.to_string());
            }
        }
        f
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub method: Method,
    /// Dataset root written by `generate-data`, or a single fold directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Continue from `<out>/checkpoint_last.json`.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many completed epochs (the run can be resumed).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Table1,
    Table2,
    All,
}

impl Suite {
    pub fn methods(self) -> Vec<Method> {
        match self {
            Suite::Table1 => TABLE1_SUITE.to_vec(),
            Suite::Table2 => TABLE2_SUITE.to_vec(),
            Suite::All => Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, value_enum, conflicts_with = "methods")]
    pub suite: Option<Suite>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<Method>,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated fold indices; defaults to every fold in the dataset.
    #[arg(long, value_delimiter = ',')]
    pub folds: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Only aggregate existing runs; fail if any is missing.
    #[arg(long)]
    pub report_only: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Commands::GenerateData(a) => cmd_generate_data(&a).map(|_| ()),
        Commands::Train(a) => cmd_train(&a).map(|_| ()),
        Commands::Compare(a) => {
            let text = cmd_compare(&a)?;
            print!("{text}");
            Ok(())
        }
    }
}

pub fn fold_dir(root: &Path, fold: usize) -> PathBuf {
    root.join(format!("fold{fold}"))
}

/// Writes `<out>/fold<k>/` for every fold; returns the fold directories.
pub fn cmd_generate_data(a: &GenerateArgs) -> Result<Vec<PathBuf>> {
    let spec = PhantomSpec::new(a.size, a.classes, a.seed);
    spec.validate()?;
    let samples = generate_dataset(&spec, a.n_source, a.n_target)?;
    let folds = make_folds(&samples, a.folds, a.labeled_frac, a.seed)?;
    let mut dirs = Vec::with_capacity(folds.len());
    for mut bundle in folds {
        bundle.spec = Some(spec.clone());
        let dir = fold_dir(&a.out, bundle.fold_index);
        save_dataset(&bundle, &dir)?;
        dirs.push(dir);
    }
    log::info!("wrote {} folds to {}", dirs.len(), a.out.display());
    Ok(dirs)
}

/// Resolves `--data`/`--fold` to a loaded bundle.
pub fn load_fold(data: &Path, fold: usize) -> Result<DatasetBundle> {
    let dir = if data.join("manifest.json").is_file() {
        data.to_path_buf()
    } else {
        fold_dir(data, fold)
    };
    if !dir.join("manifest.json").is_file() {
        return Err(Error::config(format!(
            "no manifest.json in {} (or its fold{fold} subdirectory)",
            data.display()
        )));
    }
    let bundle = load_dataset(&dir)?;
    if bundle.fold_index != fold {
        return Err(Error::config(format!(
            "{} holds fold {}, but --fold {fold} was requested",
            dir.display(),
            bundle.fold_index
        )));
    }
    Ok(bundle)
}

fn bundle_classes(bundle: &DatasetBundle) -> usize {
    match &bundle.spec {
        Some(s) => s.num_classes,
        None => {
            let max = bundle
                .all_samples()
                .filter_map(|s| s.label.as_ref().and_then(|l| l.max_class()))
                .max()
                .unwrap_or(1);
            max as usize + 1
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn record_line(r: &EpochRecord) -> String {
    serde_json::to_string(r).expect("record serializes") + "\n"
}

/// Reads a JSON-lines metrics file, ignoring a torn final line.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let n = lines.len();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == n => log::warn!("{}: ignoring incomplete final line", path.display()),
            Err(e) => return Err(Error::Format(format!("{} line {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

fn save_checkpoint(state: &TrainState<f32>, out: &Path, name: &str) -> Result<()> {
    Checkpoint::from_state(state).save(&out.join(name))
}

/// Runs (or resumes) one training run; returns the epoch records so far.
pub fn cmd_train(a: &TrainArgs) -> Result<Vec<EpochRecord>> {
    let bundle = load_fold(&a.data, a.fold)?;
    let config = a.hyper.to_config(a.method, a.seed, bundle_classes(&bundle));
    config.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let metrics_path = a.out.join(METRICS_FILE);
    let mut state: TrainState<f32> = if a.resume {
        let ck = Checkpoint::load(&a.out.join(CHECKPOINT_LAST))?;
        let want = config_hash(&config, a.fold);
        if ck.config_hash != want {
            return Err(Error::config(format!(
                "checkpoint in {} was written for a different configuration (hash {} vs {want})",
                a.out.display(),
                ck.config_hash
            )));
        }
        let state = TrainState::restore(ck.into_snapshot()?, &bundle)?;
        // drop lines written after the checkpoint
        let text: String = state.metrics_log.iter().map(record_line).collect();
        write_file(&metrics_path, text.as_bytes())?;
        state
    } else {
        let state = make_method_state(&config, &bundle)?;
        write_file(&metrics_path, b"")?;
        state
    };
    let config_json = serde_json::to_string_pretty(&config).expect("config serializes") + "\n";
    write_file(&a.out.join(CONFIG_FILE), config_json.as_bytes())?;

    let title = format!("{} (fold {}, seed {})", a.method, a.fold, a.seed);
    let mut metrics = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    while !state.is_finished() && a.stop_after.is_none_or(|s| state.epoch < s) {
        let record = state.run_epoch(&bundle)?;
        log::info!(
            "{} epoch {}/{}: loss {:.4} val dice {:.4}",
            a.method,
            record.epoch,
            config.epochs,
            record.losses.total,
            record.mean_dice
        );
        metrics
            .write_all(record_line(&record).as_bytes())
            .and_then(|_| metrics.flush())
            .map_err(|e| Error::io(&metrics_path, e))?;
        save_checkpoint(&state, &a.out, CHECKPOINT_LAST)?;
        if state.best.is_some_and(|b| b.epoch == record.epoch) {
            save_checkpoint(&state, &a.out, CHECKPOINT_BEST)?;
        }
        write_file(
            &a.out.join(CURVES_FILE),
            training_curves_svg(&title, &state.metrics_log).as_bytes(),
        )?;
    }
    if state.is_finished() {
        save_checkpoint(&state, &a.out, CHECKPOINT_FINAL)?;
    }
    Ok(state.metrics_log.clone())
}

pub fn cell_dir(out: &Path, method: Method, fold: usize, seed: u64) -> PathBuf {
    out.join(method.name()).join(format!("fold{fold}")).join(format!("seed{seed}"))
}

fn complete_record(dir: &Path, epochs: usize) -> Option<EpochRecord> {
    let log = read_metrics(&dir.join(METRICS_FILE)).ok()?;
    (log.len() >= epochs).then(|| log[epochs - 1].clone())
}

fn available_folds(data: &Path) -> Result<Vec<usize>> {
    if data.join("manifest.json").is_file() {
        return Ok(vec![load_dataset(data)?.fold_index]);
    }
    let mut folds = BTreeSet::new();
    let entries = fs::read_dir(data).map_err(|e| Error::io(data, e))?;
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(k) = name.strip_prefix("fold").and_then(|k| k.parse().ok()) {
            if e.path().join("manifest.json").is_file() {
                folds.insert(k);
            }
        }
    }
    if folds.is_empty() {
        return Err(Error::config(format!("no fold directories under {}", data.display())));
    }
    Ok(folds.into_iter().collect())
}

pub fn worker_limit() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn spawn_worker(a: &CompareArgs, method: Method, fold: usize, seed: u64, dir: &Path) -> Result<Child> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let resume = dir.join(CHECKPOINT_LAST).is_file();
    let mut cmd = Command::new(exe);
    cmd.arg("train")
        .args(["--method", method.name()])
        .arg("--data")
        .arg(&a.data)
        .args(["--fold", &fold.to_string(), "--seed", &seed.to_string()])
        .arg("--out")
        .arg(dir)
        .args(a.hyper.to_flags());
    if resume {
        cmd.arg("--resume");
    }
    cmd.spawn().map_err(|e| Error::io("worker process", e))
}

/// Runs every missing (method, fold, seed) cell, then aggregates the
/// final-epoch validation records. Returns the rendered text table.
pub fn cmd_compare(a: &CompareArgs) -> Result<String> {
    let methods = match (a.suite, a.methods.is_empty()) {
        (Some(s), _) => s.methods(),
        (None, false) => a.methods.clone(),
        (None, true) => return Err(Error::config("pass --suite or --methods")),
    };
    let folds = if a.folds.is_empty() { available_folds(&a.data)? } else { a.folds.clone() };
    if a.seeds.is_empty() {
        return Err(Error::config("--seeds is empty"));
    }
    let epochs = a.hyper.epochs;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let mut cells = Vec::new();
    for &m in &methods {
        for &f in &folds {
            for &s in &a.seeds {
                cells.push((m, f, s));
            }
        }
    }
    let pending: Vec<_> = cells
        .iter()
        .filter(|&&(m, f, s)| complete_record(&cell_dir(&a.out, m, f, s), epochs).is_none())
        .copied()
        .collect();

    if !a.report_only && !pending.is_empty() {
        let limit = worker_limit();
        log::info!("running {} cells with up to {limit} workers", pending.len());
        let mut queue = pending.iter();
        let mut running: Vec<(Child, String)> = Vec::new();
        let mut failures = Vec::new();
        loop {
            while running.len() < limit {
                let Some(&(m, f, s)) = queue.next() else { break };
                let dir = cell_dir(&a.out, m, f, s);
                running.push((spawn_worker(a, m, f, s, &dir)?, format!("({m}, fold {f}, seed {s})")));
            }
            if running.is_empty() {
                break;
            }
            let (mut child, label) = running.remove(0);
            let status = child.wait().map_err(|e| Error::io("worker process", e))?;
            if !status.success() {
                failures.push(format!("{label} exited with {status}"));
            }
        }
        if !failures.is_empty() {
            log::warn!("failed runs: {}", failures.join("; "));
        }
    }

    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut missing = Vec::new();
    let mut n_val = 0;
    for &(m, f, s) in &cells {
        match complete_record(&cell_dir(&a.out, m, f, s), epochs) {
            Some(r) => {
                if n_val == 0 {
                    n_val = load_fold(&a.data, f).map(|b| b.val.len()).unwrap_or(0);
                }
                records.push(r.to_metrics(n_val));
            }
            None => missing.push(format!("({m}, fold {f}, seed {s})")),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Report(format!("missing runs: {}", missing.join(", "))));
    }
    let classes = records.first().map_or(0, |r| r.per_class_dice.len()) + 1;
    let names = default_class_names(classes);
    let report = aggregate_folds(&records, &names)?;
    let text = report.render_text();
    write_file(&a.out.join("report.txt"), text.as_bytes())?;
    write_file(&a.out.join("report.csv"), report.to_csv().as_bytes())?;
    write_file(&a.out.join("records.csv"), records_to_csv(&records, &names).as_bytes())?;
    Ok(text)
}
