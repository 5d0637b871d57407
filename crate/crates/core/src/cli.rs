//! Command-line front end: argument parsing, verb dispatch, and the run
//! manifest.
//!
//! Every verb writes its artifacts under one output directory and appends an
//! entry to `manifest.json` there. Failures print a single JSON object on
//! stderr and map to a nonzero exit code.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{config_diff, config_hash, load_config, to_config_string};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_suite, grad_suite_csv, GradTarget, DEFAULT_BATCHES, DEFAULT_TOLERANCE};
use crate::inference::{evaluate, predictions_csv};
use crate::tasks::{export_csv, import_csv, make_stream, SampleSource, TaskDataset};
use crate::theory::{bounds_csv, verify_bounds, MIN_SAMPLES};
use crate::trainer::{load_checkpoint, run_to_dir_with, save_checkpoint, ExperimentConfig, Report};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

/// Final model state written by `train` and read by `eval`.
pub const MODEL_FILE: &str = "model.ckpt";

#[derive(Debug, Parser)]
#[command(
    name = "dcnet",
    version,
    about = "Class-incremental training, evaluation and bound checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Progress on stderr; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the configured task stream and write it as data.csv.
    GenData,
    /// Train on every task and write metrics, report, predictions and embeddings.
    Train {
        /// Dataset written by gen-data instead of the generated stream.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Re-score a trained run on the test splits.
    Eval {
        /// Directory of a finished `train` run.
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Monte Carlo check of the separation bounds on random mixtures.
    VerifyBounds {
        #[arg(long, default_value_t = 200)]
        specs: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Finite-difference check of the loss and network gradients.
    GradCheck {
        #[arg(long, default_value_t = DEFAULT_BATCHES)]
        batches: usize,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Consolidate a run directory into summary.json and print a table.
    Report {
        run: PathBuf,
        /// Second run to diff against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

impl Command {
    pub fn verb(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::VerifyBounds { .. } => "verify-bounds",
            Command::GradCheck { .. } => "grad-check",
            Command::Report { .. } => "report",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub verb: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_source: Option<String>,
    pub config_sha256: String,
    pub workers: usize,
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: Vec<ManifestEntry>,
}

/// Consolidated view of one run, written by `report`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub run: String,
    pub tasks: usize,
    pub a_last: f64,
    pub a_inc: f64,
    pub oracle_a_last: f64,
    pub oracle_a_inc: f64,
    pub acc_matrix: Vec<Vec<f64>>,
    pub omega_start: Vec<f64>,
    pub omega_end: Vec<f64>,
    pub tau: Vec<f64>,
    pub mask_saturation: Vec<f64>,
    pub max_abs_cos: f64,
    pub mean_abs_cos: f64,
    pub embedding_separation: f64,
    pub warnings: Vec<String>,
    pub baseline: Option<BaselineDiff>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigChange {
    pub key: String,
    pub run: String,
    pub baseline: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineDiff {
    pub run: String,
    pub config_changes: Vec<ConfigChange>,
    pub a_last_delta: f64,
    pub a_inc_delta: f64,
}

/// Parsed arguments plus the resolved configuration.
struct Ctx {
    cli: Cli,
    cfg: ExperimentConfig,
    workers: usize,
}

impl Ctx {
    fn log(&self, level: u8, msg: impl AsRef<str>) {
        if self.cli.verbose >= level {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn out_dir(&self, fallback: Option<&Path>) -> Result<PathBuf> {
        self.cli
            .out
            .clone()
            .or_else(|| fallback.map(Path::to_path_buf))
            .or_else(|| self.cfg.output_dir.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set output.dir".into()))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn artifact(dir: &Path, path: &Path) -> Result<Artifact> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let rel = path.strip_prefix(dir).unwrap_or(path);
    Ok(Artifact {
        path: rel.display().to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

/// Appends `entry` to `dir/manifest.json`, starting a new manifest when the
/// file is absent.
pub fn append_manifest(dir: &Path, entry: ManifestEntry) -> Result<PathBuf> {
    let path = dir.join("manifest.json");
    let mut manifest = match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice::<Manifest>(&bytes)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest::default(),
        Err(e) => return Err(Error::io(&path, e)),
    };
    manifest.runs.push(entry);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok(path)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::MissingArtifact(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn load_tasks(ctx: &Ctx, data: Option<&Path>) -> Result<Vec<TaskDataset>> {
    match data {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let tasks = import_csv(&text)?;
            ctx.log(1, format!("read {} tasks from {}", tasks.len(), path.display()));
            Ok(tasks)
        }
        None => Ok(make_stream(&ctx.cfg.stream_spec())?.tasks),
    }
}

fn gen_data(ctx: &Ctx, out: &Path) -> Result<Vec<PathBuf>> {
    let stream = make_stream(&ctx.cfg.stream_spec())?;
    let path = out.join("data.csv");
    write_file(&path, export_csv(&stream).as_bytes())?;
    println!(
        "{} tasks, {} classes -> {}",
        stream.len(),
        stream.total_classes(),
        path.display()
    );
    Ok(vec![path])
}

fn train(ctx: &Ctx, out: &Path, data: Option<&Path>, resume: bool) -> Result<Vec<PathBuf>> {
    let tasks = load_tasks(ctx, data)?;
    let cfg_path = out.join("config.cfg");
    write_file(&cfg_path, to_config_string(&ctx.cfg).as_bytes())?;
    let result = run_to_dir_with(&ctx.cfg, &tasks, out, resume, |s| {
        if let Some(sum) = s.summaries.last() {
            ctx.log(
                1,
                format!(
                    "task {}: cil {:.4} oracle {:.4} omega {:.4} tau {:.4} saturation {:.3}",
                    sum.task,
                    sum.cil.iter().sum::<f64>() / sum.cil.len() as f64,
                    sum.oracle.iter().sum::<f64>() / sum.oracle.len() as f64,
                    sum.omega_end,
                    sum.tau,
                    sum.mask_saturation
                ),
            );
        }
        Ok(())
    })?;
    let model = out.join(MODEL_FILE);
    save_checkpoint(&result.state, &model)?;
    let r = &result.report;
    println!(
        "A_last {:.4}  A_inc {:.4}  oracle A_last {:.4}  ({} tasks) -> {}",
        r.a_last,
        r.a_inc,
        r.oracle_a_last,
        r.tasks,
        out.display()
    );
    let mut files = vec![cfg_path, model];
    for name in [
        "metrics.csv",
        "report.json",
        "predictions.csv",
        "embeddings.csv",
        "basis.bin",
    ] {
        files.push(out.join(name));
    }
    if ctx.cfg.checkpoints {
        for t in 1..=result.state.task {
            files.push(crate::trainer::checkpoint_path(out, t));
        }
    }
    Ok(files)
}

#[derive(Serialize)]
struct EvalOutput {
    run: String,
    tasks: usize,
    cil: Vec<f64>,
    oracle: Vec<f64>,
    overall_cil: f64,
    overall_oracle: f64,
}

fn eval(ctx: &Ctx, run: &Path, out: &Path, data: Option<&Path>) -> Result<Vec<PathBuf>> {
    let model = run.join(MODEL_FILE);
    if !model.is_file() {
        return Err(Error::MissingArtifact(model));
    }
    let state = load_checkpoint(&model)?;
    let tasks = match data {
        Some(_) => load_tasks(ctx, data)?,
        None => make_stream(&state.config.stream_spec())?.tasks,
    };
    if tasks.len() < state.task {
        return Err(Error::Config(format!(
            "the model has {} tasks but the data only {}",
            state.task,
            tasks.len()
        )));
    }
    let splits: Vec<_> = tasks[..state.task].iter().map(TaskDataset::test_split).collect();
    let refs: Vec<&dyn SampleSource> = splits.iter().map(|s| s as &dyn SampleSource).collect();
    let ev = evaluate(&state.classifier(), &refs)?;
    let (overall_cil, overall_oracle) = ev.overall();
    let summary = EvalOutput {
        run: run.display().to_string(),
        tasks: state.task,
        cil: ev.cil.clone(),
        oracle: ev.oracle.clone(),
        overall_cil,
        overall_oracle,
    };
    let json_path = out.join("eval.json");
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write_file(&json_path, json.as_bytes())?;
    let pred_path = out.join("predictions.csv");
    write_file(&pred_path, predictions_csv(&ev.predictions).as_bytes())?;
    println!(
        "cil {overall_cil:.4}  oracle {overall_oracle:.4}  ({} tasks)",
        state.task
    );
    Ok(vec![json_path, pred_path])
}

fn verify(ctx: &Ctx, out: &Path, specs: usize, samples: usize) -> Result<Vec<PathBuf>> {
    if samples < MIN_SAMPLES {
        return Err(Error::Config(format!("--samples must be at least {MIN_SAMPLES}")));
    }
    let started = Instant::now();
    let rows = verify_bounds(specs, ctx.cfg.seed, samples, ctx.workers)?;
    let path = out.join("bounds.csv");
    write_file(&path, bounds_csv(&rows).as_bytes())?;
    let failed = rows.iter().filter(|r| !r.all_pass()).count();
    println!(
        "{} specs, {} failing, {:.1}s -> {}",
        rows.len(),
        failed,
        started.elapsed().as_secs_f64(),
        path.display()
    );
    if failed > 0 {
        let ids: Vec<String> = rows
            .iter()
            .filter(|r| !r.all_pass())
            .map(|r| r.spec_id.to_string())
            .collect();
        return Err(Error::CheckFailed(format!(
            "bound checks failed for specs {}",
            ids.join(",")
        )));
    }
    Ok(vec![path])
}

fn grad_check(ctx: &Ctx, out: &Path, batches: usize, tolerance: f64) -> Result<Vec<PathBuf>> {
    let suite = grad_check_suite(ctx.cfg.seed, batches, tolerance)?;
    let path = out.join("gradcheck.csv");
    write_file(&path, grad_suite_csv(&suite).as_bytes())?;
    for target in [GradTarget::Ioe, GradTarget::Dac, GradTarget::Network] {
        if let Some(w) = suite.worst(target) {
            println!(
                "{:<8} worst relative error {:.3e} (batch {})",
                target.name(),
                w.report.max_relative_error,
                w.batch
            );
        }
    }
    if !suite.all_pass() {
        return Err(Error::CheckFailed(format!(
            "{} of {} gradient checks exceed {tolerance:e}",
            suite.failures(),
            suite.rows.len()
        )));
    }
    Ok(vec![path])
}

/// Reads `dir/report.json`, requiring the other run artifacts to exist.
pub fn load_report(dir: &Path) -> Result<Report> {
    for name in ["report.json", "metrics.csv", "predictions.csv"] {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(Error::MissingArtifact(p));
        }
    }
    let path = dir.join("report.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Builds the consolidated summary of `run`, optionally diffed against
/// `baseline`.
pub fn summarize(run: &Path, baseline: Option<&Path>) -> Result<Summary> {
    let r = load_report(run)?;
    let baseline = match baseline {
        Some(dir) => {
            let b = load_report(dir)?;
            Some(BaselineDiff {
                run: dir.display().to_string(),
                config_changes: config_diff(&r.config, &b.config)
                    .into_iter()
                    .map(|(key, run, baseline)| ConfigChange {
                        key: key.to_string(),
                        run,
                        baseline,
                    })
                    .collect(),
                a_last_delta: r.a_last - b.a_last,
                a_inc_delta: r.a_inc - b.a_inc,
            })
        }
        None => None,
    };
    Ok(Summary {
        run: run.display().to_string(),
        tasks: r.tasks,
        a_last: r.a_last,
        a_inc: r.a_inc,
        oracle_a_last: r.oracle_a_last,
        oracle_a_inc: r.oracle_a_inc,
        acc_matrix: r.acc_matrix,
        omega_start: r.omega_start,
        omega_end: r.omega_end,
        tau: r.tau,
        mask_saturation: r.mask_saturation,
        max_abs_cos: r.orthogonality.max_abs_cos,
        mean_abs_cos: r.orthogonality.mean_abs_cos,
        embedding_separation: r.embedding_separation,
        warnings: r.warnings,
        baseline,
    })
}

/// Plain-text table of a summary.
pub fn summary_table(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run {}", s.run);
    let _ = write!(out, "{:>4}", "task");
    for t in 0..s.tasks {
        let _ = write!(out, " {:>7}", format!("acc{t}"));
    }
    let _ = writeln!(out, " {:>7} {:>7} {:>7}", "omega", "tau", "mask");
    for (n, row) in s.acc_matrix.iter().enumerate() {
        let _ = write!(out, "{n:>4}");
        for t in 0..s.tasks {
            match row.get(t) {
                Some(v) => {
                    let _ = write!(out, " {v:>7.4}");
                }
                None => {
                    let _ = write!(out, " {:>7}", "");
                }
            }
        }
        let at = |v: &[f64]| v.get(n).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            " {:>7.4} {:>7.4} {:>7.3}",
            at(&s.omega_end),
            at(&s.tau),
            at(&s.mask_saturation)
        );
    }
    let _ = writeln!(
        out,
        "A_last {:.4}  A_inc {:.4}  oracle A_last {:.4}  max|cos| {:.2e}",
        s.a_last, s.a_inc, s.oracle_a_last, s.max_abs_cos
    );
    if let Some(b) = &s.baseline {
        let _ = writeln!(
            out,
            "vs {}: A_last {:+.4}  A_inc {:+.4}",
            b.run, b.a_last_delta, b.a_inc_delta
        );
        for c in &b.config_changes {
            let _ = writeln!(out, "  {} = {} (baseline {})", c.key, c.run, c.baseline);
        }
    }
    for w in &s.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

fn report(out: &Path, run: &Path, baseline: Option<&Path>) -> Result<Vec<PathBuf>> {
    let summary = summarize(run, baseline)?;
    let path = out.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    print!("{}", summary_table(&summary));
    Ok(vec![path])
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed command and returns the output directory.
pub fn dispatch(cli: Cli) -> Result<PathBuf> {
    let started = Instant::now();
    let started_unix_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis());
    let cfg = resolve_config(&cli)?;
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let ctx = Ctx { cli, cfg, workers };
    let out = match &ctx.cli.command {
        Command::Eval { run, .. } | Command::Report { run, .. } => ctx.out_dir(Some(run))?,
        _ => ctx.out_dir(None)?,
    };
    ctx.log(1, format!("{} -> {}", ctx.cli.command.verb(), out.display()));

    let files = match &ctx.cli.command {
        Command::GenData => gen_data(&ctx, &out)?,
        Command::Train { data, resume } => train(&ctx, &out, data.as_deref(), *resume)?,
        Command::Eval { run, data } => eval(&ctx, run, &out, data.as_deref())?,
        Command::VerifyBounds { specs, samples } => verify(&ctx, &out, *specs, *samples)?,
        Command::GradCheck { batches, tolerance } => grad_check(&ctx, &out, *batches, *tolerance)?,
        Command::Report { run, baseline } => report(&out, run, baseline.as_deref())?,
    };

    let artifacts = files
        .iter()
        .filter(|p| p.is_file())
        .map(|p| artifact(&out, p))
        .collect::<Result<Vec<_>>>()?;
    append_manifest(
        &out,
        ManifestEntry {
            verb: ctx.cli.command.verb().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: ctx.cfg.seed,
            config_source: ctx.cli.config.as_ref().map(|p| p.display().to_string()),
            config_sha256: config_hash(&ctx.cfg),
            workers: ctx.workers,
            started_unix_ms,
            elapsed_ms: started.elapsed().as_millis(),
            artifacts,
        },
    )?;
    Ok(out)
}

/// One-line JSON error record.
pub fn error_line(kind: &str, message: &str, exit: i32) -> String {
    serde_json::json!({ "error": kind, "message": message, "exit": exit }).to_string()
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::ConfigParse { .. } => EXIT_USAGE,
        Error::CheckFailed(_) => EXIT_CHECK,
        Error::Task { source, .. } => exit_code(source),
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first), runs the command, reports errors on
/// stderr, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first, EXIT_USAGE));
            return EXIT_USAGE;
        }
    };
    match dispatch(cli) {
        Ok(_) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_line(e.kind(), &e.to_string(), code));
            code
        }
    }
}
