//! `ovg`: data generation, training, streaming inference, metrics, gradient checks and
//! canned experiments.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for internal
//! failures (including a failing gradient check).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ovg_core::config::RunConfig;
use ovg_core::datagen::{self, Split};
use ovg_core::experiments::{self, Table};
use ovg_core::metrics::{self, evaluate};
use ovg_core::model::QueryKind;
use ovg_core::streaming::{write_emission_log, AdaptationMode, StreamConfig};
use ovg_core::trainer::{self, load_checkpoint, save_checkpoint};
use ovg_core::{gradsuite, Error};

#[derive(Parser)]
#[command(name = "ovg", version, about = "Online video grounding with hybrid-modal queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value by dot path, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and eval datasets with ground-truth files.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train an expert or a student and write a checkpoint.
    Train {
        #[arg(long, value_enum)]
        mode: TrainMode,
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint for a distilled student.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Train a student without a teacher.
        #[arg(long)]
        no_distill: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stream every video of a dataset and write one emission log per video.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Query modalities joined by '+', e.g. `text+image`.
        #[arg(long, default_value = "text")]
        query: String,
        #[arg(long, value_enum, default_value_t = Mode::Tune)]
        mode: Mode,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compute online and offline metrics from emission logs.
    Metrics {
        /// Directory of `<query_id>.jsonl` logs.
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report JSON; the CSV goes next to it unless `--csv` is given.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a canned experiment and print its comparison table.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMode {
    Expert,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Tune,
    Frozen,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ExperimentName {
    Learnability,
    ModalityMatrix,
    DistillAblation,
    TuneVsFrozen,
    MemoryAblation,
}

fn kind_name(e: &Error) -> &'static str {
    match e {
        Error::Dimension { .. } => "dimension",
        Error::Numeric { .. } => "numeric",
        Error::Config(_) => "config",
        Error::Usage(_) => "usage",
        Error::Protocol(_) => "protocol",
        Error::Validation(_) => "validation",
        Error::Parse { .. } => "parse",
        Error::Integrity { .. } => "integrity",
        Error::Io { .. } => "io",
    }
}

/// Failures other than library errors.
enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(cfg: &ConfigArgs) -> Result<RunConfig, Error> {
    RunConfig::load(cfg.config.as_deref(), &cfg.overrides)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn parent_dir(path: &Path) -> Result<PathBuf, Error> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    Ok(dir.to_path_buf())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn cmd_datagen(out: &Path, cfg: &ConfigArgs) -> CmdResult {
    let config = load_config(cfg)?;
    create_dir(out)?;
    let mut summary = Table::new("matched-filter baseline on eval (offline R@1, IoU 0.5)", &["R@1"]);
    for split in [Split::Train, Split::Eval] {
        let data = datagen::generate(&config.data, split)?;
        let name = match split {
            Split::Train => "train",
            Split::Eval => "eval",
        };
        datagen::write_dataset(&out.join(format!("{name}.jsonl")), &data)?;
        metrics::write_ground_truth(&out.join(format!("{name}_gt.json")), &datagen::ground_truth(&data))?;
        println!("{name}: {} videos", data.records.len());
        if split == Split::Eval {
            for kind in ["text", "image", "segment"] {
                let kind: QueryKind = kind.parse()?;
                if kind.modalities().iter().all(|&m| data.spec.modalities.contains(&m)) {
                    let evals = datagen::matched_filter(&data, &kind)?;
                    let (r, _) = metrics::offline_metrics(&evals, 1, 0.5)?;
                    summary.push(kind.to_string(), vec![r]);
                }
            }
        }
    }
    config.write_snapshot(out)?;
    print!("{}", summary.render());
    Ok(())
}

fn cmd_train(
    mode: TrainMode,
    data: &Path,
    teacher: Option<&Path>,
    no_distill: bool,
    out: &Path,
    cfg: &ConfigArgs,
) -> CmdResult {
    let config = load_config(cfg)?;
    let dataset = datagen::read_dataset(data)?;
    let outcome = match mode {
        TrainMode::Expert => {
            if teacher.is_some() {
                return Err(Error::Config("--teacher only applies to student training".into()).into());
            }
            trainer::train_expert(&dataset, &config.model, &config.train, &config.loss)?
        }
        TrainMode::Student => {
            let teacher = match (teacher, no_distill) {
                (Some(_), true) => {
                    return Err(Error::Config("--teacher and --no-distill exclude each other".into()).into())
                }
                (None, false) => {
                    return Err(Error::Config(
                        "student training needs --teacher, or --no-distill to train without one".into(),
                    )
                    .into())
                }
                (Some(p), false) => Some(load_checkpoint(p)?),
                (None, true) => None,
            };
            trainer::train_student(&dataset, teacher.as_ref(), &config.model, &config.student, &config.loss)?
        }
    };
    let dir = parent_dir(out)?;
    save_checkpoint(out, &outcome.checkpoint)?;
    config.write_snapshot(&dir)?;
    let mut table = Table::new("epoch mean loss", &["total", "distill", "cls", "reg"]);
    for (i, h) in outcome.checkpoint.history.iter().enumerate() {
        table.push(format!("epoch {}", i + 1), vec![h.total, h.distill, h.cls, h.reg]);
    }
    print!("{}", table.render());
    println!("checkpoint {} ({})", out.display(), outcome.checkpoint.meta.weights_hash);
    Ok(())
}

fn cmd_stream(
    checkpoint: &Path,
    data: &Path,
    query: &str,
    mode: Mode,
    out_dir: &Path,
    cfg: &ConfigArgs,
) -> CmdResult {
    let config = load_config(cfg)?;
    let kind: QueryKind = query.parse()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = datagen::read_dataset(data)?;
    let mode = match mode {
        Mode::Tune => AdaptationMode::Tune,
        Mode::Frozen => AdaptationMode::Frozen,
    };
    let stream = StreamConfig { mode, ..config.stream.clone() };
    let evals = experiments::stream_dataset(&Arc::new(ckpt.weights), &dataset, &kind, &stream)?;
    create_dir(out_dir)?;
    let mut total = 0;
    for q in &evals {
        write_emission_log(&out_dir.join(format!("{}.jsonl", q.query_id)), &q.predictions)?;
        total += q.predictions.len();
    }
    let snapshot = RunConfig { stream, ..config };
    snapshot.write_snapshot(out_dir)?;
    println!("{} streams, {total} emissions, logs in {}", evals.len(), out_dir.display());
    Ok(())
}

fn cmd_metrics(logs: &Path, gt: &Path, out: &Path, csv: Option<&Path>, cfg: &ConfigArgs) -> CmdResult {
    let config = load_config(cfg)?;
    let truth = metrics::read_ground_truth(gt)?;
    let queries = metrics::read_prediction_logs(logs, &truth)?;
    let report = evaluate(&queries, &config.metrics, &config.decay)?;
    let csv = csv.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("csv"));
    let dir = parent_dir(out)?;
    report.write(out, &csv)?;
    config.write_snapshot(&dir)?;
    let mut table = Table::new("metrics (averaged over t_s)", &["online", "offline"]);
    for e in &report.online_recall {
        let off = report.offline_recall_at(e.n, e.iou).unwrap_or(f64::NAN);
        table.push(format!("R@{} IoU {}", e.n, e.iou), vec![e.average, off]);
    }
    for e in &report.online_map {
        table.push(format!("mAP IoU {}", e.iou), vec![e.average, report.offline_map_at(e.iou).unwrap_or(f64::NAN)]);
    }
    print!("{}", table.render());
    if report.skipped_queries > 0 {
        println!("{} queries without moments skipped", report.skipped_queries);
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> CmdResult {
    let entries = gradsuite::run_suite(seed)?;
    let mut failed = Vec::new();
    for e in &entries {
        let verdict = if e.report.passed { "pass" } else { "FAIL" };
        println!(
            "{verdict} {:<24} max rel error {:.3e} (tol {:.0e}, {} values)",
            e.name, e.report.max_rel_error, e.tolerance, e.report.param_count
        );
        if !e.report.passed {
            failed.push(e.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn cmd_experiment(name: ExperimentName, out: &Path, cfg: &ConfigArgs) -> CmdResult {
    let config = load_config(cfg)?;
    let exp = config.experiment();
    create_dir(out)?;
    let (file, value, table) = match name {
        ExperimentName::Learnability => {
            let r = experiments::learnability(&exp)?;
            println!(
                "trained in {:.1}s, evaluated in {:.1}s",
                r.metadata.train_seconds, r.metadata.eval_seconds
            );
            ("learnability", json!({ "result": r, "table": r.table() }), r.table())
        }
        ExperimentName::ModalityMatrix => {
            let t = experiments::modality_matrix(&exp)?;
            ("modality_matrix", json!({ "table": t }), t)
        }
        ExperimentName::DistillAblation => {
            let (rows, t) = experiments::distill_ablation(&exp)?;
            ("distill_ablation", json!({ "rows": rows, "table": t }), t)
        }
        ExperimentName::TuneVsFrozen => {
            let (rows, t) = experiments::tune_vs_frozen(&exp)?;
            ("tune_vs_frozen", json!({ "rows": rows, "table": t }), t)
        }
        ExperimentName::MemoryAblation => {
            let (rows, t) = experiments::memory_ablation(&exp)?;
            ("memory_ablation", json!({ "rows": rows, "table": t }), t)
        }
    };
    write_json(&out.join(format!("{file}.json")), &value)?;
    config.write_snapshot(out)?;
    print!("{}", table.render());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Datagen { out, cfg } => cmd_datagen(&out, &cfg),
        Command::Train { mode, data, teacher, no_distill, out, cfg } => {
            cmd_train(mode, &data, teacher.as_deref(), no_distill, &out, &cfg)
        }
        Command::Stream { checkpoint, data, query, mode, out_dir, cfg } => {
            cmd_stream(&checkpoint, &data, &query, mode, &out_dir, &cfg)
        }
        Command::Metrics { logs, gt, out, csv, cfg } => cmd_metrics(&logs, &gt, &out, csv.as_deref(), &cfg),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Experiment { name, out, cfg } => cmd_experiment(name, &out, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (kind, message, code) = match failure {
                Failure::Core(e) => {
                    let code = if e.is_user_error() { 1 } else { 2 };
                    (kind_name(&e), e.to_string(), code)
                }
                Failure::Check(m) => ("check", m, 2),
            };
            eprintln!("{}", json!({ "error": kind, "message": message }));
            ExitCode::from(code)
        }
    }
}
