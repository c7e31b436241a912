use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tribyol_core::checkpoint::{load_checkpoint, Checkpoint};
use tribyol_core::config::{parse_config_with, Mode, Protocol, RunConfig};
use tribyol_core::data::{ingest_dataset, load_dataset, read_entry, IngestOutcome};
use tribyol_core::eval::{
    collect_reports, fine_tune, linear_probe, transfer_eval, write_grid_csv, write_long_csv, write_report, Backbone,
    DatasetSplits, EvalError, ProbeConfig,
};
use tribyol_core::trainer::{pretrain_with, TrainConfig, TrainError, CHECKPOINT_FILE};

const RUN_CONFIG_FILE: &str = "run_config.toml";
const LONG_CSV: &str = "results_long.csv";
const GRID_CSV: &str = "results_grid.csv";

#[derive(Parser, Debug)]
#[command(name = "tribyol", version, about = "Triplet-network self-supervised pretraining and evaluation")]
struct Cli {
    /// Directory holding ingested datasets.
    #[arg(long, global = true, env = "TRIBYOL_DATA_ROOT", default_value = "data")]
    data_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Verify and register a dataset under the data root.
    Ingest {
        /// Dataset id, e.g. cifar10 or toy-shapes.
        id: String,
        /// Directory with the dataset's canonical archive layout. Not needed for toy datasets.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Self-supervised pretraining; writes checkpoint.bin and metrics.jsonl.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Linear probe of a pretrained encoder.
    LinearEval(EvalArgs),
    /// Fine-tune encoder and classifier on a label fraction.
    Finetune(EvalArgs),
    /// Linear probe on a dataset other than the pretraining one.
    Transfer(EvalArgs),
    /// Aggregate evaluation reports below --out into CSV tables.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.seed (and probe.seed for evaluation commands).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pretraining checkpoint; defaults to checkpoint.bin inside --out.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Failure classes, one per exit status.
#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Abort(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Abort(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Abort(m) => write!(f, "training aborted: {m}"),
        }
    }
}

fn data_err(e: impl fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Setup(_) => Failure::Config(e.to_string()),
            TrainError::Checkpoint(_) | TrainError::Io { .. } => Failure::Data(e.to_string()),
            _ => Failure::Abort(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Setup(_) | EvalError::Update(_) => Failure::Config(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

/// Parses the config and applies command-line overrides before defaults are filled.
fn load_run(args: &RunArgs, protocol: Option<Protocol>) -> Result<RunConfig, Failure> {
    parse_config_with(&args.config, |run| {
        if let Some(seed) = args.seed {
            run.train.seed = seed;
            run.probe.seed = Some(seed);
        }
        if let Some(mode) = args.mode {
            run.train.mode = mode;
        }
        if let Some(p) = protocol {
            run.probe.protocol = p;
        }
    })
    .map_err(|e| Failure::Config(e.to_string()))
}

fn save_run_config(dir: &Path, run: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(data_err)?;
    fs::write(dir.join(RUN_CONFIG_FILE), run.to_toml()).map_err(data_err)
}

fn ingest(root: &Path, id: &str, source: Option<&Path>) -> Result<(), Failure> {
    match ingest_dataset(id, source, root).map_err(data_err)? {
        IngestOutcome::Created(e) => println!("ingested {id} into {} ({} pretraining images)", root.display(), e.pretrain_len()),
        IngestOutcome::AlreadyPresent(_) => println!("{id} already ingested and verified"),
    }
    Ok(())
}

fn pretrain_cmd(root: &Path, args: &RunArgs, resume: bool) -> Result<(), Failure> {
    let run = load_run(args, None)?;
    let dataset = load_dataset(root, &run.dataset.id).map_err(data_err)?;
    let previous = if resume { Some(read_checkpoint(&args.out.join(CHECKPOINT_FILE))?) } else { None };
    save_run_config(&args.out, &run)?;
    let mut cfg = TrainConfig::new(run);
    cfg.out_dir = Some(args.out.clone());
    let outcome = pretrain_with(&cfg, &dataset.pretrain(), &dataset.entry.stats, previous, &mut |_| {})?;
    let c = &outcome.final_collapse;
    println!(
        "pretrained {} iterations; embedding std {:.5} (threshold {:.5}); config hash {}",
        outcome.state.iteration, c.mean_std, c.threshold, outcome.config_hash
    );
    if c.collapsed {
        return Err(Failure::Abort(format!(
            "representation collapse: mean embedding std {:.3e} below {:.3e}; checkpoint is marked collapsed",
            c.mean_std, c.threshold
        )));
    }
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path).map_err(data_err)
}

fn eval_cmd(root: &Path, protocol: Protocol, args: &EvalArgs) -> Result<(), Failure> {
    let run = load_run(&args.run, Some(protocol))?;
    let eval_id = run.probe.eval_dataset.clone().unwrap_or_else(|| run.dataset.id.clone());
    // Fail before touching weights when the evaluation data is missing.
    read_entry(root, &eval_id).map_err(data_err)?;
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| args.run.out.join(CHECKPOINT_FILE));
    let ckpt = read_checkpoint(&ckpt_path)?;
    if !ckpt.manifest.complete {
        return Err(Failure::Data(format!("{} is from an unfinished run", ckpt_path.display())));
    }
    if ckpt.manifest.collapsed == Some(true) {
        log::warn!("{} was flagged as collapsed during pretraining", ckpt_path.display());
    }
    let backbone = Backbone::from_checkpoint(&ckpt);
    if protocol == Protocol::Transfer && eval_id == backbone.provenance.pretrain_dataset {
        log::warn!("transfer evaluation on the pretraining dataset {eval_id}");
    }
    let dataset = load_dataset(root, &eval_id).map_err(data_err)?;
    let splits = DatasetSplits::new(&dataset);
    let data = splits.eval_data();
    let probe = ProbeConfig::from_run(&run);
    let report = match protocol {
        Protocol::Linear => linear_probe(&backbone, &data, &probe)?,
        Protocol::Finetune => fine_tune(&backbone, &data, &probe)?,
        Protocol::Transfer => transfer_eval(&backbone, &data, &probe)?,
    };
    let path = write_report(&args.run.out, &report)?;
    println!(
        "{} {} on {}: {:.2}% (report {})",
        protocol.as_str(),
        report.method,
        report.eval_dataset,
        report.selected_accuracy,
        path.display()
    );
    Ok(())
}

fn report_cmd(out: &Path) -> Result<(), Failure> {
    let reports = collect_reports(out)?;
    if reports.is_empty() {
        return Err(Failure::Data(format!("no evaluation reports below {}", out.display())));
    }
    write_long_csv(&out.join(LONG_CSV), &reports)?;
    write_grid_csv(&out.join(GRID_CSV), &reports)?;
    println!("aggregated {} reports into {} and {}", reports.len(), LONG_CSV, GRID_CSV);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let root = cli.data_root.as_path();
    match &cli.command {
        Command::Ingest { id, source } => ingest(root, id, source.as_deref()),
        Command::Pretrain { run, resume } => pretrain_cmd(root, run, *resume),
        Command::LinearEval(a) => eval_cmd(root, Protocol::Linear, a),
        Command::Finetune(a) => eval_cmd(root, Protocol::Finetune, a),
        Command::Transfer(a) => eval_cmd(root, Protocol::Transfer, a),
        Command::Report { out } => report_cmd(out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
