//! The `mmon` command line.

use crate::dataset::{generate_range, read_dataset, write_dataset, DatasetError, FormatError};
use crate::harness::{
    emit_report, evaluate, mean_accuracy, run_generalization, split_dataset, train, CorpusSize,
    EpochRecord, ExperimentSpec, HarnessError, MetricsRecord, ReportFormat, TrainConfig,
};
use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmon_core::gradsuite::{model_report, op_reports};
use mmon_core::model::{MmonModel, Mode, ModelDims, ModelError};
use mmon_core::tensor::CheckpointError;
use mmon_core::{solve, Configuration, OracleError, RuleFamily};
use rayon::prelude::*;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

pub const MODEL_FILE: &str = "model.mmn";
pub const CONFIG_FILE: &str = "train_config.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Parser, Debug)]
#[command(name = "mmon", version, about = "Raven-style puzzle generator, oracle and modular reasoning network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Plain,
    Meta,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Plain => Mode::Plain,
            ModeArg::Meta => Mode::Meta,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "meta")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    pub mu: f64,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 500)]
    pub n_val: usize,
    #[arg(long, default_value_t = 500)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 40)]
    pub size: u32,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset directory.
    Gen {
        #[arg(long)]
        config: String,
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        size: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve every instance of a dataset with the symbolic oracle.
    Oracle {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train on a dataset directory (6:2:2 split).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Finite-difference checks of every tape operation and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on some configurations, test on others.
    Xfer {
        #[arg(long, value_delimiter = ',')]
        train: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        test: Vec<String>,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Train without one rule family, test on puzzles that use it.
    Holdout {
        #[arg(long)]
        rule: String,
        #[arg(long, value_delimiter = ',', default_value = "center")]
        configs: Vec<String>,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Collect `metrics.json` files from run directories into one report.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum CliError {
    Validation(anyhow::Error),
    Internal(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(e) | CliError::Internal(e) => write!(f, "{e:#}"),
        }
    }
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(anyhow::anyhow!(msg.into()))
}

fn is_user_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<FormatError>()
            || c.is::<CheckpointError>()
            || c.is::<serde_json::Error>()
            || matches!(
                c.downcast_ref::<HarnessError>(),
                Some(
                    HarnessError::TooFew(_)
                        | HarnessError::EmptyDataset
                        | HarnessError::EmptyAfterFilter(_)
                        | HarnessError::InvalidConfig(_)
                )
            )
            || matches!(c.downcast_ref::<ModelError>(), Some(ModelError::BadInput(_) | ModelError::MissingMeta | ModelError::Checkpoint(_)))
            || matches!(c.downcast_ref::<DatasetError>(), Some(DatasetError::Io { .. } | DatasetError::Json { .. } | DatasetError::Format(_)))
    })
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        if is_user_error(&e) {
            CliError::Validation(e)
        } else {
            CliError::Internal(e)
        }
    }
}

fn parse_config(name: &str) -> Result<Configuration, CliError> {
    Configuration::from_name(name).ok_or_else(|| validation(format!("unknown configuration {name:?}")))
}

fn parse_family(name: &str) -> Option<RuleFamily> {
    let key = |s: &str| s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
    RuleFamily::ALL.into_iter().find(|f| key(f.name()) == key(name))
}

fn parse_configs(names: &[String]) -> Result<Vec<Configuration>, CliError> {
    names.iter().map(|n| parse_config(n)).collect()
}

fn train_config(args: &TrainArgs, size: u32, configs: Vec<Configuration>) -> TrainConfig {
    TrainConfig {
        mode: args.mode.into(),
        lambda: args.lambda,
        mu: args.mu,
        lr: args.lr,
        batch: args.batch,
        epochs: args.epochs,
        seed: args.seed,
        size,
        configs,
        dropout: args.dropout,
        ..TrainConfig::default()
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// Writes every epoch record as one JSON line, flushed immediately.
fn epoch_logger(path: &Path) -> anyhow::Result<impl FnMut(&EpochRecord)> {
    let mut file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(move |r: &EpochRecord| {
        if let Ok(line) = serde_json::to_string(r) {
            let _ = writeln!(file, "{line}");
            let _ = file.flush();
        }
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.4}  val {:.4}  {:.0}s",
            r.epoch, r.loss, r.train_accuracy, r.val_accuracy, r.wall_time_secs
        );
    })
}

fn save_run(dir: &Path, config: &TrainConfig, model: &MmonModel, metrics: &MetricsRecord) -> anyhow::Result<()> {
    write_json(&dir.join(CONFIG_FILE), config)?;
    let path = dir.join(MODEL_FILE);
    fs::write(&path, model.to_checkpoint()?).with_context(|| format!("writing {}", path.display()))?;
    write_json(&dir.join(METRICS_FILE), metrics)
}

fn run_experiment(spec: ExperimentSpec, corpus: &CorpusArgs, args: &TrainArgs) -> Result<(), CliError> {
    let config = train_config(args, corpus.size, spec.train_configs.clone());
    config.validate().map_err(anyhow::Error::from)?;
    spec.validate().map_err(anyhow::Error::from)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(CliError::Internal)?;
    let mut log = epoch_logger(&args.out.join(LOG_FILE))?;
    let sizes = CorpusSize {
        train: corpus.n_train,
        val: corpus.n_val,
        test: corpus.n_test,
    };
    let result = run_generalization(&spec, &config, sizes, corpus.data_seed, &mut log).map_err(anyhow::Error::from)?;
    save_run(&args.out, &config, &result.model, &result.metrics)?;
    println!("{}", serde_json::to_string_pretty(&result.metrics).map_err(anyhow::Error::from)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            config,
            n,
            seed,
            size,
            out,
        } => {
            let config = parse_config(&config)?;
            if !mmon_core::render::SUPPORTED_SIZES.contains(&size) {
                return Err(validation(format!("unsupported size {size} (expected 40 or 80)")));
            }
            let ds = generate_range(config, seed, 0, n, size).map_err(anyhow::Error::from)?;
            write_dataset(&ds, &out).map_err(|e| CliError::Internal(e.into()))?;
            println!("wrote {} {} instances to {}", ds.len(), config.name(), out.display());
        }
        Command::Oracle { data } => {
            let start = Instant::now();
            let ds = read_dataset(&data).map_err(anyhow::Error::from)?;
            let results: Vec<Result<usize, OracleError>> = ds.instances.par_iter().map(solve).collect();
            let correct = results
                .iter()
                .zip(&ds.instances)
                .filter(|(r, i)| matches!(r, Ok(p) if *p == i.label as usize))
                .count();
            let ties = results.iter().filter(|r| r.is_err()).count();
            let acc = if ds.is_empty() { 1.0 } else { correct as f64 / ds.len() as f64 };
            println!(
                "instances {}  correct {}  accuracy {:.4}  ambiguous_ties {}  time {:.2}s",
                ds.len(),
                correct,
                acc,
                ties,
                start.elapsed().as_secs_f64()
            );
            for (r, inst) in results.iter().zip(&ds.instances) {
                if let Err(e) = r {
                    println!("seed {}: {e}", inst.seed);
                }
            }
            if correct != ds.len() {
                return Err(validation("oracle disagrees with stored labels"));
            }
        }
        Command::Train { data, train: args } => {
            let ds = read_dataset(&data).map_err(anyhow::Error::from)?;
            let examples = ds.examples().map_err(anyhow::Error::from)?;
            let mut configs: Vec<Configuration> = Vec::new();
            for ex in &examples {
                if !configs.contains(&ex.config) {
                    configs.push(ex.config);
                }
            }
            let config = train_config(&args, ds.size, configs);
            config.validate().map_err(anyhow::Error::from)?;
            let (tr, va, te) = split_dataset(&examples, args.seed).map_err(anyhow::Error::from)?;
            fs::create_dir_all(&args.out)
                .with_context(|| format!("creating {}", args.out.display()))
                .map_err(CliError::Internal)?;
            let mut log = epoch_logger(&args.out.join(LOG_FILE))?;
            let start = Instant::now();
            let outcome = train(&config, ModelDims::default(), &tr, &va, &mut log).map_err(anyhow::Error::from)?;
            let per_config = evaluate(&outcome.model, &te, config.mode, "in_config").map_err(anyhow::Error::from)?;
            let metrics = MetricsRecord {
                experiment: format!("train:{}", data.display()),
                mode: config.mode.name().into(),
                mean_accuracy: mean_accuracy(&per_config),
                per_config,
                loss_history: outcome.history.iter().map(|r| r.loss).collect(),
                seeds: vec![args.seed],
                wall_time_secs: start.elapsed().as_secs_f64(),
            };
            save_run(&args.out, &config, &outcome.model, &metrics)?;
            println!("{}", serde_json::to_string_pretty(&metrics).map_err(anyhow::Error::from)?);
        }
        Command::Eval { model, data, mode } => {
            let bytes = fs::read(&model)
                .with_context(|| format!("reading {}", model.display()))
                .map_err(CliError::Validation)?;
            let net = MmonModel::from_checkpoint(&bytes).map_err(anyhow::Error::from)?;
            let mode = match mode {
                Some(m) => m.into(),
                None => {
                    let path = model.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("no --mode given and cannot read {}", path.display()))
                        .map_err(CliError::Validation)?;
                    serde_json::from_str::<TrainConfig>(&text).map_err(anyhow::Error::from)?.mode
                }
            };
            let ds = read_dataset(&data).map_err(anyhow::Error::from)?;
            let start = Instant::now();
            let per_config = evaluate(&net, &ds.examples().map_err(anyhow::Error::from)?, mode, "eval")
                .map_err(anyhow::Error::from)?;
            let metrics = MetricsRecord {
                experiment: format!("eval:{}", data.display()),
                mode: mode.name().into(),
                mean_accuracy: mean_accuracy(&per_config),
                per_config,
                loss_history: Vec::new(),
                seeds: Vec::new(),
                wall_time_secs: start.elapsed().as_secs_f64(),
            };
            println!("{}", serde_json::to_string_pretty(&metrics).map_err(anyhow::Error::from)?);
        }
        Command::Gradcheck { trials, seed } => {
            let mut reports = op_reports(trials, seed).map_err(anyhow::Error::from)?;
            reports.push(model_report(trials, seed).map_err(anyhow::Error::from)?);
            let mut failed = 0;
            for r in &reports {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!r.passed());
                println!("{:<24} trials {:>3}  max_rel_err {:.3e}  tol {:.0e}  {verdict}", r.name, r.trials, r.max_error, r.tolerance);
            }
            if failed > 0 {
                return Err(validation(format!("{failed} gradient checks failed")));
            }
        }
        Command::Xfer {
            train,
            test,
            corpus,
            args,
        } => {
            let spec = ExperimentSpec::transfer(&parse_configs(&train)?, &parse_configs(&test)?);
            run_experiment(spec, &corpus, &args)?;
        }
        Command::Holdout {
            rule,
            configs,
            corpus,
            args,
        } => {
            let family = parse_family(&rule).ok_or_else(|| validation(format!("unknown rule family {rule:?}")))?;
            let spec = ExperimentSpec::holdout(&parse_configs(&configs)?, family);
            run_experiment(spec, &corpus, &args)?;
        }
        Command::Report { runs, format, out } => {
            let records = runs
                .iter()
                .map(|dir| {
                    let path = dir.join(METRICS_FILE);
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str::<MetricsRecord>(&text).with_context(|| format!("parsing {}", path.display()))
                })
                .collect::<anyhow::Result<Vec<_>>>()
                .map_err(CliError::Validation)?;
            let format = match format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
            };
            emit_report(&records, &out, format)
                .with_context(|| format!("writing {}", out.display()))
                .map_err(CliError::Internal)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
    }
    Ok(())
}

/// Parses arguments and runs; usage errors exit with 1.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
