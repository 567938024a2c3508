//! Command-line front end: `prepare`, `train`, `eval`, `ablate`, `verify`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::ablation::run_ablation;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{load_interactions, prepare, DatasetSnapshot, FilterMode, InputFormat, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSplit, MetricsReport};
use crate::fusion::ScoringHead;
use crate::graph::{build_adjacency, NormalizedAdjacency};
use crate::synthetic::SyntheticData;
use crate::trainer::{fit, EpochRecord};
use crate::verify;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SNAPSHOT_FILE: &str = "dataset.snapshot";
pub const ABLATION_FILE: &str = "ablation.tsv";

#[derive(Debug, Parser)]
#[command(name = "mrgsrec", version, about = "Graph-sequential next-item recommender")]
pub struct Cli {
    /// Worker threads for matrix kernels (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded execution; repeated runs give bit-identical results.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter and split a raw interaction log into a dataset snapshot.
    Prepare(PrepareArgs),
    /// Train one model from a TOML run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train the full model and its single-encoder variants.
    Ablate(AblateArgs),
    /// Run gradient, graph and metric self-checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    pub input: PathBuf,
    /// tsv, whitespace, amazon-csv or ml-1m.
    #[arg(long, default_value = "tsv")]
    pub format: String,
    #[arg(long, default_value_t = 5)]
    pub min_count: usize,
    /// fixpoint or single-pass.
    #[arg(long, default_value = "fixpoint")]
    pub filter_mode: String,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Also write the normalized train adjacency as text.
    #[arg(long)]
    pub adjacency_dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Dataset snapshot, or a run configuration naming one.
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: EvalSplit,
    /// Rank against the whole catalog instead of excluding seen items.
    #[arg(long)]
    pub full_catalog: bool,
    /// Adjacency dump to use instead of the one built from the dataset.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    pub config: PathBuf,
    /// Comma-separated seeds overriding the configuration.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Configures the thread pool and dispatches, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // a pool may already exist when called twice in one process
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("global thread pool already initialized");
        }
    }
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Verify(a) => cmd_verify(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_prepare(a: &PrepareArgs, out: &mut dyn Write) -> Result<()> {
    let format = InputFormat::preset(&a.format).ok_or_else(|| Error::Config(format!("unknown format {:?}", a.format)))?;
    let mode: FilterMode = a.filter_mode.parse()?;
    let log = load_interactions(&a.input, &format)?;
    let snapshot = prepare(&log, a.min_count, mode)?;
    snapshot.save(&a.output)?;
    if let Some(path) = &a.adjacency_dump {
        let split = &snapshot.split;
        build_adjacency(split, split.n_users, split.n_items)?.1.write_dump(path)?;
    }
    emit(
        out,
        &format!(
            "{}\nfilter_mode={:?} min_count={} dropped_short_users={}\nfingerprint={}\n",
            snapshot.stats,
            snapshot.filter_mode,
            snapshot.min_count,
            snapshot.dropped_short_users,
            snapshot.fingerprint()
        ),
    )
}

fn load_run_config(path: &Path, seed: Option<u64>, output_dir: &Option<PathBuf>, max_epochs: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(e) = max_epochs {
        cfg.train.max_epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_snapshot(cfg: &RunConfig) -> Result<DatasetSnapshot> {
    match (&cfg.dataset, &cfg.synthetic) {
        (Some(path), _) => DatasetSnapshot::load(path),
        (None, Some(s)) => SyntheticData::generate(s)?.snapshot(),
        (None, None) => Err(Error::Config("no dataset configured".into())),
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    config_fingerprint: &'a str,
    seed: u64,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// Summary written next to the checkpoint.
#[derive(Debug, Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub config_fingerprint: String,
    pub data_fingerprint: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub validation: Option<MetricsReport>,
    pub test: MetricsReport,
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_run_config(&a.config, a.seed, &a.output_dir, a.max_epochs)?;
    let snapshot = load_snapshot(&cfg)?;
    let ds = &snapshot.split;
    let adj = cfg.load_adjacency(ds)?;
    let cfg_fp = cfg.fingerprint();
    let data_fp = snapshot.fingerprint();
    create_dir(&cfg.output_dir)?;
    snapshot.save(cfg.output_dir.join(SNAPSHOT_FILE))?;
    let log_path = cfg.output_dir.join(LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let seed = cfg.train.seed;
    let fitted = fit(ds, &adj, &cfg.train, |record| {
        let line = serde_json::to_string(&LogLine {
            config_fingerprint: &cfg_fp,
            seed,
            record,
        })
        .expect("log line serializes");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))
    })?;
    let ckpt = Checkpoint::new(fitted.config.clone(), fitted.best.clone(), seed, &cfg_fp, &data_fp, fitted.best_epoch)?;
    ckpt.save(cfg.output_dir.join(CHECKPOINT_FILE))?;
    let test = evaluate(&fitted.best, &fitted.config, Some(&adj), ds, EvalSplit::Test, &cfg.train.eval, &data_fp)?;
    let report = TrainReport {
        config_fingerprint: cfg_fp,
        data_fingerprint: data_fp,
        seed,
        best_epoch: fitted.best_epoch,
        epochs_run: fitted.log.len(),
        validation: fitted.best_validation,
        test,
    };
    let report_path = cfg.output_dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&report_path, json + "\n").map_err(|e| Error::io(&report_path, e))?;
    emit(
        out,
        &format!(
            "best_epoch={} epochs_run={}\ncheckpoint={}\n{}",
            report.best_epoch,
            report.epochs_run,
            cfg.output_dir.join(CHECKPOINT_FILE).display(),
            report.test.key_values()
        ),
    )
}

fn load_eval_dataset(path: &Path) -> Result<(SplitDataset, String, Option<NormalizedAdjacency>)> {
    if path.extension().is_some_and(|e| e == "toml") {
        let cfg = RunConfig::load(path)?;
        let snapshot = load_snapshot(&cfg)?;
        let adj = cfg.adjacency.as_ref().map(|_| cfg.load_adjacency(&snapshot.split)).transpose()?;
        let fp = snapshot.fingerprint();
        Ok((snapshot.split, fp, adj))
    } else {
        let snapshot = DatasetSnapshot::load(path)?;
        let fp = snapshot.fingerprint();
        Ok((snapshot.split, fp, None))
    }
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (ds, data_fp, cfg_adj) = load_eval_dataset(&a.dataset)?;
    if ckpt.header.data_fingerprint != data_fp {
        return Err(Error::Protocol(format!(
            "checkpoint was trained on data {} but the dataset is {data_fp}",
            ckpt.header.data_fingerprint
        )));
    }
    let model = &ckpt.header.model;
    let adj = match (&a.adjacency, cfg_adj) {
        (Some(p), _) => Some(NormalizedAdjacency::read_dump(p, ds.n_users, ds.n_items)?),
        (None, Some(adj)) => Some(adj),
        (None, None) if model.head == ScoringHead::Sequential => None,
        (None, None) => Some(build_adjacency(&ds, ds.n_users, ds.n_items)?.1),
    };
    let opts = crate::eval::EvalOptions {
        exclude_seen: !a.full_catalog,
        ..Default::default()
    };
    let report = evaluate(&ckpt.params, model, adj.as_ref(), &ds, a.split, &opts, &data_fp)?;
    if a.json {
        emit(out, &(serde_json::to_string(&report).expect("report serializes") + "\n"))
    } else {
        let label = a.checkpoint.display().to_string();
        emit(
            out,
            &format!("{}{}\n{}\n", report.key_values(), MetricsReport::TABLE_HEADER, report.table_row(&label)),
        )
    }
}

pub fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_run_config(&a.config, None, &a.output_dir, a.max_epochs)?;
    if let Some(seeds) = &a.seeds {
        cfg.ablation.seeds = seeds.clone();
        cfg.validate()?;
    }
    let snapshot = load_snapshot(&cfg)?;
    let adj = cfg.load_adjacency(&snapshot.split)?;
    let table = run_ablation(&snapshot.split, &adj, &cfg.train, &cfg.ablation.variants, &cfg.ablation.seeds)?;
    let text = format!("config fingerprint {}\n{}", cfg.fingerprint(), table.render());
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(ABLATION_FILE);
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    emit(out, &text)
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<()> {
    let results = verify::run_all(a.seed)?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&format!("{r}\n"));
    }
    emit(out, &text)?;
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Error::Verification(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}
