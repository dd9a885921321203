use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cli::config::{Mode, RunConfig};
use crate::cli::io::{
    format_checkpoint, format_dataset, format_loss_log, format_rankings, read_checkpoint, read_codes, read_dataset,
    read_rankings, write_atomic, encode_codes, Checkpoint,
};
use crate::cli::pipeline::{
    build_variant, encode_dataset, evaluate, format_report, init_model, run_queries, fixed_weights, Variant,
};
use crate::cli::synth::generate_split;
use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::trainer::{train, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "qadwh", version, about = "Query-adaptive weighted hashing: train, encode, retrieve, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic database and query set.
    GenSynth(GenSynthArgs),
    /// Train a model and write a checkpoint plus loss log.
    Train(TrainArgs),
    /// Encode a dataset into a codes file.
    Encode(EncodeArgs),
    /// Rank the database for every query.
    Query(QueryArgs),
    /// Score rankings against dataset labels.
    Eval(EvalArgs),
    /// Run one ablation variant end to end.
    Baseline(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML run configuration; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub initial_lr: Option<f64>,
    /// Seed for triplet sampling.
    #[arg(long)]
    pub train_seed: Option<u64>,
    /// Seed for parameter initialization.
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub code_length: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.train.max_steps, self.max_steps);
        set(&mut cfg.train.batch_size, self.batch_size);
        set(&mut cfg.train.initial_lr, self.initial_lr);
        set(&mut cfg.train.seed, self.train_seed);
        set(&mut cfg.model.seed, self.model_seed);
        set(&mut cfg.model.code_length, self.code_length);
    }
}

#[derive(Debug, Args)]
pub struct RetrievalOverrides {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub radius: Option<usize>,
    /// Results per query; 0 returns the whole database.
    #[arg(long)]
    pub k: Option<usize>,
}

impl RetrievalOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.retrieval.mode, self.mode);
        set(&mut cfg.retrieval.radius, self.radius);
        set(&mut cfg.retrieval.k, self.k);
    }
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Database output path.
    #[arg(long)]
    pub database: Option<PathBuf>,
    /// Query set output path.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long)]
    pub multi_label_prob: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_queries: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub database: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Loss log output path.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset to encode; defaults to the configured database.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Codes output path.
    #[arg(long)]
    pub codes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub codes: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Rankings output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub retrieval: RetrievalOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub codes: Option<PathBuf>,
    /// Database with labels.
    #[arg(long)]
    pub database: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Precomputed rankings; recomputed from the checkpoint when absent.
    #[arg(long)]
    pub rankings: Option<PathBuf>,
    /// Report output path; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// MAP truncation depth.
    #[arg(long)]
    pub truncation: Option<usize>,
    #[command(flatten)]
    pub retrieval: RetrievalOverrides,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_enum)]
    pub variant: Variant,
    #[arg(long)]
    pub database: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Trained checkpoint reused by the dwh variant instead of retraining.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory receiving checkpoint, codes, rankings, report and loss log.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[command(flatten)]
    pub retrieval: RetrievalOverrides,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn require(flag: &Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("missing --{name} (or paths.{} in the config)", name.replace('-', "_"))))
}

/// Parses `args` and runs the selected verb, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenSynth(args) => gen_synth(args),
        Command::Train(args) => train_cmd(args),
        Command::Encode(args) => encode_cmd(args),
        Command::Query(args) => query_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Baseline(args) => baseline_cmd(args),
    }
}

fn gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    let s = &mut cfg.synth;
    set(&mut s.n, args.n);
    set(&mut s.d, args.d);
    set(&mut s.c, args.c);
    set(&mut s.multi_label_prob, args.multi_label_prob);
    set(&mut s.noise_sigma, args.noise_sigma);
    set(&mut s.seed, args.seed);
    set(&mut s.num_queries, args.num_queries);
    cfg.validate()?;
    let db_path = require(&args.database, &cfg.paths.database, "database")?;
    let q_path = require(&args.queries, &cfg.paths.queries, "queries")?;
    let (database, queries) = generate_split(&cfg.synth)?;
    write_atomic(&db_path, format_dataset(&database).as_bytes())?;
    write_atomic(&q_path, format_dataset(&queries).as_bytes())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    args.train.apply(&mut cfg);
    cfg.validate()?;
    let db_path = require(&args.database, &cfg.paths.database, "database")?;
    let ckpt_path = require(&args.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let log_path = args.loss_log.clone().or_else(|| cfg.paths.loss_log.clone());
    let database = read_dataset(&db_path)?;

    let init = init_model(&cfg, database.feature_dim(), database.num_classes())?;
    let (params, report) = train(&init, &database, &cfg.train)?;
    let ckpt = Checkpoint {
        params,
        step: report.final_step,
        config: cfg,
    };
    write_atomic(&ckpt_path, format_checkpoint(&ckpt).as_bytes())?;
    if let Some(path) = log_path {
        write_atomic(&path, format_loss_log(&report).as_bytes())?;
    }
    Ok(())
}

fn encode_cmd(args: EncodeArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let ckpt_path = require(&args.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let data_path = require(&args.dataset, &cfg.paths.database, "dataset")?;
    let codes_path = require(&args.codes, &cfg.paths.codes, "codes")?;
    let ckpt = read_checkpoint(&ckpt_path)?;
    let data = read_dataset(&data_path)?;
    let set = encode_dataset(&ckpt.params, &data)?;
    write_atomic(&codes_path, &encode_codes(&set)?)
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io(Path::new("<stdout>"), e)),
    }
}

fn query_cmd(args: QueryArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    args.retrieval.apply(&mut cfg);
    let ckpt_path = require(&args.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let codes_path = require(&args.codes, &cfg.paths.codes, "codes")?;
    let queries_path = require(&args.queries, &cfg.paths.queries, "queries")?;
    let out = args.out.clone().or_else(|| cfg.paths.rankings.clone());
    let ckpt = read_checkpoint(&ckpt_path)?;
    let set = read_codes(&codes_path)?;
    let queries = read_dataset(&queries_path)?;
    cfg.model.code_length = ckpt.params.code_length();
    cfg.validate()?;

    let r = &cfg.retrieval;
    let run = run_queries(&ckpt.params, &set, &queries, r.mode, r.radius, r.k)?;
    emit(out.as_deref(), &format_rankings(&run.rankings))
}

/// Every query's ranking must be a permutation of the database.
fn check_full_rankings(rankings: &[crate::index::RankedList], n: usize) -> Result<()> {
    let mut bad = Vec::new();
    for (q, ranked) in rankings.iter().enumerate() {
        let mut seen = vec![false; n];
        let covers = ranked.len() == n
            && ranked.items().all(|item| item < n && !std::mem::replace(&mut seen[item], true));
        if !covers {
            bad.push(q.to_string());
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "rankings must list every one of the {n} database items once; not so for queries {}",
            bad.join(", ")
        )))
    }
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    args.retrieval.apply(&mut cfg);
    if args.truncation.is_some() {
        cfg.eval.truncation = args.truncation;
    }
    let ckpt_path = require(&args.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let codes_path = require(&args.codes, &cfg.paths.codes, "codes")?;
    let db_path = require(&args.database, &cfg.paths.database, "database")?;
    let queries_path = require(&args.queries, &cfg.paths.queries, "queries")?;
    let out = args.report.clone().or_else(|| cfg.paths.report.clone());
    let ckpt = read_checkpoint(&ckpt_path)?;
    let set = read_codes(&codes_path)?;
    let database = read_dataset(&db_path)?;
    let queries = read_dataset(&queries_path)?;
    cfg.model.code_length = ckpt.params.code_length();
    cfg.validate()?;

    // query codes are needed for the radius metric either way
    let r = &cfg.retrieval;
    let mut run = run_queries(&ckpt.params, &set, &queries, r.mode, r.radius, 0)?;
    if let Some(path) = args.rankings.as_ref().or(cfg.paths.rankings.as_ref()) {
        run.rankings = read_rankings(path, queries.num_items())?;
    }
    check_full_rankings(&run.rankings, set.len())?;
    let report = evaluate(&set, &run.codes, &run.rankings, &queries, &database, &cfg.eval, r.mode)?;
    emit(out.as_deref(), &format_report(&report))
}

/// Names of the files written by `baseline` inside its output directory.
pub const BASELINE_FILES: [&str; 5] = ["checkpoint.txt", "codes.qdwh", "rankings.tsv", "report.toml", "loss_log.tsv"];

fn baseline_cmd(args: BaselineArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    args.train.apply(&mut cfg);
    args.retrieval.apply(&mut cfg);
    cfg.validate()?;
    let db_path = require(&args.database, &cfg.paths.database, "database")?;
    let queries_path = require(&args.queries, &cfg.paths.queries, "queries")?;
    let database = read_dataset(&db_path)?;
    let queries = read_dataset(&queries_path)?;

    let (params, report) = match (args.variant, &args.checkpoint) {
        (Variant::Dwh, Some(path)) => {
            let ckpt = read_checkpoint(path)?;
            (fixed_weights(&ckpt.params), TrainReport::default())
        }
        (variant, _) => build_variant(variant, &cfg, &database, |_, _| {})?,
    };
    let step = report.final_step;
    let outputs = baseline_outputs(params, report, &cfg, &database, &queries)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let ckpt = Checkpoint {
        params: outputs.params.clone(),
        step,
        config: cfg,
    };
    let texts: [Vec<u8>; 5] = [
        format_checkpoint(&ckpt).into_bytes(),
        outputs.codes,
        outputs.rankings.into_bytes(),
        outputs.report.into_bytes(),
        outputs.loss_log.into_bytes(),
    ];
    for (name, bytes) in BASELINE_FILES.iter().zip(texts) {
        write_atomic(&args.out_dir.join(name), &bytes)?;
    }
    Ok(())
}

struct BaselineOutputs {
    params: crate::model::ModelParams,
    codes: Vec<u8>,
    rankings: String,
    report: String,
    loss_log: String,
}

fn baseline_outputs(
    params: crate::model::ModelParams,
    train_report: TrainReport,
    cfg: &RunConfig,
    database: &Dataset,
    queries: &Dataset,
) -> Result<BaselineOutputs> {
    let set = encode_dataset(&params, database)?;
    let r = &cfg.retrieval;
    let full = run_queries(&params, &set, queries, r.mode, r.radius, 0)?;
    let report = evaluate(&set, &full.codes, &full.rankings, queries, database, &cfg.eval, r.mode)?;
    let rankings = if r.k == 0 {
        full.rankings
    } else {
        run_queries(&params, &set, queries, r.mode, r.radius, r.k)?.rankings
    };
    Ok(BaselineOutputs {
        codes: encode_codes(&set)?,
        rankings: format_rankings(&rankings),
        report: format_report(&report),
        loss_log: format_loss_log(&train_report),
        params,
    })
}
