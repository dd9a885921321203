//! In-process building blocks behind the CLI verbs: train, encode, query,
//! evaluate, and the baseline variants.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cli::config::{Mode, RunConfig};
use crate::error::{check_len, Result};
use crate::eval::{evaluate_run, EvalReport, EvalSettings, RelevanceJudge};
use crate::index::{encode_query, rank_exact, rank_two_phase, BitCode, BitCodeSet, QueryWeights, RankedList};
use crate::model::{Dataset, ModelParams};
use crate::trainer::{train_with_hook, TrainConfig, TrainReport};

/// Retrieval method compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Learned class-wise weights fused per query.
    Qadwh,
    /// One weight vector, the column mean of the learned class weights.
    Dwh,
    /// Class weights frozen at one during training: plain Hamming ranking.
    Unweighted,
    /// Random Gaussian projections of the raw features, signed at zero.
    Lsh,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Qadwh, Variant::Dwh, Variant::Unweighted, Variant::Lsh];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Qadwh => "qadwh",
            Variant::Dwh => "dwh",
            Variant::Unweighted => "unweighted",
            Variant::Lsh => "lsh",
        }
    }
}

/// Fresh parameters for inputs of dimension `d` over `c` classes.
pub fn init_model(cfg: &RunConfig, d: usize, c: usize) -> Result<ModelParams> {
    let mut dims = vec![d];
    dims.extend(&cfg.model.hidden);
    ModelParams::init(&dims, cfg.model.code_length, c, cfg.model.seed)
}

pub fn train_model<F>(cfg: &RunConfig, train_cfg: &TrainConfig, database: &Dataset, hook: F) -> Result<(ModelParams, TrainReport)>
where
    F: FnMut(usize, &ModelParams),
{
    let params = init_model(cfg, database.feature_dim(), database.num_classes())?;
    train_with_hook(&params, database, train_cfg, hook)
}

/// Replaces every class row with the column mean, so every query receives
/// the same weights.
pub fn fixed_weights(params: &ModelParams) -> ModelParams {
    let mut out = params.clone();
    let mean = params.class_weights.mean_axis(ndarray::Axis(0)).expect("at least one class");
    for mut row in out.class_weights.rows_mut() {
        row.assign(&mean);
    }
    out
}

/// Random-projection hashing expressed as model parameters: no feature
/// layers, Gaussian hash weights, zero bias, unit class weights and a zero
/// classifier.
pub fn lsh_params(d: usize, q: usize, c: usize, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::init(&[d], q, c, seed)?.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.hash_weight = Array2::from_shape_fn((d, q), |_| StandardNormal.sample(&mut rng));
    params.class_weights = Array2::ones((c, q));
    params.classifier_bias = Array1::zeros(c);
    Ok(params)
}

/// Builds the parameters of one ablation variant. `hook` observes every
/// training step; LSH does not train and returns an empty report.
pub fn build_variant<F>(variant: Variant, cfg: &RunConfig, database: &Dataset, hook: F) -> Result<(ModelParams, TrainReport)>
where
    F: FnMut(usize, &ModelParams),
{
    match variant {
        Variant::Qadwh => train_model(cfg, &cfg.train, database, hook),
        Variant::Dwh => {
            let (params, report) = train_model(cfg, &cfg.train, database, hook)?;
            Ok((fixed_weights(&params), report))
        }
        Variant::Unweighted => {
            let train_cfg = TrainConfig {
                train_class_weights: false,
                ..cfg.train.clone()
            };
            train_model(cfg, &train_cfg, database, hook)
        }
        Variant::Lsh => Ok((
            lsh_params(database.feature_dim(), cfg.model.code_length, database.num_classes(), cfg.model.seed)?,
            TrainReport::default(),
        )),
    }
}

pub fn encode_dataset(params: &ModelParams, data: &Dataset) -> Result<BitCodeSet> {
    check_len("dataset feature dim", params.input_dim(), data.feature_dim())?;
    let mut set = BitCodeSet::new(params.code_length());
    for i in 0..data.num_items() {
        set.push(&BitCode::from_bits(&params.encode(data.feature(i))?))?;
    }
    Ok(set)
}

/// Rankings plus the per-query codes and weights they were built from.
#[derive(Debug, Clone)]
pub struct QueryRun {
    pub rankings: Vec<RankedList>,
    pub codes: Vec<BitCode>,
    pub weights: Vec<QueryWeights>,
}

/// Ranks the database for every query. `k = 0` returns the full ranking.
pub fn run_queries(
    params: &ModelParams,
    set: &BitCodeSet,
    queries: &Dataset,
    mode: Mode,
    radius: usize,
    k: usize,
) -> Result<QueryRun> {
    check_len("code length", params.code_length(), set.code_length())?;
    let k = if k == 0 { set.len() } else { k };
    let mut run = QueryRun {
        rankings: Vec::with_capacity(queries.num_items()),
        codes: Vec::with_capacity(queries.num_items()),
        weights: Vec::with_capacity(queries.num_items()),
    };
    for i in 0..queries.num_items() {
        let query = encode_query(params, queries.feature(i))?;
        let ranked = match mode {
            Mode::Exact => {
                let mut ranked = rank_exact(set, &query.code, &query.weights)?;
                ranked.truncate(k);
                ranked
            }
            Mode::TwoPhase => rank_two_phase(set, &query.code, &query.weights, radius, k.max(1))?,
        };
        run.rankings.push(ranked);
        run.codes.push(query.code);
        run.weights.push(query.weights);
    }
    Ok(run)
}

pub fn evaluate(
    set: &BitCodeSet,
    query_codes: &[BitCode],
    rankings: &[RankedList],
    queries: &Dataset,
    database: &Dataset,
    settings: &EvalSettings,
    mode: Mode,
) -> Result<EvalReport> {
    check_len("database size", set.len(), database.num_items())?;
    let judge = RelevanceJudge::new(queries.labels(), database.labels());
    evaluate_run(set, query_codes, rankings, &judge, settings, mode.as_str())
}

pub fn format_report(report: &EvalReport) -> String {
    toml::to_string(report).expect("report is always serializable")
}

/// Outputs of a full train/encode/query/eval chain held in memory.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub params: ModelParams,
    pub train_report: TrainReport,
    pub codes: BitCodeSet,
    pub queries: QueryRun,
    pub report: EvalReport,
}

/// Runs one variant end to end. Rankings cover the whole database so that
/// the report is not limited by `retrieval.k`.
pub fn run_variant<F>(
    variant: Variant,
    cfg: &RunConfig,
    database: &Dataset,
    queries: &Dataset,
    hook: F,
) -> Result<PipelineRun>
where
    F: FnMut(usize, &ModelParams),
{
    let (params, train_report) = build_variant(variant, cfg, database, hook)?;
    finish_pipeline(params, train_report, cfg, database, queries)
}

/// Runs the retrieval half of a variant on parameters trained elsewhere.
/// Only `Dwh` transforms them (column-mean weights); the other variants use
/// `params` as given.
pub fn finish_variant(
    variant: Variant,
    params: ModelParams,
    cfg: &RunConfig,
    database: &Dataset,
    queries: &Dataset,
) -> Result<PipelineRun> {
    let params = match variant {
        Variant::Dwh => fixed_weights(&params),
        _ => params,
    };
    finish_pipeline(params, TrainReport::default(), cfg, database, queries)
}

pub(crate) fn finish_pipeline(
    params: ModelParams,
    train_report: TrainReport,
    cfg: &RunConfig,
    database: &Dataset,
    queries: &Dataset,
) -> Result<PipelineRun> {
    let codes = encode_dataset(&params, database)?;
    let run = run_queries(&params, &codes, queries, cfg.retrieval.mode, cfg.retrieval.radius, 0)?;
    let report = evaluate(&codes, &run.codes, &run.rankings, queries, database, &cfg.eval, cfg.retrieval.mode)?;
    Ok(PipelineRun {
        params,
        train_report,
        codes,
        queries: run,
        report,
    })
}
