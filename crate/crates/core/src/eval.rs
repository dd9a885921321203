//! Retrieval quality metrics: AP/MAP, precision@k, precision within a
//! Hamming radius, and precision-recall curves.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::index::{BitCode, BitCodeSet, RankedList};
use crate::model::MultiHot;

/// Decides relevance: a database item is relevant to a query when their
/// label sets intersect.
#[derive(Debug, Clone, Copy)]
pub struct RelevanceJudge<'a> {
    queries: &'a [MultiHot],
    database: &'a [MultiHot],
}

impl<'a> RelevanceJudge<'a> {
    pub fn new(queries: &'a [MultiHot], database: &'a [MultiHot]) -> Self {
        RelevanceJudge { queries, database }
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn database_len(&self) -> usize {
        self.database.len()
    }

    pub fn is_relevant(&self, query: usize, item: usize) -> bool {
        self.queries[query].intersects(&self.database[item])
    }

    /// Relevant items in the whole database.
    pub fn relevant_count(&self, query: usize) -> usize {
        (0..self.database.len()).filter(|&i| self.is_relevant(query, i)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragePrecision {
    pub value: f64,
    /// Set when no relevant item was available, in which case `value` is 0.
    pub no_relevant: bool,
}

/// `AP = (1/R) sum_k (R_k / k) rel_k` over the ranking.
///
/// Without truncation `R` counts relevant items in the whole database. With
/// `truncation = Some(t)` only the top `t` positions are scored and `R`
/// counts the relevant items among them.
pub fn average_precision(
    ranked: &RankedList,
    judge: &RelevanceJudge<'_>,
    query: usize,
    truncation: Option<usize>,
) -> AveragePrecision {
    let depth = truncation.map_or(ranked.len(), |t| t.min(ranked.len()));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, item) in ranked.items().take(depth).enumerate() {
        if judge.is_relevant(query, item) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    let total = match truncation {
        Some(_) => hits,
        None => judge.relevant_count(query),
    };
    if total == 0 {
        return AveragePrecision {
            value: 0.0,
            no_relevant: true,
        };
    }
    AveragePrecision {
        value: sum / total as f64,
        no_relevant: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanAveragePrecision {
    pub map: f64,
    pub queries_without_relevant: usize,
}

/// Mean AP over queries; `rankings[i]` belongs to query `i`.
pub fn mean_average_precision(
    rankings: &[RankedList],
    judge: &RelevanceJudge<'_>,
    truncation: Option<usize>,
) -> Result<MeanAveragePrecision> {
    if rankings.is_empty() {
        return Err(Error::EmptyInput("no queries to evaluate".into()));
    }
    check_len("rankings per query", judge.num_queries(), rankings.len())?;
    let mut sum = 0.0;
    let mut degenerate = 0;
    for (query, ranked) in rankings.iter().enumerate() {
        let ap = average_precision(ranked, judge, query, truncation);
        sum += ap.value;
        degenerate += usize::from(ap.no_relevant);
    }
    Ok(MeanAveragePrecision {
        map: sum / rankings.len() as f64,
        queries_without_relevant: degenerate,
    })
}

/// `(k, relevant in top k / k)` for every requested cutoff.
pub fn precision_at_k(
    ranked: &RankedList,
    judge: &RelevanceJudge<'_>,
    query: usize,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let n = ranked.len();
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::OutOfRange { index: bad, len: n });
    }
    let mut prefix_hits = Vec::with_capacity(n + 1);
    prefix_hits.push(0usize);
    for item in ranked.items() {
        let last = *prefix_hits.last().unwrap();
        prefix_hits.push(last + usize::from(judge.is_relevant(query, item)));
    }
    Ok(ks.iter().map(|&k| (k, prefix_hits[k] as f64 / k as f64)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiusPrecision {
    pub value: f64,
    /// No database item fell within the radius; `value` is 0.
    pub empty_bucket: bool,
}

/// Precision among all items within plain Hamming distance `radius`
/// (hash lookup).
pub fn precision_within_radius(
    set: &BitCodeSet,
    query_code: &BitCode,
    judge: &RelevanceJudge<'_>,
    query: usize,
    radius: usize,
) -> Result<RadiusPrecision> {
    if radius > set.code_length() {
        return Err(Error::Precondition(format!(
            "radius {radius} exceeds code length {}",
            set.code_length()
        )));
    }
    check_len("database labels", set.len(), judge.database_len())?;
    let dist = set.hamming_scan(query_code)?;
    let mut found = 0usize;
    let mut relevant = 0usize;
    for (item, &d) in dist.iter().enumerate() {
        if d as usize <= radius {
            found += 1;
            relevant += usize::from(judge.is_relevant(query, item));
        }
    }
    if found == 0 {
        return Ok(RadiusPrecision {
            value: 0.0,
            empty_bucket: true,
        });
    }
    Ok(RadiusPrecision {
        value: relevant as f64 / found as f64,
        empty_bucket: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` at each rank holding a relevant item.
    pub points: Vec<(f64, f64)>,
    pub no_relevant: bool,
}

pub fn pr_curve(ranked: &RankedList, judge: &RelevanceJudge<'_>, query: usize) -> PrCurve {
    let total = judge.relevant_count(query);
    if total == 0 {
        return PrCurve {
            points: Vec::new(),
            no_relevant: true,
        };
    }
    let mut hits = 0usize;
    let mut points = Vec::new();
    for (pos, item) in ranked.items().enumerate() {
        if judge.is_relevant(query, item) {
            hits += 1;
            points.push((hits as f64 / total as f64, hits as f64 / (pos + 1) as f64));
        }
    }
    PrCurve {
        points,
        no_relevant: false,
    }
}

/// Recall levels at which per-query curves are averaged in a report.
pub const PR_RECALL_LEVELS: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Interpolated precision: the best precision at any recall `>= level`.
fn interpolated_precision(curve: &PrCurve, level: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|(r, _)| *r >= level - 1e-12)
        .map(|&(_, p)| p)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub radius: usize,
    /// MAP truncation depth; `None` scores the full ranking.
    pub truncation: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ks: vec![1, 5, 10, 20, 50, 100, 200, 500, 1000],
            radius: 2,
            truncation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAtK {
    pub k: usize,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub code_length: usize,
    pub database_size: usize,
    pub num_queries: usize,
    pub mode: String,
    /// 0 means the full ranking was scored.
    pub map_truncation: usize,
    pub map_normalization: String,
    pub radius: usize,
}

/// Aggregate metrics of one retrieval run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub precision_within_radius: f64,
    pub empty_radius_buckets: usize,
    pub queries_without_relevant: usize,
    pub precision_at_k: Vec<PrecisionAtK>,
    pub pr_curve: Vec<PrPoint>,
    pub metadata: ReportMetadata,
}

/// Scores one retrieval run. Cutoffs larger than the ranking length are
/// skipped; the PR curve is the 11-point interpolated curve averaged over
/// queries that have at least one relevant item.
pub fn evaluate_run(
    set: &BitCodeSet,
    query_codes: &[BitCode],
    rankings: &[RankedList],
    judge: &RelevanceJudge<'_>,
    settings: &EvalSettings,
    mode: &str,
) -> Result<EvalReport> {
    check_len("query codes", rankings.len(), query_codes.len())?;
    let map = mean_average_precision(rankings, judge, settings.truncation)?;
    let shortest = rankings.iter().map(RankedList::len).min().unwrap_or(0);
    let ks: Vec<usize> = settings.ks.iter().copied().filter(|&k| k >= 1 && k <= shortest).collect();

    let nq = rankings.len() as f64;
    let mut p_at_k = vec![0.0; ks.len()];
    let mut radius_sum = 0.0;
    let mut empty = 0;
    let mut pr_sum = [0.0; PR_RECALL_LEVELS.len()];
    let mut pr_queries = 0usize;
    for (query, (ranked, code)) in rankings.iter().zip(query_codes).enumerate() {
        for (acc, (_, p)) in p_at_k.iter_mut().zip(precision_at_k(ranked, judge, query, &ks)?) {
            *acc += p;
        }
        let rp = precision_within_radius(set, code, judge, query, settings.radius)?;
        radius_sum += rp.value;
        empty += usize::from(rp.empty_bucket);
        let curve = pr_curve(ranked, judge, query);
        if !curve.no_relevant {
            pr_queries += 1;
            for (acc, &level) in pr_sum.iter_mut().zip(&PR_RECALL_LEVELS) {
                *acc += interpolated_precision(&curve, level);
            }
        }
    }

    Ok(EvalReport {
        map: map.map,
        precision_within_radius: radius_sum / nq,
        empty_radius_buckets: empty,
        queries_without_relevant: map.queries_without_relevant,
        precision_at_k: ks
            .iter()
            .zip(&p_at_k)
            .map(|(&k, &sum)| PrecisionAtK { k, precision: sum / nq })
            .collect(),
        pr_curve: PR_RECALL_LEVELS
            .iter()
            .zip(&pr_sum)
            .map(|(&recall, &sum)| PrPoint {
                recall,
                precision: if pr_queries == 0 { 0.0 } else { sum / pr_queries as f64 },
            })
            .collect(),
        metadata: ReportMetadata {
            code_length: set.code_length(),
            database_size: set.len(),
            num_queries: rankings.len(),
            mode: mode.to_string(),
            map_truncation: settings.truncation.unwrap_or(0),
            map_normalization: if settings.truncation.is_some() {
                "relevant-in-prefix".into()
            } else {
                "relevant-in-database".into()
            },
            radius: settings.radius,
        },
    })
}
