//! Bit-packed binary codes, query-adaptive weights, and Hamming /
//! weighted-Hamming ranking.
//!
//! Bit `k` of a code lives in word `k / 64` at position `k % 64`. Read as
//! little-endian bytes this is byte `k / 8`, position `k % 8`, which is the
//! on-disk layout. Bits beyond the code length are always zero.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{check_len, Error, Result};
use crate::model::{binarize, ClassProbabilities, ModelParams};

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

pub fn bytes_for(bits: usize) -> usize {
    bits.div_ceil(8)
}

/// One packed binary code.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitCode {
    words: Vec<u64>,
    len: usize,
}

impl BitCode {
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut words = vec![0u64; words_for(bits.len())];
        for (k, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            words[k / 64] |= 1 << (k % 64);
        }
        BitCode { words, len: bits.len() }
    }

    /// Parses `ceil(len / 8)` bytes; padding bits must be zero.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        check_len("packed code bytes", bytes_for(len), bytes.len())?;
        let mut words = vec![0u64; words_for(len)];
        for (i, &byte) in bytes.iter().enumerate() {
            words[i / 8] |= u64::from(byte) << (8 * (i % 8));
        }
        let code = BitCode { words, len };
        if code.padding_is_clear() {
            Ok(code)
        } else {
            Err(Error::Precondition("nonzero padding bits in packed code".into()))
        }
    }

    pub(crate) fn from_words(words: &[u64], len: usize) -> Self {
        BitCode {
            words: words.to_vec(),
            len,
        }
    }

    fn padding_is_clear(&self) -> bool {
        let used = self.len % 64;
        used == 0 || self.words.last().is_none_or(|&w| w >> used == 0)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, k: usize) -> bool {
        (self.words[k / 64] >> (k % 64)) & 1 == 1
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.len).map(|k| self.get(k)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = bytes_for(self.len);
        (0..n).map(|i| (self.words[i / 8] >> (8 * (i % 8))) as u8).collect()
    }
}

/// Immutable set of `n` packed codes of `q` bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitCodeSet {
    code_length: usize,
    words_per_code: usize,
    words: Vec<u64>,
}

impl BitCodeSet {
    pub fn new(code_length: usize) -> Self {
        BitCodeSet {
            code_length,
            words_per_code: words_for(code_length),
            words: Vec::new(),
        }
    }

    /// Packs a list of equal-length bit vectors.
    pub fn build(code_length: usize, codes: &[Vec<bool>]) -> Result<Self> {
        let mut set = BitCodeSet::new(code_length);
        for code in codes {
            set.push(&BitCode::from_bits(code))?;
        }
        Ok(set)
    }

    pub fn push(&mut self, code: &BitCode) -> Result<()> {
        check_len("code length", self.code_length, code.len())?;
        self.words.extend_from_slice(&code.words);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len().checked_div(self.words_per_code).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    pub fn bytes_per_code(&self) -> usize {
        bytes_for(self.code_length)
    }

    fn item_words(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    pub fn code(&self, i: usize) -> Result<BitCode> {
        self.check_index(i)?;
        Ok(BitCode::from_words(self.item_words(i), self.code_length))
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i < self.len() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                index: i,
                len: self.len(),
            })
        }
    }

    pub fn hamming_distance(&self, i: usize, j: usize) -> Result<u32> {
        self.check_index(i)?;
        self.check_index(j)?;
        Ok(popcount_xor(self.item_words(i), self.item_words(j)))
    }

    fn check_query(&self, query: &BitCode) -> Result<()> {
        check_len("query code length", self.code_length, query.len())
    }

    /// Plain Hamming distance from `query` to every item.
    pub fn hamming_scan(&self, query: &BitCode) -> Result<Vec<u32>> {
        self.check_query(query)?;
        let out = if self.words_per_code == 1 {
            let q = query.words[0];
            self.words.iter().map(|&w| (w ^ q).count_ones()).collect()
        } else {
            self.words
                .chunks_exact(self.words_per_code)
                .map(|w| popcount_xor(w, &query.words))
                .collect()
        };
        Ok(out)
    }
}

fn popcount_xor(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Per-bit nonnegative weights for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryWeights(pub Array1<f64>);

impl QueryWeights {
    pub fn uniform(code_length: usize) -> Self {
        QueryWeights(Array1::ones(code_length))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `w_q = W^T p`: class rows fused by predicted class probability.
pub fn query_weights(class_weights: &Array2<f64>, probs: &ClassProbabilities) -> Result<QueryWeights> {
    let p = probs.values();
    check_len("class probabilities", class_weights.nrows(), p.len())?;
    let q = class_weights.ncols();
    let mut w = Array1::zeros(q);
    for k in 0..q {
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += class_weights[[i, k]] * pi;
        }
        w[k] = acc;
    }
    Ok(QueryWeights(w))
}

/// Precomputed squared weights for scoring packed codes.
#[derive(Debug, Clone)]
struct WeightedScorer {
    squared: Vec<f64>,
}

impl WeightedScorer {
    fn new(weights: ArrayView1<'_, f64>) -> Self {
        WeightedScorer {
            squared: weights.iter().map(|w| w * w).collect(),
        }
    }

    /// Sums squared weights over differing bits in ascending bit order.
    fn distance(&self, a: &[u64], b: &[u64]) -> f64 {
        let mut total = 0.0;
        for (word_idx, (x, y)) in a.iter().zip(b).enumerate() {
            let mut diff = x ^ y;
            while diff != 0 {
                let bit = diff.trailing_zeros() as usize;
                total += self.squared[word_idx * 64 + bit];
                diff &= diff - 1;
            }
        }
        total
    }
}

/// `sum_k w_k^2 [a_k != b_k]`
pub fn weighted_hamming(weights: &QueryWeights, a: &BitCode, b: &BitCode) -> Result<f64> {
    check_len("code length", weights.len(), a.len())?;
    check_len("code length", weights.len(), b.len())?;
    Ok(WeightedScorer::new(weights.0.view()).distance(&a.words, &b.words))
}

/// Distance used to order a [`RankedList`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankKey {
    Hamming,
    WeightedHamming,
}

/// Items ordered by non-decreasing distance, ties by ascending item index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub key: RankKey,
    pub entries: Vec<(usize, f64)>,
}

impl RankedList {
    pub fn items(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }
}

fn sort_by_distance(entries: &mut [(usize, f64)]) {
    entries.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
}

/// Every item sorted by weighted Hamming distance to `query`.
pub fn rank_exact(set: &BitCodeSet, query: &BitCode, weights: &QueryWeights) -> Result<RankedList> {
    set.check_query(query)?;
    check_len("query weights", set.code_length(), weights.len())?;
    let scorer = WeightedScorer::new(weights.0.view());
    let mut entries: Vec<(usize, f64)> = (0..set.len())
        .map(|i| (i, scorer.distance(set.item_words(i), &query.words)))
        .collect();
    sort_by_distance(&mut entries);
    Ok(RankedList {
        key: RankKey::WeightedHamming,
        entries,
    })
}

/// Top `k` items by plain Hamming distance (bucketed, so linear in `n`).
pub fn rank_hamming(set: &BitCodeSet, query: &BitCode, k: usize) -> Result<RankedList> {
    let dist = set.hamming_scan(query)?;
    let q = set.code_length();
    let radius = radius_covering(&dist, q, 0, k.min(set.len()));
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); radius + 1];
    for (i, &d) in dist.iter().enumerate() {
        if (d as usize) <= radius {
            buckets[d as usize].push(i);
        }
    }
    let entries = buckets
        .into_iter()
        .enumerate()
        .flat_map(|(d, items)| items.into_iter().map(move |i| (i, d as f64)))
        .take(k)
        .collect();
    Ok(RankedList {
        key: RankKey::Hamming,
        entries,
    })
}

/// Smallest radius `>= start` holding at least `k` items, capped at `q`.
fn radius_covering(dist: &[u32], q: usize, start: usize, k: usize) -> usize {
    let mut counts = vec![0usize; q + 1];
    for &d in dist {
        counts[d as usize] += 1;
    }
    let mut radius = start.min(q);
    let mut covered: usize = counts[..=radius].iter().sum();
    while covered < k && radius < q {
        radius += 1;
        covered += counts[radius];
    }
    radius
}

/// Coarse-to-fine ranking: gather every item within plain Hamming distance
/// `radius` (growing the radius until at least `k` candidates exist or it
/// reaches `q`), sort those by weighted Hamming distance, keep the top `k`.
pub fn rank_two_phase(
    set: &BitCodeSet,
    query: &BitCode,
    weights: &QueryWeights,
    radius: usize,
    k: usize,
) -> Result<RankedList> {
    check_len("query weights", set.code_length(), weights.len())?;
    if radius > set.code_length() {
        return Err(Error::Precondition(format!(
            "radius {radius} exceeds code length {}",
            set.code_length()
        )));
    }
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    let dist = set.hamming_scan(query)?;
    let radius = radius_covering(&dist, set.code_length(), radius, k.min(set.len()));
    let scorer = WeightedScorer::new(weights.0.view());
    let mut entries: Vec<(usize, f64)> = dist
        .iter()
        .enumerate()
        .filter(|(_, &d)| d as usize <= radius)
        .map(|(i, _)| (i, scorer.distance(set.item_words(i), &query.words)))
        .collect();
    sort_by_distance(&mut entries);
    entries.truncate(k);
    Ok(RankedList {
        key: RankKey::WeightedHamming,
        entries,
    })
}

/// Ranking strategy for [`retrieve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalMode {
    Exact,
    TwoPhase,
}

/// Everything derived from one query vector.
#[derive(Debug, Clone)]
pub struct EncodedQuery {
    pub code: BitCode,
    pub probs: ClassProbabilities,
    pub weights: QueryWeights,
}

pub fn encode_query(params: &ModelParams, x: ArrayView1<'_, f64>) -> Result<EncodedQuery> {
    let f = params.forward_features(x)?;
    let probs = params.forward_class_probs(f.view())?;
    let code = BitCode::from_bits(&binarize(&params.forward_hash(f.view())?));
    let weights = query_weights(&params.class_weights, &probs)?;
    Ok(EncodedQuery { code, probs, weights })
}

/// Query-adaptive retrieval of the top `k` items for one query vector.
pub fn retrieve(
    params: &ModelParams,
    x: ArrayView1<'_, f64>,
    set: &BitCodeSet,
    mode: RetrievalMode,
    radius: usize,
    k: usize,
) -> Result<RankedList> {
    check_len("code length", params.code_length(), set.code_length())?;
    let query = encode_query(params, x)?;
    match mode {
        RetrievalMode::Exact => {
            let mut ranked = rank_exact(set, &query.code, &query.weights)?;
            ranked.truncate(k);
            Ok(ranked)
        }
        RetrievalMode::TwoPhase => rank_two_phase(set, &query.code, &query.weights, radius, k),
    }
}
