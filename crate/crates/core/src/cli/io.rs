//! On-disk formats: dataset TSV, text checkpoints, binary code files,
//! ranking TSV and the loss log.
//!
//! Every writer goes through a temporary file in the target directory that
//! is renamed into place, so a failed command never leaves a partial file.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::cli::config::RunConfig;
use crate::error::{Error, Result};
use crate::index::{bytes_for, BitCode, BitCodeSet, RankKey, RankedList};
use crate::model::{AffineLayer, Dataset, ModelParams, MultiHot, ParamKind};
use crate::trainer::TrainReport;

pub const CODES_MAGIC: &[u8; 4] = b"QDWH";
pub const CODES_VERSION: u8 = 1;
pub const CODES_HEADER_LEN: usize = 15;
const CHECKPOINT_HEADER: &str = "qadwh-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------- dataset

/// Header `n<TAB>d<TAB>c`, then one line per item: `d` floats and a final
/// field of `;`-separated 0-based class indices.
pub fn format_dataset(data: &Dataset) -> String {
    let mut out = String::new();
    writeln!(out, "{}\t{}\t{}", data.num_items(), data.feature_dim(), data.num_classes()).unwrap();
    for i in 0..data.num_items() {
        for v in data.feature(i) {
            write!(out, "{v:?}\t").unwrap();
        }
        let classes: Vec<String> = data.label(i).classes().map(|c| c.to_string()).collect();
        writeln!(out, "{}", classes.join(";")).unwrap();
    }
    out
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let dims: Vec<usize> = header
        .split('\t')
        .map(|f| f.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(path, 1, format!("malformed header: {e}")))?;
    let [n, d, c] = dims[..] else {
        return Err(parse_err(path, 1, format!("header needs 3 fields, found {}", dims.len())));
    };
    if c < 2 {
        return Err(parse_err(path, 1, "need at least 2 classes"));
    }

    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        let (line_no, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, row + 2, format!("expected {n} rows, found {row}")))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != d + 1 {
            return Err(parse_err(path, line_no, format!("expected {} fields, found {}", d + 1, fields.len())));
        }
        for (j, field) in fields[..d].iter().enumerate() {
            features[[row, j]] = field
                .parse::<f64>()
                .map_err(|e| parse_err(path, line_no, format!("field {}: {e}", j + 1)))?;
        }
        let label_field = fields[d].trim();
        if label_field.is_empty() {
            return Err(parse_err(path, line_no, "empty label field"));
        }
        let mut classes = Vec::new();
        for part in label_field.split(';') {
            let class: usize = part
                .parse()
                .map_err(|e| parse_err(path, line_no, format!("bad class index {part:?}: {e}")))?;
            if class >= c {
                return Err(parse_err(path, line_no, format!("class index {class} out of range for {c} classes")));
            }
            classes.push(class);
        }
        labels.push(MultiHot::from_classes(c, &classes)?);
    }
    if let Some((line_no, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(parse_err(path, line_no, format!("unexpected trailing row {extra:?}")));
    }
    Dataset::new(features, labels, c)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&read_text(path)?, path)
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, format_dataset(data).as_bytes())
}

// ------------------------------------------------------------- checkpoint

/// Model parameters plus training provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: usize,
    pub config: RunConfig,
}

/// Text checkpoint: a version line, the step count, each tensor as
/// `tensor <name> <rows> <cols>` followed by one line per row, then the
/// config snapshot after a `config` line.
pub fn format_checkpoint(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_HEADER} {CHECKPOINT_VERSION}").unwrap();
    writeln!(out, "step {}", ckpt.step).unwrap();
    for t in ckpt.params.tensors() {
        writeln!(out, "tensor {} {} {}", t.kind.name(), t.rows, t.cols).unwrap();
        for row in t.data.chunks(t.cols.max(1)) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", cells.join(" ")).unwrap();
        }
    }
    writeln!(out, "config").unwrap();
    out.push_str(&ckpt.config.to_toml());
    out
}

fn parse_kind(name: &str) -> Option<ParamKind> {
    Some(match name {
        "hash.weight" => ParamKind::HashWeight,
        "hash.bias" => ParamKind::HashBias,
        "class_weights" => ParamKind::ClassWeights,
        "classifier.weight" => ParamKind::ClassifierWeight,
        "classifier.bias" => ParamKind::ClassifierBias,
        other => {
            let rest = other.strip_prefix("feature.")?;
            let (idx, suffix) = rest.split_once('.')?;
            let idx: usize = idx.parse().ok()?;
            match suffix {
                "weight" => ParamKind::FeatureWeight(idx),
                "bias" => ParamKind::FeatureBias(idx),
                _ => return None,
            }
        }
    })
}

pub fn parse_checkpoint(text: &str, path: &Path) -> Result<Checkpoint> {
    let lines: Vec<&str> = text.lines().collect();
    let err = |line: usize, msg: String| parse_err(path, line + 1, msg);
    let header = lines.first().copied().unwrap_or_default();
    match header.split_once(' ') {
        Some((CHECKPOINT_HEADER, v)) if v.trim() == CHECKPOINT_VERSION.to_string() => {}
        _ => return Err(err(0, format!("not a version {CHECKPOINT_VERSION} checkpoint"))),
    }
    let step = lines
        .get(1)
        .and_then(|l| l.strip_prefix("step "))
        .and_then(|s| s.trim().parse::<usize>().ok())
        .ok_or_else(|| err(1, "missing step line".into()))?;

    let mut tensors: Vec<(ParamKind, Array2<f64>, usize)> = Vec::new();
    let mut i = 2;
    while i < lines.len() && lines[i] != "config" {
        let parts: Vec<&str> = lines[i].split_whitespace().collect();
        let (kind, rows, cols) = match parts[..] {
            ["tensor", name, rows, cols] => {
                let kind = parse_kind(name).ok_or_else(|| err(i, format!("unknown tensor {name:?}")))?;
                let rows: usize = rows.parse().map_err(|_| err(i, "bad row count".into()))?;
                let cols: usize = cols.parse().map_err(|_| err(i, "bad column count".into()))?;
                (kind, rows, cols)
            }
            _ => return Err(err(i, format!("expected tensor header, found {:?}", lines[i]))),
        };
        let start = i;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let line_idx = start + 1 + r;
            let line = lines.get(line_idx).ok_or_else(|| err(line_idx, "truncated tensor".into()))?;
            let before = data.len();
            for cell in line.split_whitespace() {
                data.push(cell.parse::<f64>().map_err(|e| err(line_idx, format!("{cell:?}: {e}")))?);
            }
            if data.len() - before != cols {
                return Err(err(line_idx, format!("expected {cols} values, found {}", data.len() - before)));
            }
        }
        let array = Array2::from_shape_vec((rows, cols), data).expect("shape checked");
        tensors.push((kind, array, start));
        i = start + 1 + rows;
    }
    let config_text = if i < lines.len() { lines[i + 1..].join("\n") } else { String::new() };
    let config = RunConfig::parse(&config_text).map_err(|e| err(i, format!("config snapshot: {e}")))?;

    let num_layers = tensors
        .iter()
        .filter_map(|(k, _, _)| match k {
            ParamKind::FeatureWeight(l) => Some(l + 1),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let mut take = |kind: ParamKind| -> Result<Array2<f64>> {
        let pos = tensors
            .iter()
            .position(|(k, _, _)| *k == kind)
            .ok_or_else(|| parse_err(path, 0, format!("missing tensor {}", kind.name())))?;
        Ok(tensors.swap_remove(pos).1)
    };
    let as_vector = |m: Array2<f64>, kind: ParamKind| -> Result<Array1<f64>> {
        if m.nrows() != 1 {
            return Err(parse_err(path, 0, format!("{} must have one row", kind.name())));
        }
        Ok(m.row(0).to_owned())
    };
    let mut feature_layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let weight = take(ParamKind::FeatureWeight(l))?;
        let bias = as_vector(take(ParamKind::FeatureBias(l))?, ParamKind::FeatureBias(l))?;
        feature_layers.push(AffineLayer { weight, bias });
    }
    let params = ModelParams {
        feature_layers,
        hash_weight: take(ParamKind::HashWeight)?,
        hash_bias: as_vector(take(ParamKind::HashBias)?, ParamKind::HashBias)?,
        class_weights: take(ParamKind::ClassWeights)?,
        classifier_weight: take(ParamKind::ClassifierWeight)?,
        classifier_bias: as_vector(take(ParamKind::ClassifierBias)?, ParamKind::ClassifierBias)?,
    };
    if let Some((kind, _, line)) = tensors.first() {
        return Err(err(*line, format!("unexpected tensor {}", kind.name())));
    }
    params
        .check_consistent()
        .map_err(|e| parse_err(path, 0, format!("inconsistent tensors: {e}")))?;
    Ok(Checkpoint { params, step, config })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&read_text(path)?, path)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, format_checkpoint(ckpt).as_bytes())
}

// ------------------------------------------------------------------ codes

/// `QDWH`, version byte, `q` as u16 LE, `n` as u64 LE, then `n` records of
/// `ceil(q/8)` bytes.
pub fn encode_codes(set: &BitCodeSet) -> Result<Vec<u8>> {
    let q = u16::try_from(set.code_length())
        .map_err(|_| Error::Precondition(format!("code length {} does not fit the file format", set.code_length())))?;
    let mut out = Vec::with_capacity(CODES_HEADER_LEN + set.len() * set.bytes_per_code());
    out.extend_from_slice(CODES_MAGIC);
    out.push(CODES_VERSION);
    out.extend_from_slice(&q.to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for i in 0..set.len() {
        out.extend_from_slice(&set.code(i)?.to_bytes());
    }
    Ok(out)
}

pub fn decode_codes(bytes: &[u8], path: &Path) -> Result<BitCodeSet> {
    let bad = |msg: String| parse_err(path, 0, msg);
    if bytes.len() < CODES_HEADER_LEN || &bytes[..4] != CODES_MAGIC {
        return Err(bad("missing QDWH header".into()));
    }
    if bytes[4] != CODES_VERSION {
        return Err(bad(format!("unsupported codes version {}", bytes[4])));
    }
    let q = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
    let n = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
    let width = bytes_for(q);
    let expected = n
        .checked_mul(width)
        .and_then(|b| b.checked_add(CODES_HEADER_LEN))
        .ok_or_else(|| bad("item count overflows".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for n={n}, q={q}; found {}", bytes.len())));
    }
    let mut set = BitCodeSet::new(q);
    for (i, record) in bytes[CODES_HEADER_LEN..].chunks_exact(width.max(1)).take(n).enumerate() {
        let code = BitCode::from_bytes(record, q).map_err(|e| bad(format!("record {i}: {e}")))?;
        set.push(&code)?;
    }
    Ok(set)
}

pub fn read_codes(path: &Path) -> Result<BitCodeSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_codes(&bytes, path)
}

pub fn write_codes(set: &BitCodeSet, path: &Path) -> Result<()> {
    write_atomic(path, &encode_codes(set)?)
}

// --------------------------------------------------------------- rankings

/// Lines `query_idx<TAB>rank<TAB>item_idx<TAB>distance`, ranks from 1.
pub fn format_rankings(rankings: &[RankedList]) -> String {
    let mut out = String::new();
    for (q, ranked) in rankings.iter().enumerate() {
        for (rank, &(item, dist)) in ranked.entries.iter().enumerate() {
            writeln!(out, "{q}\t{}\t{item}\t{dist:?}", rank + 1).unwrap();
        }
    }
    out
}

/// Parses a ranking file for `num_queries` queries; every query must appear.
pub fn parse_rankings(text: &str, num_queries: usize, path: &Path) -> Result<Vec<RankedList>> {
    let mut rankings: Vec<RankedList> = (0..num_queries)
        .map(|_| RankedList {
            key: RankKey::WeightedHamming,
            entries: Vec::new(),
        })
        .collect();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [q, rank, item, dist] = fields[..] else {
            return Err(parse_err(path, line_no, format!("expected 4 fields, found {}", fields.len())));
        };
        let num = |s: &str| s.parse::<usize>().map_err(|e| parse_err(path, line_no, format!("{s:?}: {e}")));
        let (q, rank, item) = (num(q)?, num(rank)?, num(item)?);
        let dist: f64 = dist.parse().map_err(|e| parse_err(path, line_no, format!("{dist:?}: {e}")))?;
        let list = rankings
            .get_mut(q)
            .ok_or_else(|| parse_err(path, line_no, format!("query index {q} out of range for {num_queries} queries")))?;
        if rank != list.entries.len() + 1 {
            return Err(parse_err(path, line_no, format!("rank {rank} out of order for query {q}")));
        }
        list.entries.push((item, dist));
    }
    let missing: Vec<String> = rankings
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_empty())
        .map(|(q, _)| q.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(parse_err(path, 0, format!("missing rankings for queries {}", missing.join(", "))));
    }
    Ok(rankings)
}

pub fn read_rankings(path: &Path, num_queries: usize) -> Result<Vec<RankedList>> {
    parse_rankings(&read_text(path)?, num_queries, path)
}

// --------------------------------------------------------------- loss log

pub fn format_loss_log(report: &TrainReport) -> String {
    let mut out = String::from("step\ttriplet_loss\tclass_loss\tlr\n");
    for r in &report.steps {
        writeln!(out, "{}\t{:?}\t{:?}\t{:?}", r.step, r.triplet_loss, r.class_loss, r.lr).unwrap();
    }
    out
}
