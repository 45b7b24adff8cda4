//! Exhaustive inner-product retrieval over ℓ2-normalized descriptors:
//! index construction, multi-scale descriptor extraction, average and
//! α-weighted query expansion, and average-precision evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::backbone::TinyFcn;
use crate::error::{Error, Result};
use crate::image::{resize_by_factor, Image};
use crate::numerics::{dot, l2_normalize, DescriptorVector};
use crate::pooling::{extract_descriptor, PoolingConfig, PoolingMode};

/// One scored database image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub id: u64,
    pub score: f64,
}

/// Search output: scores non-increasing, ties broken by ascending id.
pub type RankedList = Vec<RankedEntry>;

/// Relevant database ids per query id.
pub type GroundTruth = BTreeMap<u64, BTreeSet<u64>>;

/// Query-expansion knobs: how many top-ranked images to pool and the
/// similarity exponent for the α-weighted variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QEConfig {
    pub n_qe: usize,
    pub alpha: f64,
}

impl Default for QEConfig {
    fn default() -> Self {
        Self { n_qe: 50, alpha: 3.0 }
    }
}

/// Flat in-memory descriptor database. Entries keep insertion order so a
/// saved index round-trips byte for byte; ids are unique.
#[derive(Debug, Clone)]
pub struct DescriptorIndex {
    dim: usize,
    entries: Vec<(u64, DescriptorVector)>,
    by_id: BTreeMap<u64, usize>,
}

impl DescriptorIndex {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: Vec::new(), by_id: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u64, DescriptorVector)] {
        &self.entries
    }

    pub fn get(&self, id: u64) -> Option<&DescriptorVector> {
        self.by_id.get(&id).map(|&at| &self.entries[at].1)
    }

    pub fn push(&mut self, id: u64, descriptor: DescriptorVector) -> Result<()> {
        if descriptor.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "index entry",
                left: descriptor.dim(),
                right: self.dim,
            });
        }
        if self.by_id.contains_key(&id) {
            return Err(Error::DuplicateId { kind: "index", id });
        }
        self.by_id.insert(id, self.entries.len());
        self.entries.push((id, descriptor));
        Ok(())
    }
}

/// Scores every database entry against the query by inner product and sorts
/// descending, ties by ascending id. Every id appears exactly once.
pub fn search(index: &DescriptorIndex, query: &DescriptorVector) -> Result<RankedList> {
    if query.dim() != index.dim {
        return Err(Error::DimensionMismatch {
            context: "search query",
            left: query.dim(),
            right: index.dim,
        });
    }
    let mut ranked: RankedList = index
        .entries
        .iter()
        .map(|(id, d)| RankedEntry { id: *id, score: dot(&query.values, &d.values) })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    Ok(ranked)
}

/// Extracts one descriptor per scale factor and combines them component-wise
/// by the generalized mean whose exponent is the pooling exponent itself
/// (plain mean and max for the corresponding pooling modes), then
/// re-normalizes. Whitening, when used, applies after this combination.
///
/// The image is expected to be pre-sized (max-side cap applied upstream);
/// each scale then shrinks it by that factor.
pub fn multiscale_descriptor(
    net: &TinyFcn,
    cfg: &PoolingConfig,
    img: &Image,
    scales: &[f64],
) -> Result<DescriptorVector> {
    if scales.is_empty() {
        return Err(Error::NoScales);
    }
    let mut per_scale = Vec::with_capacity(scales.len());
    for &s in scales {
        let scaled = resize_by_factor(img, s)?;
        let d = extract_descriptor(net, cfg, &scaled).map_err(|e| match e {
            Error::ImageTooSmall { .. } => Error::ScaleTooSmall(s),
            other => other,
        })?;
        per_scale.push(d);
    }
    if per_scale.len() == 1 {
        // One-element generalized mean is the identity; keep the descriptor
        // bit-exact rather than routing it through powf.
        return Ok(per_scale.pop().expect("one descriptor"));
    }
    let dim = per_scale[0].dim();
    let count = per_scale.len() as f64;
    let mut combined = vec![0.0; dim];
    for (k, out) in combined.iter_mut().enumerate() {
        let column = per_scale.iter().map(|d| d.values[k]);
        *out = match cfg.mode {
            PoolingMode::Max => column.fold(f64::NEG_INFINITY, f64::max),
            PoolingMode::Average => column.sum::<f64>() / count,
            PoolingMode::Gem => {
                let p = cfg.exponent(k);
                (column.map(|v| v.powf(p)).sum::<f64>() / count).powf(1.0 / p)
            }
        };
    }
    Ok(l2_normalize(&DescriptorVector::raw(combined)))
}

/// Average query expansion: the query plus its top-ranked neighbors, all with
/// weight 1, re-normalized and re-issued.
pub fn average_qe(
    index: &DescriptorIndex,
    query: &DescriptorVector,
    initial: &RankedList,
    cfg: &QEConfig,
) -> Result<RankedList> {
    expanded_search(index, query, initial, cfg.n_qe, None)
}

/// α-weighted query expansion: neighbor weights are the query similarity
/// clamped at zero and raised to α. α=0 reduces to `average_qe`.
pub fn alpha_qe(
    index: &DescriptorIndex,
    query: &DescriptorVector,
    initial: &RankedList,
    cfg: &QEConfig,
) -> Result<RankedList> {
    expanded_search(index, query, initial, cfg.n_qe, Some(cfg.alpha))
}

fn expanded_search(
    index: &DescriptorIndex,
    query: &DescriptorVector,
    initial: &RankedList,
    n_qe: usize,
    alpha: Option<f64>,
) -> Result<RankedList> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if query.dim() != index.dim {
        return Err(Error::DimensionMismatch {
            context: "expansion query",
            left: query.dim(),
            right: index.dim,
        });
    }
    let mut acc = query.values.clone();
    for entry in initial.iter().take(n_qe) {
        let d = index.get(entry.id).ok_or(Error::UnknownImage(entry.id))?;
        // Similarities can be negative after whitening; the clamp keeps the
        // α power from flipping a neighbor's sign.
        let weight = match alpha {
            None => 1.0,
            Some(a) => dot(&query.values, &d.values).max(0.0).powf(a),
        };
        for (slot, v) in acc.iter_mut().zip(&d.values) {
            *slot += weight * v;
        }
    }
    search(index, &l2_normalize(&DescriptorVector::raw(acc)))
}

/// Precision-at-relevant-rank average precision:
/// AP = (1/|relevant|)·Σ over relevant ranks r of (relevant in top r)/r.
pub fn average_precision(ranked: &RankedList, relevant: &BTreeSet<u64>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::EmptyRelevantSet);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (at, entry) in ranked.iter().enumerate() {
        if relevant.contains(&entry.id) {
            hits += 1;
            sum += hits as f64 / (at + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// Everything `evaluate` measures: mAP, per-query APs, and the ranked lists
/// they were scored on (query's own id already removed).
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub map: f64,
    pub per_query: Vec<(u64, f64)>,
    pub ranked: Vec<(u64, RankedList)>,
}

/// Runs every query against the index, optionally expands it, and averages
/// the per-query precision. A query's own id never appears in its ranked
/// list or relevant set, so self-retrieval cannot inflate the score; the
/// expansion therefore pools genuine neighbors only.
pub fn evaluate(
    index: &DescriptorIndex,
    queries: &[(u64, DescriptorVector)],
    gt: &GroundTruth,
    qe: Option<&QEConfig>,
) -> Result<EvalReport> {
    let mut per_query = Vec::with_capacity(queries.len());
    let mut ranked_lists = Vec::with_capacity(queries.len());
    let mut total = 0.0;
    for (qid, qd) in queries {
        let declared = gt.get(qid).ok_or(Error::MissingGroundTruth(*qid))?;
        let mut list = search(index, qd)?;
        list.retain(|e| e.id != *qid);
        if let Some(cfg) = qe {
            list = alpha_qe(index, qd, &list, cfg)?;
            list.retain(|e| e.id != *qid);
        }
        let relevant: BTreeSet<u64> = declared.iter().copied().filter(|id| id != qid).collect();
        let ap = average_precision(&list, &relevant)?;
        total += ap;
        per_query.push((*qid, ap));
        ranked_lists.push((*qid, list));
    }
    let map = if queries.is_empty() { 0.0 } else { total / queries.len() as f64 };
    Ok(EvalReport { map, per_query, ranked: ranked_lists })
}

/// Mean of the per-query average precisions; see `evaluate` for the protocol.
pub fn mean_average_precision(
    index: &DescriptorIndex,
    queries: &[(u64, DescriptorVector)],
    gt: &GroundTruth,
    qe: Option<&QEConfig>,
) -> Result<f64> {
    Ok(evaluate(index, queries, gt, qe)?.map)
}

const INDEX_MAGIC: [u8; 4] = *b"GEMI";

/// Writes the magic, little-endian u32 dim and entry count, then per entry a
/// little-endian u64 id followed by the values as little-endian f32.
pub fn save_index(index: &DescriptorIndex, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(12 + index.entries.len() * (8 + index.dim * 4));
    out.extend_from_slice(&INDEX_MAGIC);
    out.extend_from_slice(&(index.dim as u32).to_le_bytes());
    out.extend_from_slice(&(index.entries.len() as u32).to_le_bytes());
    for (id, d) in &index.entries {
        out.extend_from_slice(&id.to_le_bytes());
        for &v in &d.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a "GEMI" index, rejecting bad magic, truncation, payload size
/// mismatches, and duplicate ids.
pub fn load_index(path: &Path) -> Result<DescriptorIndex> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < 12 {
        return Err(Error::Truncated { path: path.to_path_buf() });
    }
    if data[..4] != INDEX_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: INDEX_MAGIC,
        });
    }
    let dim = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let stride = 8 + dim * 4;
    let payload = &data[12..];
    if payload.len() != count * stride {
        return Err(Error::PayloadSizeMismatch {
            path: path.to_path_buf(),
            header: count * stride,
            payload: payload.len(),
        });
    }
    let mut index = DescriptorIndex::new(dim);
    for record in payload.chunks_exact(stride) {
        let id = u64::from_le_bytes(record[..8].try_into().unwrap());
        let values: Vec<f64> = record[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        // Entries were unit (or zero) before the f32 round trip; re-scaling
        // them here would break byte-identical re-saves.
        let descriptor = DescriptorVector { values, normalized: true };
        index.push(id, descriptor)?;
    }
    Ok(index)
}

/// Renders ranked lists as "query_id image_id rank score" lines, rank
/// starting at 1 and scores with six decimals.
pub fn format_ranked_lists(lists: &[(u64, RankedList)]) -> String {
    let mut out = String::new();
    for (qid, list) in lists {
        for (at, entry) in list.iter().enumerate() {
            writeln!(out, "{} {} {} {:.6}", qid, entry.id, at + 1, entry.score)
                .expect("string write");
        }
    }
    out
}

pub fn save_ranked_lists(lists: &[(u64, RankedList)], path: &Path) -> Result<()> {
    fs::write(path, format_ranked_lists(lists)).map_err(|e| Error::io(path, e))
}
