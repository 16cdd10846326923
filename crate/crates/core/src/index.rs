//! Exact cosine-similarity index over fused image-text embeddings.
//!
//! Entries are stored at f32 precision (as in the `CMXI` file) and widened and
//! re-normalized in f64 for scoring, so a built index and its reloaded copy
//! search identically.
//!
//! `CMXI` layout (little-endian):
//!
//! ```text
//! "CMXI" | version u16 = 1 | dim u32 | count u64
//! per entry: id_len u16 | id (UTF-8) | label u8 | fused f32 × dim
//! ```

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_string, read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ingest::{decode_label, label_code, EmbeddingSet, Label};
use crate::model::ModelParams;
use crate::numerics::{dot, l2_normalize, Matrix};

const INDEX_MAGIC: &[u8; 4] = b"CMXI";
const INDEX_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(Error::Parameter(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub study_id: String,
    pub label: Option<Label>,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub study_id: String,
    pub label: Option<Label>,
    pub score: f64,
}

/// Hits ranked by nonincreasing score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<SearchHit>,
}

impl SearchResult {
    pub fn rank_of(&self, study_id: &str) -> Option<usize> {
        self.hits.iter().position(|h| h.study_id == study_id).map(|p| p + 1)
    }
}

#[derive(Debug, Clone)]
pub struct FusedIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    /// f64 unit rows derived from `entries`.
    unit: Matrix,
}

impl PartialEq for FusedIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.entries == other.entries
    }
}

/// `normalize((normalize(a) + normalize(b)) / 2)`.
pub fn fuse(image: &[f64], text: &[f64]) -> Result<Vec<f64>> {
    let a = l2_normalize(image)?;
    let b = l2_normalize(text)?;
    let avg: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
    l2_normalize(&avg)
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

impl FusedIndex {
    pub fn from_entries(dim: usize, entries: Vec<IndexEntry>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("index dimension must be positive".into()));
        }
        let mut data = Vec::with_capacity(entries.len() * dim);
        for e in &entries {
            if e.vector.len() != dim {
                return Err(Error::Shape(format!(
                    "entry {} has dimension {}, index has {dim}",
                    e.study_id,
                    e.vector.len()
                )));
            }
            let unit = l2_normalize(&widen(&e.vector)).map_err(|err| err.with_context(&e.study_id))?;
            data.extend(unit);
        }
        let unit = Matrix::from_vec(entries.len(), dim, data)?;
        Ok(FusedIndex { dim, entries, unit })
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

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// The f64 unit vector scored for entry `i`.
    pub fn unit_vector(&self, i: usize) -> &[f64] {
        self.unit.row(i)
    }

    pub fn search(&self, query: &[f64], k: usize) -> Result<SearchResult> {
        self.search_excluding(query, k, None)
    }

    /// Top-`k` by cosine similarity, ties broken by insertion order. When
    /// `exclude` is set, entries with that study id are skipped.
    pub fn search_excluding(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Result<SearchResult> {
        if k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!(
                "query has dimension {}, index expects {}",
                query.len(),
                self.dim
            )));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("query contains non-finite values".into()));
        }
        let q = l2_normalize(query)?;
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&i| exclude != Some(self.entries[i].study_id.as_str()))
            .map(|i| (i, dot(&q, self.unit.row(i))))
            .collect();
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| -> Ordering { b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)) };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_rank);
        Ok(SearchResult {
            hits: scored
                .into_iter()
                .map(|(i, score)| SearchHit {
                    study_id: self.entries[i].study_id.clone(),
                    label: self.entries[i].label,
                    score,
                })
                .collect(),
        })
    }

    /// Search every row of `queries`; `exclude[i]` optionally removes an id
    /// from query `i`'s candidates.
    pub fn search_batch(
        &self,
        queries: &Matrix,
        k: usize,
        exclude: Option<&[&str]>,
        exec: Execution,
    ) -> Result<Vec<SearchResult>> {
        if let Some(ex) = exclude {
            if ex.len() != queries.rows() {
                return Err(Error::Shape(format!(
                    "{} exclusions for {} queries",
                    ex.len(),
                    queries.rows()
                )));
            }
        }
        exec.map_range(queries.rows(), |i| {
            self.search_excluding(queries.row(i), k, exclude.map(|ex| ex[i]))
        })
        .into_iter()
        .collect()
    }
}

/// Fused index over `set` using the model's adapters in evaluation mode.
pub fn build_index(params: &ModelParams, set: &EmbeddingSet) -> Result<FusedIndex> {
    build_index_with(Some(params), set, Execution::default())
}

/// With `params = None` the raw (backbone) embeddings are fused directly.
pub fn build_index_with(params: Option<&ModelParams>, set: &EmbeddingSet, exec: Execution) -> Result<FusedIndex> {
    if set.is_empty() {
        return Err(Error::InsufficientData(
            "cannot build an index from an empty set".into(),
        ));
    }
    if let Some(p) = params {
        if p.dim() != set.dim() {
            return Err(Error::Shape(format!(
                "model dimension {} vs embedding dimension {}",
                p.dim(),
                set.dim()
            )));
        }
    }
    let entries: Result<Vec<IndexEntry>> = exec
        .map_slice(set.records(), |r| {
            let (img, txt) = (widen(&r.image), widen(&r.text));
            let fused = match params {
                Some(p) => fuse(&p.image_adapter.apply_row(&img), &p.text_adapter.apply_row(&txt)),
                None => fuse(&img, &txt),
            }
            .map_err(|e| e.with_context(&r.study_id))?;
            Ok(IndexEntry {
                study_id: r.study_id.clone(),
                label: r.label,
                vector: fused.iter().map(|&v| v as f32).collect(),
            })
        })
        .into_iter()
        .collect();
    FusedIndex::from_entries(set.dim(), entries?)
}

/// Single-modality query vectors, one row per record. Rows pass through the
/// model's adapter when `params` is given and are L2-normalized.
pub fn query_vectors(params: Option<&ModelParams>, set: &EmbeddingSet, modality: Modality) -> Result<Matrix> {
    let mut out = Matrix::zeros(set.len(), set.dim());
    for (i, r) in set.records().iter().enumerate() {
        out.row_mut(i).copy_from_slice(&single_query(params, r, modality)?);
    }
    Ok(out)
}

fn pick(r: &crate::ingest::EmbeddingRecord, modality: Modality) -> &[f32] {
    match modality {
        Modality::Image => &r.image,
        Modality::Text => &r.text,
    }
}

pub fn query_by_id(
    index: &FusedIndex,
    set: &EmbeddingSet,
    params: Option<&ModelParams>,
    study_id: &str,
    modality: Modality,
    k: usize,
    exclude_self: bool,
) -> Result<SearchResult> {
    let record = set
        .get(study_id)
        .ok_or_else(|| Error::NotFound(format!("study id {study_id}")))?;
    let q = single_query(params, record, modality)?;
    index.search_excluding(&q, k, exclude_self.then_some(study_id))
}

pub(crate) fn single_query(
    params: Option<&ModelParams>,
    record: &crate::ingest::EmbeddingRecord,
    modality: Modality,
) -> Result<Vec<f64>> {
    let x = widen(pick(record, modality));
    let adapted = match (params, modality) {
        (Some(p), Modality::Image) => p.image_adapter.apply_row(&x),
        (Some(p), Modality::Text) => p.text_adapter.apply_row(&x),
        (None, _) => x,
    };
    l2_normalize(&adapted).map_err(|e| e.with_context(&record.study_id))
}

pub fn save_index(index: &FusedIndex, path: &Path) -> Result<()> {
    write_file(path, &encode_index(index)?)
}

pub fn load_index(path: &Path) -> Result<FusedIndex> {
    decode_index(&read_file(path)?)
}

pub fn encode_index(index: &FusedIndex) -> Result<Vec<u8>> {
    let dim = u32::try_from(index.dim).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
    let mut out = Vec::with_capacity(18 + index.len() * (3 + 4 * index.dim));
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    for e in &index.entries {
        put_string(&mut out, &e.study_id)?;
        out.push(label_code(e.label));
        put_f32s(&mut out, &e.vector);
    }
    Ok(out)
}

pub fn decode_index(bytes: &[u8]) -> Result<FusedIndex> {
    let mut r = ByteReader::new(bytes, "CMXI");
    r.magic(INDEX_MAGIC)?;
    r.version(INDEX_VERSION)?;
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    if dim == 0 {
        return Err(Error::Format("CMXI: dimension 0".into()));
    }
    if count.saturating_mul(3 + 4 * dim as u64) > r.remaining() as u64 {
        return Err(Error::Format(format!(
            "CMXI: declared {count} entries of dimension {dim} but only {} payload bytes",
            r.remaining()
        )));
    }
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let study_id = r.string()?;
        let label = decode_label(r.u8()?, "CMXI")?;
        let vector = r.f32s(dim)?;
        entries.push(IndexEntry {
            study_id,
            label,
            vector,
        });
    }
    r.finish()?;
    FusedIndex::from_entries(dim, entries).map_err(|e| Error::Format(format!("CMXI: {e}")))
}
