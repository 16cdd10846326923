//! Report parsing, labelling, corpus splitting and the `CMXE` embedding format.
//!
//! `CMXE` layout (little-endian):
//!
//! ```text
//! "CMXE" | version u16 = 1 | reserved u16 = 0 | dim u32 | count u64
//! per record: id_len u16 | id (UTF-8) | label u8 (0, 1, 255 = unlabeled)
//!             | image f32 × dim | text f32 × dim
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_string, read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numerics::Matrix;

const EMBEDDING_MAGIC: &[u8; 4] = b"CMXE";
const EMBEDDING_VERSION: u16 = 1;
pub(crate) const UNLABELED_CODE: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal = 0,
    Abnormal = 1,
}

impl Label {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Normal),
            1 => Some(Label::Abnormal),
            _ => None,
        }
    }

    pub fn name(label: Option<Label>) -> &'static str {
        match label {
            Some(Label::Normal) => "normal",
            Some(Label::Abnormal) => "abnormal",
            None => "unlabeled",
        }
    }
}

pub(crate) fn label_code(label: Option<Label>) -> u8 {
    label.map_or(UNLABELED_CODE, Label::code)
}

pub(crate) fn decode_label(code: u8, what: &str) -> Result<Option<Label>> {
    match code {
        UNLABELED_CODE => Ok(None),
        c => Label::from_code(c)
            .map(Some)
            .ok_or_else(|| Error::Format(format!("{what}: invalid label byte {c}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub findings: String,
    pub impression: String,
    pub caption: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub study_id: String,
    pub label: Option<Label>,
    pub image: Vec<f32>,
    pub text: Vec<f32>,
}

/// Paired image/text vectors with ids and labels. Values are stored at the
/// interchange precision (f32) and widened for computation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("embedding dimension must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.image.len() != dim || r.text.len() != dim {
                return Err(Error::Shape(format!(
                    "record {}: vectors of length {}/{} in a dimension-{dim} set",
                    r.study_id,
                    r.image.len(),
                    r.text.len()
                )));
            }
            if r.image.iter().chain(&r.text).any(|v| !v.is_finite()) {
                return Err(Error::Parameter(format!("record {}: non-finite value", r.study_id)));
            }
            if !seen.insert(r.study_id.as_str()) {
                return Err(Error::Parameter(format!("duplicate study id {}", r.study_id)));
            }
        }
        Ok(EmbeddingSet { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, study_id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.study_id == study_id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.study_id.as_str()).collect()
    }

    pub fn image_matrix(&self) -> Matrix {
        self.matrix(|r| &r.image)
    }

    pub fn text_matrix(&self) -> Matrix {
        self.matrix(|r| &r.text)
    }

    fn matrix(&self, pick: impl Fn(&EmbeddingRecord) -> &Vec<f32>) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * self.dim);
        for r in &self.records {
            data.extend(pick(r).iter().map(|&v| f64::from(v)));
        }
        Matrix::from_vec(self.len(), self.dim, data).expect("validated on construction")
    }

    /// Label codes for every record; errors if any record is unlabeled.
    pub fn label_codes(&self) -> Result<Vec<u8>> {
        self.records
            .iter()
            .map(|r| {
                r.label
                    .map(Label::code)
                    .ok_or_else(|| Error::Parameter(format!("record {} is unlabeled", r.study_id)))
            })
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            dim: self.dim,
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    write_file(path, &encode_embeddings(set)?)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    decode_embeddings(&read_file(path)?)
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let dim = u32::try_from(set.dim).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
    let mut out = Vec::with_capacity(20 + set.len() * (19 + 8 * set.dim));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for r in &set.records {
        put_string(&mut out, &r.study_id)?;
        out.push(label_code(r.label));
        put_f32s(&mut out, &r.image);
        put_f32s(&mut out, &r.text);
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = ByteReader::new(bytes, "CMXE");
    r.magic(EMBEDDING_MAGIC)?;
    r.version(EMBEDDING_VERSION)?;
    let reserved = r.u16()?;
    if reserved != 0 {
        return Err(Error::Format(format!("CMXE: reserved field is {reserved}, expected 0")));
    }
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    if dim == 0 {
        return Err(Error::Format("CMXE: dimension 0".into()));
    }
    // Each record needs at least 3 + 8·dim bytes; reject impossible counts up front.
    let min_record = 3 + 8 * dim as u64;
    if count.saturating_mul(min_record) > r.remaining() as u64 {
        return Err(Error::Format(format!(
            "CMXE: declared {count} records of dimension {dim} but only {} payload bytes",
            r.remaining()
        )));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let study_id = r.string()?;
        let label = decode_label(r.u8()?, "CMXE")?;
        let image = r.f32s(dim)?;
        let text = r.f32s(dim)?;
        records.push(EmbeddingRecord {
            study_id,
            label,
            image,
            text,
        });
    }
    r.finish()?;
    EmbeddingSet::new(dim, records).map_err(|e| Error::Format(format!("CMXE: {e}")))
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text.as_bytes()[..offset];
    let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
    let line_start = before.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let column = String::from_utf8_lossy(&before[line_start..]).chars().count() + 1;
    (line, column)
}

fn parse_error(xml: &str, offset: u64, message: impl Into<String>) -> Error {
    let (line, column) = line_column(xml, offset as usize);
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, PartialEq)]
enum Capture {
    Findings,
    Impression,
    MajorTerm,
}

fn attr(e: &BytesStart<'_>, name: &[u8]) -> Option<String> {
    e.attributes()
        .flatten()
        .find(|a| a.key.as_ref() == name)
        .and_then(|a| a.unescape_value().ok().map(|v| v.into_owned()))
}

/// Parse one OpenI-style report.
///
/// Findings and impression come from `AbstractText` elements labelled
/// `FINDINGS` / `IMPRESSION` (case-insensitive). The study is normal iff one
/// of its major MeSH terms is exactly "normal". `study_id` is taken from the
/// first `uId` element's `id` attribute and is empty when absent.
pub fn parse_report(xml: &str) -> Result<StudyRecord> {
    let mut reader = Reader::from_str(xml);
    let mut stack: Vec<Vec<u8>> = Vec::new();
    let mut capture: Option<(Capture, usize)> = None;
    let mut buf = String::new();
    let mut findings = Vec::new();
    let mut impression = Vec::new();
    let mut major_terms = Vec::new();
    let mut study_id = String::new();
    let mut saw_root = false;

    loop {
        let event = reader
            .read_event()
            .map_err(|e| parse_error(xml, reader.error_position(), e.to_string()))?;
        match event {
            Event::Start(e) => {
                saw_root = true;
                let name = e.name().as_ref().to_vec();
                if capture.is_none() {
                    capture = match name.as_slice() {
                        b"AbstractText" => match attr(&e, b"Label").map(|l| l.to_ascii_uppercase()) {
                            Some(l) if l == "FINDINGS" => Some((Capture::Findings, stack.len())),
                            Some(l) if l == "IMPRESSION" => Some((Capture::Impression, stack.len())),
                            _ => None,
                        },
                        b"major" if stack.last().is_some_and(|p| p == b"MeSH") => {
                            Some((Capture::MajorTerm, stack.len()))
                        }
                        _ => None,
                    };
                    buf.clear();
                }
                if name == b"uId" && study_id.is_empty() {
                    study_id = attr(&e, b"id").unwrap_or_default();
                }
                stack.push(name);
            }
            Event::Empty(e) => {
                saw_root = true;
                if e.name().as_ref() == b"uId" && study_id.is_empty() {
                    study_id = attr(&e, b"id").unwrap_or_default();
                }
            }
            Event::End(_) => {
                stack.pop();
                if let Some((kind, depth)) = capture {
                    if depth == stack.len() {
                        let text = normalize_whitespace(&buf);
                        match kind {
                            Capture::Findings => findings.push(text),
                            Capture::Impression => impression.push(text),
                            Capture::MajorTerm => major_terms.push(text),
                        }
                        capture = None;
                    }
                }
            }
            Event::Text(t) if capture.is_some() => {
                let s = t
                    .decode()
                    .map_err(|e| parse_error(xml, reader.buffer_position(), e.to_string()))?;
                buf.push_str(&s);
            }
            Event::CData(t) if capture.is_some() => {
                let s = t
                    .decode()
                    .map_err(|e| parse_error(xml, reader.buffer_position(), e.to_string()))?;
                buf.push_str(&s);
            }
            Event::GeneralRef(r) if capture.is_some() => {
                let pos = reader.buffer_position();
                if let Some(c) = r.resolve_char_ref().map_err(|e| parse_error(xml, pos, e.to_string()))? {
                    buf.push(c);
                } else {
                    let name = r.decode().map_err(|e| parse_error(xml, pos, e.to_string()))?;
                    let resolved = quick_xml::escape::resolve_predefined_entity(&name)
                        .ok_or_else(|| parse_error(xml, pos, format!("unknown entity &{name};")))?;
                    buf.push_str(resolved);
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if let Some(open) = stack.last() {
        return Err(parse_error(
            xml,
            xml.len() as u64,
            format!("unexpected end of document inside <{}>", String::from_utf8_lossy(open)),
        ));
    }
    if !saw_root {
        return Err(parse_error(xml, xml.len() as u64, "document has no root element"));
    }

    let join = |parts: Vec<String>| {
        parts
            .into_iter()
            .filter(|p| !p.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let findings = join(findings);
    let impression = join(impression);
    if findings.is_empty() && impression.is_empty() {
        return Err(Error::EmptyReport);
    }
    let mut caption = Vec::new();
    if !findings.is_empty() {
        caption.push(format!("FINDINGS: {findings}"));
    }
    if !impression.is_empty() {
        caption.push(format!("IMPRESSION: {impression}"));
    }
    let label = if major_terms.iter().any(|t| t.eq_ignore_ascii_case("normal")) {
        Label::Normal
    } else {
        Label::Abnormal
    };
    Ok(StudyRecord {
        study_id,
        findings,
        impression,
        caption: caption.join(" "),
        label,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub study_id: String,
    pub image_path: PathBuf,
    pub report_path: PathBuf,
}

/// Parse every report listed in a manifest. Relative report paths resolve
/// against the manifest's directory. Results keep manifest order; the study
/// id always comes from the manifest.
pub fn ingest_manifest(manifest: &Path, exec: Execution) -> Result<Vec<(String, Result<StudyRecord>)>> {
    let entries: Vec<ManifestEntry> = crate::jsonl::read_jsonl(manifest)?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(exec.map_slice(&entries, |entry| {
        let path = if entry.report_path.is_absolute() {
            entry.report_path.clone()
        } else {
            base.join(&entry.report_path)
        };
        let parsed = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(&path, e))
            .and_then(|xml| parse_report(&xml))
            .map(|mut rec| {
                rec.study_id = entry.study_id.clone();
                rec
            });
        (entry.study_id.clone(), parsed)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_per_class: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_per_class: 200,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: EmbeddingSet,
    pub val: EmbeddingSet,
    pub test: EmbeddingSet,
}

/// Hold out `test_per_class` records of each label, then split the rest into
/// validation and training. Each partition keeps the input record order.
/// Unlabeled records are never placed in the test partition.
pub fn split_corpus(set: &EmbeddingSet, spec: &SplitSpec) -> Result<Split> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::Split(format!(
            "validation fraction must be in (0, 1), got {}",
            spec.val_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut in_test = vec![false; set.len()];
    for label in [Label::Normal, Label::Abnormal] {
        let mut members: Vec<usize> = (0..set.len())
            .filter(|&i| set.records[i].label == Some(label))
            .collect();
        if members.len() < spec.test_per_class {
            return Err(Error::Split(format!(
                "class {} has {} records, {} needed for the test partition",
                Label::name(Some(label)),
                members.len(),
                spec.test_per_class
            )));
        }
        members.shuffle(&mut rng);
        for &i in &members[..spec.test_per_class] {
            in_test[i] = true;
        }
    }
    let mut rest: Vec<usize> = (0..set.len()).filter(|&i| !in_test[i]).collect();
    let n_val = (spec.val_fraction * rest.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    rest.shuffle(&mut rng);
    let mut in_val = vec![false; set.len()];
    for &i in &rest[..n_val] {
        in_val[i] = true;
    }
    let pick = |f: &dyn Fn(usize) -> bool| -> Vec<usize> { (0..set.len()).filter(|&i| f(i)).collect() };
    Ok(Split {
        test: set.subset(&pick(&|i| in_test[i])),
        val: set.subset(&pick(&|i| in_val[i])),
        train: set.subset(&pick(&|i| !in_test[i] && !in_val[i])),
    })
}
