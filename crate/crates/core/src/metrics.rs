//! Retrieval evaluation: accuracy@k, mean similarity@k, label precision@k,
//! F1, ROC AUC and mAP, in either query direction against a fused index.
//!
//! How F1, AUC and mAP are derived from ranked retrieval output:
//!
//! - F1: the top-1 neighbour's label is the prediction, abnormal is positive.
//! - ROC AUC: each query gets an abnormality score, the similarity-weighted
//!   share of abnormal labels among its top-`k_max` hits (weights
//!   `(score + 1) / 2`), scored against the query's own label.
//! - mAP: average precision of label-match relevance within the top-`k_max`.
//!
//! Label metrics consider labeled queries only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::index::{query_vectors, FusedIndex, Modality, SearchResult};
use crate::ingest::{EmbeddingSet, Label};
use crate::model::ModelParams;

pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Image queries.
    I2t,
    /// Text queries.
    T2i,
}

impl Direction {
    pub fn query_modality(self) -> Modality {
        match self {
            Direction::I2t => Modality::Image,
            Direction::T2i => Modality::Text,
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Direction::I2t => "image-to-text",
            Direction::T2i => "text-to-image",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i2t" => Ok(Direction::I2t),
            "t2i" => Ok(Direction::T2i),
            other => Err(Error::Parameter(format!(
                "unknown direction {other:?}, expected i2t or t2i"
            ))),
        }
    }
}

fn top_k(r: &SearchResult, k: usize) -> &[crate::index::SearchHit] {
    &r.hits[..k.min(r.hits.len())]
}

/// Fraction of queries whose own id appears among their top-`k` hits.
pub fn retrieval_accuracy(results: &[SearchResult], truth: &[&str], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .zip(truth)
        .filter(|(r, id)| top_k(r, k).iter().any(|h| h.study_id == **id))
        .count();
    hits as f64 / results.len() as f64
}

/// Mean over every score in every query's top-`k`.
pub fn mean_similarity_at_k(results: &[SearchResult], k: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in results {
        for h in top_k(r, k) {
            sum += h.score;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean over labeled queries of the share of top-`k` hits with the query's label.
pub fn label_precision_at_k(results: &[SearchResult], query_labels: &[Option<Label>], k: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, label) in results.iter().zip(query_labels) {
        let Some(label) = label else { continue };
        let hits = top_k(r, k);
        n += 1;
        if hits.is_empty() {
            continue;
        }
        let matching = hits.iter().filter(|h| h.label == Some(*label)).count();
        total += matching as f64 / hits.len() as f64;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// F1 with abnormal as the positive class; zero denominators give 0.
pub fn binary_f1(predicted: &[Option<Label>], truth: &[Option<Label>]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        let Some(t) = t else { continue };
        let p_pos = *p == Some(Label::Abnormal);
        let t_pos = *t == Label::Abnormal;
        match (p_pos, t_pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Mann-Whitney estimate of P(score_pos > score_neg), ties counted ½.
/// Returns 0.5 when either class is absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return 0.5;
    }
    (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Similarity-weighted share of abnormal labels among the top-`k` hits.
pub fn abnormality_score(result: &SearchResult, k: usize) -> f64 {
    let mut weighted = 0.0;
    let mut total = 0.0;
    for h in top_k(result, k) {
        let w = (h.score + 1.0) / 2.0;
        total += w;
        if h.label == Some(Label::Abnormal) {
            weighted += w;
        }
    }
    if total > 0.0 {
        weighted / total
    } else {
        0.5
    }
}

/// Mean of precision@i over the relevant positions; 0 with no relevant items.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        sum / found as f64
    }
}

pub fn mean_average_precision(results: &[SearchResult], query_labels: &[Option<Label>], k: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, label) in results.iter().zip(query_labels) {
        let Some(label) = label else { continue };
        let rel: Vec<bool> = top_k(r, k).iter().map(|h| h.label == Some(*label)).collect();
        total += average_precision(&rel);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub accuracy: f64,
    pub mean_similarity: f64,
    pub label_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction: Direction,
    pub exclude_self: bool,
    pub queries: usize,
    pub index_size: usize,
    pub k_max: usize,
    pub at_k: Vec<AtK>,
    pub f1: f64,
    pub roc_auc: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub ks: Vec<usize>,
    pub exclude_self: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            ks: DEFAULT_KS.to_vec(),
            exclude_self: false,
        }
    }
}

/// Evaluate one direction: the query modality of every record in `queries`
/// (adapted by `params` when given) is searched against `index`.
pub fn full_report(
    index: &FusedIndex,
    queries: &EmbeddingSet,
    params: Option<&ModelParams>,
    direction: Direction,
    opts: &ReportOptions,
    exec: Execution,
) -> Result<MetricsReport> {
    let mut ks = opts.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let k_max = *ks
        .last()
        .filter(|_| ks[0] >= 1)
        .ok_or_else(|| Error::Parameter("report needs at least one k ≥ 1".into()))?;
    let q = query_vectors(params, queries, direction.query_modality())?;
    let ids = queries.ids();
    let exclude = opts.exclude_self.then_some(ids.as_slice());
    let results = index.search_batch(&q, k_max, exclude, exec)?;
    Ok(report_from_results(
        &results,
        queries,
        direction,
        &ks,
        opts.exclude_self,
        index.len(),
    ))
}

pub(crate) fn report_from_results(
    results: &[SearchResult],
    queries: &EmbeddingSet,
    direction: Direction,
    ks: &[usize],
    exclude_self: bool,
    index_size: usize,
) -> MetricsReport {
    let ids = queries.ids();
    let labels: Vec<Option<Label>> = queries.records().iter().map(|r| r.label).collect();
    let k_max = ks.iter().copied().max().unwrap_or(1);
    let at_k = ks
        .iter()
        .map(|&k| AtK {
            k,
            accuracy: retrieval_accuracy(results, &ids, k),
            mean_similarity: mean_similarity_at_k(results, k),
            label_precision: label_precision_at_k(results, &labels, k),
        })
        .collect();
    let top1: Vec<Option<Label>> = results.iter().map(|r| r.hits.first().and_then(|h| h.label)).collect();
    let (scores, positive): (Vec<f64>, Vec<bool>) = results
        .iter()
        .zip(&labels)
        .filter_map(|(r, l)| l.map(|l| (abnormality_score(r, k_max), l == Label::Abnormal)))
        .unzip();
    MetricsReport {
        direction,
        exclude_self,
        queries: results.len(),
        index_size,
        k_max,
        at_k,
        f1: binary_f1(&top1, &labels),
        roc_auc: roc_auc(&scores, &positive),
        map: mean_average_precision(results, &labels, k_max),
    }
}

/// Plain-text tables (accuracy and label precision) for reports that share a
/// direction and k set, one column per named report.
pub fn render_table(columns: &[(&str, &MetricsReport)]) -> String {
    let Some((_, first)) = columns.first() else {
        return String::new();
    };
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    let sim_name = |k: usize| {
        if k == 1 {
            "Similarity score@1".to_string()
        } else {
            format!("Mean similarity score@{k}")
        }
    };
    let value = |f: &dyn Fn(&MetricsReport) -> f64| columns.iter().map(|(_, r)| f(r)).collect::<Vec<_>>();
    for (i, a) in first.at_k.iter().enumerate() {
        rows.push((format!("Accuracy@{}", a.k), value(&|r| r.at_k[i].accuracy)));
        rows.push((sim_name(a.k), value(&|r| r.at_k[i].mean_similarity)));
    }
    let mut precision_rows: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, a) in first.at_k.iter().enumerate() {
        precision_rows.push((format!("Precision@{}", a.k), value(&|r| r.at_k[i].label_precision)));
        precision_rows.push((sim_name(a.k), value(&|r| r.at_k[i].mean_similarity)));
        if i == 0 {
            precision_rows.push(("F1 score".into(), value(&|r| r.f1)));
            precision_rows.push(("ROC AUC".into(), value(&|r| r.roc_auc)));
            precision_rows.push(("mAP".into(), value(&|r| r.map)));
        }
    }

    let name_width = rows
        .iter()
        .chain(&precision_rows)
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(0)
        .max("Metrics".len());
    let col_width = columns.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    let header = |out: &mut String, title: String| {
        out.push_str(&title);
        out.push('\n');
        out.push_str(&format!("{:<name_width$}", "Metrics"));
        for (n, _) in columns {
            out.push_str(&format!("  {n:>col_width$}"));
        }
        out.push('\n');
    };
    let body = |out: &mut String, rows: &[(String, Vec<f64>)]| {
        for (name, vals) in rows {
            out.push_str(&format!("{name:<name_width$}"));
            for v in vals {
                out.push_str(&format!("  {v:>col_width$.3}"));
            }
            out.push('\n');
        }
    };
    let dir = first.direction.title();
    header(&mut out, format!("{dir} retrieval accuracy"));
    body(&mut out, &rows);
    out.push('\n');
    header(&mut out, format!("{dir} retrieval precision by binary labels"));
    body(&mut out, &precision_rows);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::SearchHit;

    fn result(ids: &[&str], labels: &[u8], scores: &[f64]) -> SearchResult {
        SearchResult {
            hits: ids
                .iter()
                .zip(labels)
                .zip(scores)
                .map(|((id, l), s)| SearchHit {
                    study_id: id.to_string(),
                    label: Label::from_code(*l),
                    score: *s,
                })
                .collect(),
        }
    }

    #[test]
    fn accuracy_example() {
        let rs = vec![
            result(&["a", "x", "y", "z"], &[0; 4], &[0.9, 0.8, 0.7, 0.6]),
            result(&["x", "y", "z", "b"], &[0; 4], &[0.9, 0.8, 0.7, 0.6]),
            result(&["x", "c", "y", "z"], &[0; 4], &[0.9, 0.8, 0.7, 0.6]),
        ];
        let truth = ["a", "b", "c"];
        assert!((retrieval_accuracy(&rs, &truth, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((retrieval_accuracy(&rs, &truth, 3) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(retrieval_accuracy(&rs, &truth, 4), 1.0);
    }

    #[test]
    fn similarity_and_precision_examples() {
        let r = result(&["a", "b"], &[1, 0], &[1.0, 0.5]);
        assert_eq!(mean_similarity_at_k(std::slice::from_ref(&r), 2), 0.75);
        let q = result(&["a", "b", "c"], &[1, 0, 1], &[0.3, 0.3, 0.3]);
        assert!(
            (label_precision_at_k(std::slice::from_ref(&q), &[Some(Label::Abnormal)], 3) - 2.0 / 3.0).abs() < 1e-15
        );
        assert_eq!(mean_similarity_at_k(std::slice::from_ref(&q), 3), 0.3);
        assert_eq!(label_precision_at_k(&[q], &[None], 3), 0.0);
    }

    #[test]
    fn precision_over_mixed_queries() {
        let rs = vec![
            result(&["a", "b"], &[1, 1], &[0.9, 0.1]),
            result(&["a", "b"], &[0, 1], &[0.9, 0.1]),
            result(&["a", "b"], &[0, 0], &[0.9, 0.1]),
            result(&["a", "b"], &[1, 0], &[0.9, 0.1]),
        ];
        let labels = [
            Some(Label::Abnormal),
            Some(Label::Normal),
            Some(Label::Abnormal),
            Some(Label::Normal),
        ];
        // per query: 2/2, 1/2, 0/2, 1/2
        assert!((label_precision_at_k(&rs, &labels, 2) - 0.5).abs() < 1e-15);
        // top-1 only: 1, 1, 0, 0
        assert!((label_precision_at_k(&rs, &labels, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn f1_examples() {
        let a = Some(Label::Abnormal);
        let n = Some(Label::Normal);
        assert_eq!(binary_f1(&[a, n, a], &[a, n, a]), 1.0);
        assert!((binary_f1(&[a, n, a, n], &[a, a, n, n]) - 0.5).abs() < 1e-15);
        assert_eq!(binary_f1(&[n, n], &[n, n]), 0.0);
    }

    #[test]
    fn auc_examples() {
        assert!((roc_auc(&[0.9, 0.8, 0.4], &[true, false, true]) - 0.5).abs() < 1e-15);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]), 1.0);
        assert_eq!(roc_auc(&[0.3; 5], &[true, false, true, false, false]), 0.5);
        assert_eq!(roc_auc(&[0.3, 0.2], &[true, true]), 0.5);
    }

    #[test]
    fn ap_examples() {
        assert!((average_precision(&[true, false, true]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true; 4]), 1.0);
        assert_eq!(average_precision(&[false; 3]), 0.0);
    }

    #[test]
    fn abnormality_vote() {
        let r = result(&["a", "b"], &[1, 0], &[1.0, -1.0]);
        assert_eq!(abnormality_score(&r, 2), 1.0);
        let r = result(&["a", "b"], &[1, 0], &[0.0, 0.0]);
        assert_eq!(abnormality_score(&r, 2), 0.5);
        assert_eq!(abnormality_score(&SearchResult::default(), 3), 0.5);
    }
}
