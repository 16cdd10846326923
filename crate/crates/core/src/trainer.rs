//! The multi-task training loop: shuffled mini-batches, forward, composite
//! loss, backward, AdamW step on the warmup/cosine schedule, and per-epoch
//! validation.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::index::{build_index_with, query_vectors, Modality};
use crate::ingest::EmbeddingSet;
use crate::jsonl::append_jsonl;
use crate::losses::{bce_with_logits, clip_loss, composite_loss, supcon_loss, LossBreakdown, LossWeights};
use crate::metrics::retrieval_accuracy;
use crate::model::{backward, forward, init_params, LossGrads, Mode, ModelGrads, ModelParams, DEFAULT_DROPOUT};
use crate::numerics::Matrix;
use crate::optim::{adamw_step, lr_scale_at, OptimConfig, OptimState, ScheduleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub dropout_p: f64,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Share of all optimizer steps spent in linear warmup.
    pub warmup_fraction: f64,
    /// Epoch logs are written here as JSON lines when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            weights: LossWeights::default(),
            dropout_p: DEFAULT_DROPOUT,
            seed: 0,
            optim: OptimConfig::default(),
            warmup_fraction: 0.1,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Parameter(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Parameter(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        self.weights.validate()?;
        self.optim.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    /// `None` when the split has fewer than two records.
    pub loss: Option<LossBreakdown>,
    pub accuracy: f64,
    pub top1_i2t: f64,
    pub top1_t2i: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub steps: u64,
    pub train: LossBreakdown,
    pub val: Validation,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub logs: Vec<EpochLog>,
}

/// Composite loss of one batch and its gradient with respect to every parameter.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    params: &ModelParams,
    image: &Matrix,
    text: &Matrix,
    labels: &[u8],
    weights: &LossWeights,
    dropout_p: f64,
    mode: Mode,
    seed: u64,
) -> Result<(LossBreakdown, ModelGrads)> {
    let acts = forward(params, image, text, dropout_p, mode, seed)?;
    let (binary, d_logits) = bce_with_logits(&acts.logits, labels)?;
    let clip = clip_loss(&acts.image, &acts.text, weights.tau)?;
    let sup = supcon_loss(&acts.fused_unit, labels, weights.tau)?;
    let breakdown = composite_loss((binary, sup.loss, clip.loss), weights);

    let scaled = |m: &Matrix, s: f64| {
        let mut out = m.clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        out
    };
    let upstream = LossGrads {
        logits: d_logits.iter().map(|g| g * weights.lambda1).collect(),
        image: scaled(&clip.grad_image, weights.lambda3),
        text: scaled(&clip.grad_text, weights.lambda3),
        fused: scaled(&sup.grad, weights.lambda2),
    };
    Ok((breakdown, backward(params, &acts, &upstream)?))
}

/// Loss components only, evaluation mode.
pub fn batch_loss(
    params: &ModelParams,
    image: &Matrix,
    text: &Matrix,
    labels: &[u8],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let acts = forward(params, image, text, 0.0, Mode::Eval, 0)?;
    let (binary, _) = bce_with_logits(&acts.logits, labels)?;
    let clip = clip_loss(&acts.image, &acts.text, weights.tau)?;
    let sup = supcon_loss(&acts.fused_unit, labels, weights.tau)?;
    Ok(composite_loss((binary, sup.loss, clip.loss), weights))
}

/// Consecutive chunks of `order`; a trailing chunk shorter than 2 is dropped.
fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size).filter(|b| b.len() >= 2)
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n / batch_size + usize::from(n % batch_size >= 2)
}

/// Evaluation-mode summary of `params` on a split.
///
/// Classification predicts abnormal iff the logit is strictly positive.
/// Top-1 retrieval searches each record's image (text) against a fused index
/// built over the same split.
pub fn evaluate_split(
    params: &ModelParams,
    data: &EmbeddingSet,
    weights: &LossWeights,
    batch_size: usize,
) -> Result<Validation> {
    if data.is_empty() {
        return Err(Error::InsufficientData("cannot evaluate an empty split".into()));
    }
    let labels = data.label_codes()?;
    let image = data.image_matrix();
    let text = data.text_matrix();

    let order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    for b in batches(&order, batch_size.max(2)) {
        let lb: Vec<u8> = b.iter().map(|&i| labels[i]).collect();
        losses.push(batch_loss(
            params,
            &image.select_rows(b),
            &text.select_rows(b),
            &lb,
            weights,
        )?);
    }
    let loss = (!losses.is_empty()).then(|| LossBreakdown::mean(&losses, weights));

    let acts = forward(params, &image, &text, 0.0, Mode::Eval, 0)?;
    let correct = acts
        .logits
        .iter()
        .zip(&labels)
        .filter(|(z, y)| u8::from(**z > 0.0) == **y)
        .count();

    let exec = Execution::Sequential;
    let index = build_index_with(Some(params), data, exec)?;
    let ids = data.ids();
    let mut top1 = [0.0; 2];
    for (slot, modality) in [Modality::Image, Modality::Text].into_iter().enumerate() {
        let q = query_vectors(Some(params), data, modality)?;
        let results = index.search_batch(&q, 1, None, exec)?;
        top1[slot] = retrieval_accuracy(&results, &ids, 1);
    }
    Ok(Validation {
        loss,
        accuracy: correct as f64 / data.len() as f64,
        top1_i2t: top1[0],
        top1_t2i: top1[1],
    })
}

pub fn train(data: &EmbeddingSet, val: &EmbeddingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    if data.dim() != val.dim() {
        return Err(Error::Shape(format!(
            "training dimension {} vs validation dimension {}",
            data.dim(),
            val.dim()
        )));
    }
    let labels = data.label_codes()?;
    if labels.iter().all(|&y| y == labels[0]) {
        log::warn!(
            "every training record has label {}; supervised contrastive term has no negatives",
            labels[0]
        );
    }
    let mut params = init_params(data.dim(), cfg.seed)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            logs: Vec::new(),
        });
    }
    if val.is_empty() {
        return Err(Error::InsufficientData("validation set is empty".into()));
    }
    let per_epoch = batches_per_epoch(data.len(), cfg.batch_size);
    if per_epoch == 0 {
        return Err(Error::InsufficientData(format!(
            "{} training records do not fill a batch of at least 2",
            data.len()
        )));
    }
    let schedule = ScheduleConfig::new((cfg.epochs * per_epoch) as u64, cfg.warmup_fraction)?;
    if let Some(path) = &cfg.log_path {
        std::fs::write(path, b"").map_err(|e| Error::io(path, e))?;
    }

    let image = data.image_matrix();
    let text = data.text_matrix();
    let mut state = OptimState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(3);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_losses = Vec::with_capacity(per_epoch);
        for b in batches(&order, cfg.batch_size) {
            let lb: Vec<u8> = b.iter().map(|&i| labels[i]).collect();
            let (breakdown, grads) = batch_objective(
                &params,
                &image.select_rows(b),
                &text.select_rows(b),
                &lb,
                &cfg.weights,
                cfg.dropout_p,
                Mode::Train,
                dropout_rng.next_u64(),
            )?;
            let scale = lr_scale_at(state.step, &schedule);
            adamw_step(&mut params, &grads, &mut state, &cfg.optim, scale)?;
            epoch_losses.push(breakdown);
        }
        let log = EpochLog {
            epoch,
            steps: state.step,
            train: LossBreakdown::mean(&epoch_losses, &cfg.weights),
            val: evaluate_split(&params, val, &cfg.weights, cfg.batch_size)?,
        };
        log::info!(
            "epoch {epoch}: train total {:.5}, val acc {:.3}, top1 i2t {:.3} t2i {:.3}",
            log.train.total,
            log.val.accuracy,
            log.val.top1_i2t,
            log.val.top1_t2i
        );
        if let Some(path) = &cfg.log_path {
            append_jsonl(path, &log)?;
        }
        logs.push(log);
    }
    Ok(TrainOutcome { params, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{EmbeddingRecord, Label};
    use crate::synth::{generate, SynthConfig};

    fn tiny() -> EmbeddingSet {
        generate(&SynthConfig {
            n: 20,
            dim: 4,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn batch_counting() {
        assert_eq!(batches_per_epoch(200, 128), 2);
        assert_eq!(batches_per_epoch(129, 128), 1);
        assert_eq!(batches_per_epoch(130, 128), 2);
        let order: Vec<usize> = (0..7).collect();
        let sizes: Vec<usize> = batches(&order, 3).map(<[usize]>::len).collect();
        assert_eq!(sizes, vec![3, 3]);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let d = tiny();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 4,
            ..TrainConfig::default()
        };
        let out = train(&d, &d, &cfg).unwrap();
        assert!(out.logs.is_empty());
        assert_eq!(out.params, init_params(4, 4).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = tiny();
        let other = generate(&SynthConfig {
            n: 5,
            dim: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(matches!(
            train(&d, &other, &TrainConfig::default()),
            Err(Error::Shape(_))
        ));
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(train(&d, &d, &cfg).is_err());
        let empty = EmbeddingSet::new(4, vec![]).unwrap();
        assert!(train(&empty, &d, &TrainConfig::default()).is_err());
    }

    #[test]
    fn logged_totals_decompose() {
        let d = tiny();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train(&d, &d, &cfg).unwrap();
        assert_eq!(out.logs.len(), 3);
        let w = cfg.weights;
        for log in &out.logs {
            for b in [log.train, log.val.loss.unwrap()] {
                let expect = w.lambda1 * b.binary + w.lambda2 * b.supcon + w.lambda3 * b.clip;
                assert!((b.total - expect).abs() < 1e-12);
            }
        }
        assert_eq!(out.logs[2].steps, 9);
    }

    #[test]
    fn evaluate_split_conventions() {
        let one = EmbeddingSet::new(
            2,
            vec![EmbeddingRecord {
                study_id: "only".into(),
                label: Some(Label::Abnormal),
                image: vec![1.0, 0.5],
                text: vec![0.2, 1.0],
            }],
        )
        .unwrap();
        let mut p = init_params(2, 0).unwrap();
        p.head_weight = vec![0.0, 0.0];
        let v = evaluate_split(&p, &one, &LossWeights::default(), 128).unwrap();
        assert_eq!(v.top1_i2t, 1.0);
        assert_eq!(v.top1_t2i, 1.0);
        assert!(v.loss.is_none());
        // logit exactly 0 predicts normal
        assert_eq!(v.accuracy, 0.0);

        let same = generate(&SynthConfig {
            n: 30,
            dim: 6,
            identical: true,
            ..SynthConfig::default()
        })
        .unwrap();
        let v = evaluate_split(&init_params(6, 1).unwrap(), &same, &LossWeights::default(), 8).unwrap();
        assert_eq!(v.top1_i2t, 1.0);
        assert_eq!(v.top1_t2i, 1.0);
    }
}
