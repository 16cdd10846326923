//! Seeded synthetic corpora for tests and demos.
//!
//! Each study draws a latent vector from one of two Gaussian classes whose
//! means sit at `±margin · σ` along a random unit direction (plus a shared
//! offset). Image and text embeddings are the latent plus independent
//! modality noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{EmbeddingRecord, EmbeddingSet, Label};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    /// Distance of each class mean from the decision boundary, in units of σ.
    pub margin: f64,
    /// Within-class standard deviation σ of the latent.
    pub sigma: f64,
    /// Standard deviation of the per-modality noise.
    pub modality_noise: f64,
    pub normal_fraction: f64,
    /// Use the same vector for both modalities.
    pub identical: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 200,
            dim: 16,
            seed: 0,
            margin: 3.0,
            sigma: 1.0,
            modality_noise: 0.3,
            normal_fraction: 0.4,
            identical: false,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<EmbeddingSet> {
    if cfg.dim == 0 || !(0.0..=1.0).contains(&cfg.normal_fraction) || !(cfg.sigma >= 0.0) {
        return Err(Error::Parameter(format!("invalid synthetic corpus settings: {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let direction = {
        let g = gaussian(&mut rng, cfg.dim);
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        g.into_iter().map(|v| v / n).collect::<Vec<_>>()
    };
    let offset: Vec<f64> = gaussian(&mut rng, cfg.dim).into_iter().map(|v| v * cfg.sigma).collect();
    let n_normal = (cfg.normal_fraction * cfg.n as f64).round() as usize;
    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let label = if rng.gen::<f64>() < n_normal as f64 / cfg.n.max(1) as f64 {
            Label::Normal
        } else {
            Label::Abnormal
        };
        let sign = if label == Label::Normal { -1.0 } else { 1.0 };
        let latent: Vec<f64> = gaussian(&mut rng, cfg.dim)
            .into_iter()
            .zip(&direction)
            .zip(&offset)
            .map(|((z, d), o)| o + sign * cfg.margin * cfg.sigma * d + cfg.sigma * z)
            .collect();
        let noisy = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            latent
                .iter()
                .zip(gaussian(rng, cfg.dim))
                .map(|(l, e)| (l + cfg.modality_noise * e) as f32)
                .collect()
        };
        let image = noisy(&mut rng);
        let text = if cfg.identical { image.clone() } else { noisy(&mut rng) };
        records.push(EmbeddingRecord {
            study_id: format!("synth-{i:05}"),
            label: Some(label),
            image,
            text,
        });
    }
    EmbeddingSet::new(cfg.dim, records)
}
