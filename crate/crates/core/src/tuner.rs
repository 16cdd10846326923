//! Search over the composite-loss weights.
//!
//! Two strategies share one trial loop: a seeded, randomly shifted Halton
//! sequence over the box, and a Gaussian-process surrogate with expected
//! improvement over a fixed seeded candidate set. Coordinates are handled in
//! the unit cube and mapped onto the bounds only when a trial runs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ingest::EmbeddingSet;
use crate::losses::LossWeights;
use crate::trainer::{train, EpochLog, TrainConfig};

const HALTON_BASES: [u32; 3] = [2, 3, 5];
/// Kernel length scale as a fraction of the (unit-cube) box diagonal.
const BANDWIDTH_FRACTION: f64 = 0.25;
const OBSERVATION_NOISE: f64 = 1e-6;
const DUPLICATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lambda1: (f64, f64),
    pub lambda2: (f64, f64),
    pub lambda3: (f64, f64),
    pub trials: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lambda1: (0.1, 1.0),
            lambda2: (0.2, 2.0),
            lambda3: (0.2, 2.0),
            trials: 20,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in self
            .bounds()
            .iter()
            .zip(["lambda1", "lambda2", "lambda3"])
            .map(|(b, n)| (n, *b))
        {
            if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
                return Err(Error::Parameter(format!("{name} bounds [{lo}, {hi}] are invalid")));
            }
        }
        if self.trials == 0 {
            return Err(Error::Parameter("at least one trial is required".into()));
        }
        Ok(())
    }

    fn bounds(&self) -> [(f64, f64); 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }

    /// Map a unit-cube point onto the box.
    pub fn to_box(&self, u: [f64; 3]) -> [f64; 3] {
        let b = self.bounds();
        std::array::from_fn(|d| (b[d].0 + u[d] * (b[d].1 - b[d].0)).clamp(b[d].0, b[d].1))
    }

    pub fn contains(&self, w: &LossWeights) -> bool {
        let b = self.bounds();
        [w.lambda1, w.lambda2, w.lambda3]
            .iter()
            .zip(b)
            .all(|(v, (lo, hi))| *v >= lo && *v <= hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Quasirandom,
    Surrogate,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quasirandom" => Ok(Strategy::Quasirandom),
            "surrogate" => Ok(Strategy::Surrogate),
            other => Err(Error::Parameter(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub weights: LossWeights,
    /// `None` when the trial failed.
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub logs: Vec<EpochLog>,
}

/// Something to maximize over loss weights.
pub trait Objective: Sync {
    fn evaluate(&self, weights: &LossWeights) -> Result<(f64, Vec<EpochLog>)>;
}

impl<F> Objective for F
where
    F: Fn(&LossWeights) -> Result<f64> + Sync,
{
    fn evaluate(&self, weights: &LossWeights) -> Result<(f64, Vec<EpochLog>)> {
        Ok((self(weights)?, Vec::new()))
    }
}

/// Short training run scored by mean bidirectional validation top-1 accuracy
/// after the last epoch.
pub struct TrainingObjective<'a> {
    pub data: &'a EmbeddingSet,
    pub val: &'a EmbeddingSet,
    pub base: TrainConfig,
    pub epochs_per_trial: usize,
}

impl Objective for TrainingObjective<'_> {
    fn evaluate(&self, weights: &LossWeights) -> Result<(f64, Vec<EpochLog>)> {
        let cfg = TrainConfig {
            epochs: self.epochs_per_trial,
            weights: LossWeights {
                tau: self.base.weights.tau,
                ..*weights
            },
            log_path: None,
            ..self.base.clone()
        };
        let out = train(self.data, self.val, &cfg)?;
        let last = out
            .logs
            .last()
            .ok_or_else(|| Error::Parameter("trial ran zero epochs".into()))?;
        Ok(((last.val.top1_i2t + last.val.top1_t2i) / 2.0, out.logs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub strategy: Strategy,
    pub seed: u64,
    /// Quasirandom points evaluated before the surrogate takes over.
    pub initial_points: usize,
    pub candidates: usize,
    /// Temperature carried into every proposed weight triple.
    pub tau: f64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            strategy: Strategy::Surrogate,
            seed: 0,
            initial_points: 5,
            candidates: 1024,
            tau: LossWeights::default().tau,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub best: TrialResult,
    pub trials: Vec<TrialResult>,
}

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = f64::from(base);
    let mut inv = 1.0 / b;
    let mut out = 0.0;
    while i > 0 {
        out += (i % u64::from(base)) as f64 * inv;
        i /= u64::from(base);
        inv /= b;
    }
    out
}

/// Halton points `1..=n` with a seeded Cranley-Patterson shift.
pub fn halton_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: [f64; 3] = std::array::from_fn(|_| rng.gen::<f64>());
    (1..=n as u64)
        .map(|i| std::array::from_fn(|d| (radical_inverse(i, HALTON_BASES[d]) + shift[d]).fract()))
        .collect()
}

fn same_point(a: &[f64; 3], b: &[f64; 3]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= DUPLICATE_TOLERANCE)
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Gaussian-process regressor with an isotropic squared-exponential kernel on
/// standardized targets.
struct Surrogate {
    xs: Vec<[f64; 3]>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    y_mean: f64,
    y_scale: f64,
    length: f64,
}

impl Surrogate {
    fn fit(xs: &[[f64; 3]], ys: &[f64]) -> Option<Self> {
        let n = xs.len();
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let length = BANDWIDTH_FRACTION * 3f64.sqrt();
        let k = DMatrix::from_fn(n, n, |i, j| {
            kernel(&xs[i], &xs[j], length) + if i == j { OBSERVATION_NOISE } else { 0.0 }
        });
        let chol = k.cholesky()?;
        let y = DVector::from_iterator(n, ys.iter().map(|y| (y - y_mean) / y_scale));
        let alpha = chol.solve(&y);
        Some(Surrogate {
            xs: xs.to_vec(),
            chol,
            alpha,
            y_mean,
            y_scale,
            length,
        })
    }

    /// Posterior mean and standard deviation in objective units.
    fn predict(&self, x: &[f64; 3]) -> (f64, f64) {
        let kx = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| kernel(xi, x, self.length)));
        let mean = kx.dot(&self.alpha);
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&kx)
            .unwrap_or_else(|| DVector::zeros(kx.len()));
        let var = (1.0 - v.dot(&v)).max(0.0);
        (self.y_mean + self.y_scale * mean, self.y_scale * var.sqrt())
    }

    fn expected_improvement(&self, x: &[f64; 3], best: f64) -> f64 {
        let (mean, sd) = self.predict(x);
        let gain = mean - best;
        if sd <= 0.0 {
            return gain.max(0.0);
        }
        let z = gain / sd;
        gain * std_normal_cdf(z) + sd * std_normal_pdf(z)
    }
}

fn kernel(a: &[f64; 3], b: &[f64; 3], length: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / (2.0 * length * length)).exp()
}

fn run_trial(objective: &dyn Objective, space: &SearchSpace, trial: usize, u: [f64; 3], tau: f64) -> TrialResult {
    let [l1, l2, l3] = space.to_box(u);
    let weights = LossWeights {
        lambda1: l1,
        lambda2: l2,
        lambda3: l3,
        tau,
    };
    match objective.evaluate(&weights) {
        Ok((value, logs)) if value.is_finite() => TrialResult {
            trial,
            weights,
            objective: Some(value),
            error: None,
            logs,
        },
        Ok((value, logs)) => TrialResult {
            trial,
            weights,
            objective: None,
            error: Some(format!("non-finite objective {value}")),
            logs,
        },
        Err(e) => {
            log::warn!("trial {trial} failed: {e}");
            TrialResult {
                trial,
                weights,
                objective: None,
                error: Some(e.to_string()),
                logs: Vec::new(),
            }
        }
    }
}

fn select_best(trials: &[TrialResult]) -> Option<TrialResult> {
    let mut best: Option<&TrialResult> = None;
    for t in trials {
        let Some(v) = t.objective else { continue };
        if best.is_none_or(|b| v > b.objective.unwrap()) {
            best = Some(t);
        }
    }
    best.cloned()
}

/// Run `space.trials` evaluations and return the best (highest objective,
/// earliest trial on ties) together with every trial in index order.
pub fn tune(
    objective: &dyn Objective,
    space: &SearchSpace,
    opts: &TuneOptions,
    exec: Execution,
) -> Result<TuneOutcome> {
    space.validate()?;
    let n = space.trials;
    let design = halton_points(n, opts.seed);

    let initial = match opts.strategy {
        Strategy::Quasirandom => n,
        Strategy::Surrogate => opts.initial_points.clamp(1, n),
    };
    let mut points: Vec<[f64; 3]> = design[..initial].to_vec();
    let mut trials: Vec<TrialResult> = exec.map_range(initial, |i| run_trial(objective, space, i, points[i], opts.tau));

    if initial < n {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(1);
        let candidates: Vec<[f64; 3]> = (0..opts.candidates)
            .map(|_| std::array::from_fn(|_| rng.gen::<f64>()))
            .collect();
        let mut fallback = design[initial..].iter().copied();
        for trial in initial..n {
            let observed: Vec<([f64; 3], f64)> = points
                .iter()
                .zip(&trials)
                .filter_map(|(p, t)| t.objective.map(|v| (*p, v)))
                .collect();
            let fresh = |c: &[f64; 3]| !points.iter().any(|p| same_point(p, c));
            let proposal = if observed.is_empty() {
                None
            } else {
                let (xs, ys): (Vec<[f64; 3]>, Vec<f64>) = observed.into_iter().unzip();
                let best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Surrogate::fit(&xs, &ys).and_then(|gp| {
                    let mut choice: Option<(usize, f64)> = None;
                    for (ci, c) in candidates.iter().enumerate() {
                        if !fresh(c) {
                            continue;
                        }
                        let ei = gp.expected_improvement(c, best);
                        if choice.is_none_or(|(_, b)| ei > b) {
                            choice = Some((ci, ei));
                        }
                    }
                    choice.map(|(ci, _)| candidates[ci])
                })
            };
            let next = proposal
                .or_else(|| fallback.by_ref().find(|p| fresh(p)))
                .ok_or_else(|| Error::Parameter("search space exhausted".into()))?;
            points.push(next);
            trials.push(run_trial(objective, space, trial, next, opts.tau));
        }
    }

    let best = select_best(&trials).ok_or_else(|| Error::Parameter("every tuning trial failed".into()))?;
    Ok(TuneOutcome { best, trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub(w: &LossWeights) -> Result<f64> {
        Ok(-(w.lambda1 - 0.5).powi(2))
    }

    #[test]
    fn halton_prefix() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert!((radical_inverse(2, 3) - 2.0 / 3.0).abs() < 1e-15);
        let pts = halton_points(50, 7);
        assert!(pts.iter().all(|p| p.iter().all(|v| (0.0..1.0).contains(v))));
        assert_eq!(pts, halton_points(50, 7));
    }

    #[test]
    fn single_trial() {
        let space = SearchSpace {
            trials: 1,
            ..SearchSpace::default()
        };
        for strategy in [Strategy::Quasirandom, Strategy::Surrogate] {
            let opts = TuneOptions {
                strategy,
                ..TuneOptions::default()
            };
            let out = tune(&stub, &space, &opts, Execution::Sequential).unwrap();
            assert_eq!(out.trials.len(), 1);
            assert_eq!(out.best, out.trials[0]);
        }
    }

    #[test]
    fn surrogate_finds_stub_optimum() {
        let space = SearchSpace::default();
        let out = tune(
            &stub,
            &space,
            &TuneOptions {
                seed: 3,
                ..TuneOptions::default()
            },
            Execution::Sequential,
        )
        .unwrap();
        assert!((out.best.weights.lambda1 - 0.5).abs() < 0.1, "{:?}", out.best.weights);
        for t in &out.trials {
            assert!(space.contains(&t.weights));
        }
    }

    #[test]
    fn failures_are_excluded() {
        let flaky = |w: &LossWeights| -> Result<f64> {
            if w.lambda2 > 1.0 {
                Err(Error::Parameter("boom".into()))
            } else {
                Ok(w.lambda3)
            }
        };
        let space = SearchSpace {
            trials: 8,
            ..SearchSpace::default()
        };
        let opts = TuneOptions {
            strategy: Strategy::Quasirandom,
            ..TuneOptions::default()
        };
        let out = tune(&flaky, &space, &opts, Execution::Parallel).unwrap();
        assert!(out.trials.iter().any(|t| t.objective.is_none()));
        assert!(out.best.weights.lambda2 <= 1.0);
        let all_fail = |_: &LossWeights| -> Result<f64> { Err(Error::Parameter("no".into())) };
        assert!(tune(&all_fail, &space, &opts, Execution::Sequential).is_err());
    }

    #[test]
    fn ties_prefer_earlier_trial() {
        let flat = |_: &LossWeights| -> Result<f64> { Ok(1.0) };
        let space = SearchSpace {
            trials: 6,
            ..SearchSpace::default()
        };
        let out = tune(&flat, &space, &TuneOptions::default(), Execution::Sequential).unwrap();
        assert_eq!(out.best.trial, 0);
    }

    #[test]
    fn gp_interpolates_observations() {
        let xs = [[0.1, 0.2, 0.3], [0.8, 0.1, 0.5], [0.4, 0.9, 0.2]];
        let ys = [1.0, -2.0, 0.5];
        let gp = Surrogate::fit(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(ys) {
            let (m, sd) = gp.predict(x);
            assert!((m - y).abs() < 1e-3, "{m} vs {y}");
            assert!(sd < 1e-2);
        }
    }
}
