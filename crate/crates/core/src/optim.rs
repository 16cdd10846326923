//! AdamW with decoupled weight decay over two parameter groups (adapters and
//! head) plus the linear-warmup / cosine-annealing schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGrads, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Learning rate of the adapter group.
    pub lr_backbone: f64,
    /// Learning rate of the classification head.
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_backbone: 1e-5,
            lr_head: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_backbone > 0.0 && self.lr_head > 0.0) {
            return Err(Error::Parameter(format!(
                "learning rates must be positive, got {} / {}",
                self.lr_backbone, self.lr_head
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Parameter(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter(format!(
                "epsilon must be positive and weight decay nonnegative, got {} / {}",
                self.epsilon, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub warmup_fraction: f64,
}

impl ScheduleConfig {
    pub fn new(total_steps: u64, warmup_fraction: f64) -> Result<Self> {
        let s = ScheduleConfig {
            total_steps,
            warmup_fraction,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Parameter(format!(
                "warmup fraction must be in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.warmup_steps() >= self.total_steps {
            return Err(Error::Parameter(format!(
                "{} warmup steps leave no annealing steps out of {}",
                self.warmup_steps(),
                self.total_steps
            )));
        }
        Ok(())
    }
}

/// Multiplier on the base learning rates after `step` completed steps.
pub fn lr_scale_at(step: u64, s: &ScheduleConfig) -> f64 {
    let warmup = s.warmup_steps();
    let step = step.min(s.total_steps);
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    let span = (s.total_steps - warmup) as f64;
    let progress = (step - warmup) as f64 / span;
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let n = params.flatten().len();
        OptimState {
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

/// One AdamW update of a flat tensor; `step` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    first_moment: &mut [f64],
    second_moment: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &OptimConfig,
) {
    let bias1 = 1.0 - cfg.beta1.powi(step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(first_moment.iter_mut())
        .zip(second_moment.iter_mut())
    {
        *p -= lr * cfg.weight_decay * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Update every model tensor; adapters use `lr_backbone`, the head `lr_head`,
/// both multiplied by `lr_scale`.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut OptimState,
    cfg: &OptimConfig,
    lr_scale: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&lr_scale) {
        return Err(Error::Parameter(format!("lr scale must be in [0, 1], got {lr_scale}")));
    }
    if params.dim() != grads.dim() || state.first_moment.len() != params.flatten().len() {
        return Err(Error::Shape("optimizer state does not match the parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Gradient("model gradients".into()));
    }
    state.step += 1;
    let step = state.step;
    let mut offset = 0;
    let lr = cfg.lr_backbone * lr_scale;
    for (p, g) in params.adapter_tensors_mut().into_iter().zip(grads.adapter_tensors()) {
        let end = offset + p.len();
        adamw_update(
            p,
            g,
            &mut state.first_moment[offset..end],
            &mut state.second_moment[offset..end],
            step,
            lr,
            cfg,
        );
        offset = end;
    }
    let lr = cfg.lr_head * lr_scale;
    for (p, g) in params.head_tensors_mut().into_iter().zip(grads.head_tensors()) {
        let end = offset + p.len();
        adamw_update(
            p,
            g,
            &mut state.first_moment[offset..end],
            &mut state.second_moment[offset..end],
            step,
            lr,
            cfg,
        );
        offset = end;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use proptest::prelude::*;

    fn cfg(lr: f64, wd: f64) -> OptimConfig {
        OptimConfig {
            lr_backbone: lr,
            lr_head: lr,
            weight_decay: wd,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn update_examples() {
        let mut p = [0.7];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, &cfg(0.1, 0.0));
        assert_eq!(p, [0.7]);

        let mut p = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, &cfg(0.1, 0.01));
        assert!((p[0] - 0.999).abs() < 1e-15);

        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps).
        let mut p = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 1e-3, &cfg(1e-3, 0.0));
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
        assert!((p[0] + 9.99999995e-4).abs() < 1e-11);
    }

    #[test]
    fn schedule_anchors() {
        let s = ScheduleConfig::new(100, 0.1).unwrap();
        assert_eq!(s.warmup_steps(), 10);
        assert_eq!(lr_scale_at(0, &s), 0.0);
        assert!((lr_scale_at(5, &s) - 0.5).abs() < 1e-12);
        assert!((lr_scale_at(10, &s) - 1.0).abs() < 1e-12);
        assert!((lr_scale_at(55, &s) - 0.5).abs() < 1e-12);
        assert!(lr_scale_at(100, &s).abs() < 1e-12);
        assert!(ScheduleConfig::new(0, 0.1).is_err());
        assert!(ScheduleConfig::new(1, 0.9).is_err());
        assert!(ScheduleConfig::new(10, 1.0).is_err());
        let no_warmup = ScheduleConfig::new(4, 0.0).unwrap();
        assert_eq!(lr_scale_at(0, &no_warmup), 1.0);
    }

    #[test]
    fn groups_use_their_own_rates() {
        let mut p = init_params(3, 1).unwrap();
        let before = p.clone();
        let mut g = ModelParams::zeros(3);
        for t in g.adapter_tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.5);
        }
        for t in g.head_tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.5);
        }
        let c = OptimConfig {
            lr_backbone: 1e-3,
            lr_head: 1e-2,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut st = OptimState::new(&p);
        adamw_step(&mut p, &g, &mut st, &c, 1.0).unwrap();
        let adapter_move = (p.image_adapter.bias[0] - before.image_adapter.bias[0]).abs();
        let head_move = (p.head_bias - before.head_bias).abs();
        assert!((head_move / adapter_move - 10.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_input() {
        let mut p = init_params(2, 1).unwrap();
        let mut g = ModelParams::zeros(2);
        g.head_bias = f64::NAN;
        let mut st = OptimState::new(&p);
        let c = OptimConfig::default();
        assert!(matches!(
            adamw_step(&mut p, &g, &mut st, &c, 1.0),
            Err(Error::Gradient(_))
        ));
        assert_eq!(st.step, 0);
        g.head_bias = 0.0;
        assert!(adamw_step(&mut p, &g, &mut st, &c, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_unimodal(total in 2u64..400, frac in 0.0f64..0.9) {
            let s = ScheduleConfig { total_steps: total, warmup_fraction: frac };
            prop_assume!(s.validate().is_ok());
            let w = s.warmup_steps();
            for t in 0..total {
                let (a, b) = (lr_scale_at(t, &s), lr_scale_at(t + 1, &s));
                prop_assert!((0.0..=1.0).contains(&a));
                if t < w { prop_assert!(b >= a); } else { prop_assert!(b <= a + 1e-15); }
            }
            prop_assert!(lr_scale_at(total, &s).abs() < 1e-12);
        }
    }
}
