use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<F> {
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
    pub step: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new() -> Self {
        Self { m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }
}

/// Bias corrections `(1 − β₁ᵗ, 1 − β₂ᵗ)` at step `t ≥ 1`.
pub fn bias_corrections(step: u64, cfg: &AdamWConfig) -> (f64, f64) {
    (1.0 - cfg.beta1.powi(step as i32), 1.0 - cfg.beta2.powi(step as i32))
}

/// Bias-corrected Adam displacement for one entry: `lr · m̂ / (√v̂ + eps)`.
#[inline]
pub fn adam_delta(m: f64, v: f64, corrections: (f64, f64), lr: f64, eps: f64) -> f64 {
    let m_hat = m / corrections.0;
    let v_hat = v / corrections.1;
    lr * m_hat / (v_hat.sqrt() + eps)
}

/// One AdamW step with decoupled weight decay. `grads` must name exactly
/// the trainable parameters; frozen parameters are never touched.
pub fn adamw_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut OptimizerState<F>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::InvalidArgument(format!("negative learning rate {lr}")));
    }
    let trainable = params.trainable_names();
    for name in grads.keys() {
        if !params.is_trainable(name) {
            return Err(Error::InvalidArgument(format!("gradient for non-trainable parameter `{name}`")));
        }
    }
    for name in &trainable {
        let g = grads.get(name).ok_or_else(|| Error::InvalidArgument(format!("missing gradient for `{name}`")))?;
        let p = params.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient {:?} vs parameter {:?} for `{name}`", g.shape(), p.shape())));
        }
    }
    apply_adamw(params, grads, trainable, state, lr, cfg)
}

/// AdamW over the parameters that received a gradient this step. Trainable
/// parameters absent from `grads` (unused by the step's graph) keep their
/// values and moments, like optimizers that skip missing gradients.
pub fn adamw_step_present<F: Real>(
    params: &mut ParamStore<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut OptimizerState<F>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::InvalidArgument(format!("negative learning rate {lr}")));
    }
    for (name, g) in grads {
        if !params.is_trainable(name) {
            return Err(Error::InvalidArgument(format!("gradient for non-trainable parameter `{name}`")));
        }
        let p = params.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient {:?} vs parameter {:?} for `{name}`", g.shape(), p.shape())));
        }
    }
    let names = grads.keys().cloned().collect();
    apply_adamw(params, grads, names, state, lr, cfg)
}

fn apply_adamw<F: Real>(
    params: &mut ParamStore<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    names: Vec<String>,
    state: &mut OptimizerState<F>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    let corrections = bias_corrections(state.step, cfg);
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let decay = F::of(1.0 - lr * cfg.weight_decay);
    for name in names {
        let g = &grads[&name];
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let theta = params.tensor_mut(&name)?;
        let (md, vd, td, gd) = (m.data_mut(), v.data_mut(), theta.data_mut(), g.data());
        for i in 0..gd.len() {
            md[i] = b1 * md[i] + (F::ONE - b1) * gd[i];
            vd[i] = b2 * vd[i] + (F::ONE - b2) * gd[i] * gd[i];
            if cfg.weight_decay != 0.0 {
                td[i] *= decay;
            }
            td[i] -= F::of(adam_delta(md[i].as_f64(), vd[i].as_f64(), corrections, lr, cfg.eps));
        }
    }
    Ok(())
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledLr {
    pub lr: f64,
    /// Set when the requested step lay beyond `total_steps`.
    pub clamped: bool,
}

impl LrSchedule {
    pub fn new(max_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if max_lr <= 0.0 || total_steps <= warmup_steps {
            return Err(Error::InvalidArgument(format!(
                "lr schedule needs max_lr > 0 and total > warmup (got {max_lr}, {warmup_steps}, {total_steps})"
            )));
        }
        Ok(Self { max_lr, warmup_steps, total_steps })
    }

    pub fn lr_at(&self, step: u64) -> ScheduledLr {
        if step > self.total_steps {
            return ScheduledLr { lr: 0.0, clamped: true };
        }
        let lr = if step < self.warmup_steps {
            self.max_lr * step as f64 / self.warmup_steps as f64
        } else {
            let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
            self.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        };
        ScheduledLr { lr: lr.clamp(0.0, self.max_lr), clamped: false }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(theta: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::scalar(theta), true).unwrap();
        p.insert("frozen", Tensor::scalar(5.0), false).unwrap();
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("theta".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn hand_computed_first_step() {
        let mut p = one_param(1.0);
        let mut st = OptimizerState::new();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &grad(1.0), &mut st, 0.1, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 → θ' = 1 − 0.1 · 1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("theta").unwrap().data()[0] - expected).abs() < 1e-12);
        assert_eq!(p.get("frozen").unwrap().data()[0], 5.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn pure_decay_path() {
        let mut p = one_param(1.0);
        let mut st = OptimizerState::new();
        adamw_step(&mut p, &grad(0.0), &mut st, 0.1, &AdamWConfig::default()).unwrap();
        assert!((p.get("theta").unwrap().data()[0] - 0.999).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = one_param(0.7);
        let mut st = OptimizerState::new();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..3 {
            adamw_step(&mut p, &grad(0.0), &mut st, 0.5, &cfg).unwrap();
        }
        assert_eq!(p.get("theta").unwrap().data()[0], 0.7);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = one_param(1.0);
        let mut st = OptimizerState::new();
        let cfg = AdamWConfig::default();
        let bad = BTreeMap::from([("theta".to_string(), Tensor::zeros(&[2]))]);
        assert!(matches!(adamw_step(&mut p, &bad, &mut st, 0.1, &cfg), Err(Error::Shape(_))));
        let frozen =
            BTreeMap::from([("theta".to_string(), Tensor::scalar(0.0)), ("frozen".to_string(), Tensor::scalar(0.0))]);
        assert!(adamw_step(&mut p, &frozen, &mut st, 0.1, &cfg).is_err());
        assert!(adamw_step(&mut p, &BTreeMap::new(), &mut st, 0.1, &cfg).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1e-3, 1000, 10_000).unwrap();
        assert_eq!(s.lr_at(0).lr, 0.0);
        assert_eq!(s.lr_at(1000).lr, 1e-3);
        assert!(s.lr_at(10_000).lr.abs() < 1e-18);
        let past = s.lr_at(10_001);
        assert!(past.clamped && past.lr == 0.0);
        assert!(LrSchedule::new(1e-3, 10, 10).is_err());
    }
}
