//! Brain module: maps a `T × C` fMRI window to `P × D` conditioning tokens.
//!
//! ```text
//! x_τ ─ subject linear ─ timestep linear ─ LN ─ GELU ─ dropout ─┐
//!                                                 temporal aggregation ─ out linear ─ tokens
//! ```
//! With `Aggregation::In` the time axis is merged right after the subject
//! layer and one shared `H × H` matrix follows.
//!
//! Parameters live under `brain/`. Per-subject layers sit below
//! `brain/subject/<id>/`; everything else is a shared trunk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prep::Epoch;
use crate::substrate::{Binder, Graph, ParamStore, Real, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrainModuleConfig {
    pub hidden: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub window_len: usize,
    pub dropout: f64,
    pub timestep_layer_enabled: bool,
    pub aggregation: Aggregation,
}

impl Default for BrainModuleConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            tokens: 8,
            token_dim: 64,
            window_len: 6,
            dropout: 0.5,
            timestep_layer_enabled: true,
            aggregation: Aggregation::Out,
        }
    }
}

impl BrainModuleConfig {
    /// Widths of the full-size model on real fMRI (257 tokens of 768).
    pub fn full_scale() -> Self {
        Self { hidden: 1552, tokens: 257, token_dim: 768, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: format!("brain.{key}"), msg: msg.into() });
        for (k, v) in [
            ("hidden", self.hidden),
            ("tokens", self.tokens),
            ("token_dim", self.token_dim),
            ("window_len", self.window_len),
        ] {
            if v == 0 {
                return bad(k, "must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        Ok(())
    }

    /// True when T distinct matrices are applied (OUT position, layer enabled).
    pub fn per_timestep(&self) -> bool {
        self.timestep_layer_enabled && self.aggregation == Aggregation::Out
    }

    /// Parameters added by one more subject with `c` voxels.
    pub fn subject_param_count(&self, c: usize) -> usize {
        let h = self.hidden;
        let t = if self.per_timestep() { self.window_len } else { 1 };
        c * h + h + t * (h * h + h)
    }

    /// Named variants of the design ablation.
    pub fn variants(&self) -> Vec<(&'static str, BrainModuleConfig)> {
        vec![
            ("out_timestep", Self { aggregation: Aggregation::Out, timestep_layer_enabled: true, ..self.clone() }),
            ("out_shared", Self { aggregation: Aggregation::Out, timestep_layer_enabled: false, ..self.clone() }),
            ("in", Self { aggregation: Aggregation::In, timestep_layer_enabled: false, ..self.clone() }),
        ]
    }
}

pub const PREFIX: &str = "brain/";

pub fn subject_prefix(subject: usize) -> String {
    format!("brain/subject/{subject}/")
}

pub fn is_brain_param(name: &str) -> bool {
    name.starts_with(PREFIX)
}

/// Subject id owning `name`, if it is a per-subject parameter.
pub fn param_subject(name: &str) -> Option<usize> {
    name.strip_prefix("brain/subject/")?.split('/').next()?.parse().ok()
}

fn normal_init<F: Real>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    Tensor::randn(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

/// Adds the subject and timestep layers of one subject with `c` voxels.
pub fn add_subject<F: Real>(
    cfg: &BrainModuleConfig,
    store: &mut ParamStore<F>,
    subject: usize,
    c: usize,
    rng: &Rng,
) -> Result<()> {
    if c == 0 {
        return Err(Error::InvalidArgument(format!("subject {subject} has no voxels")));
    }
    let h = cfg.hidden;
    let p = subject_prefix(subject);
    let mut r = rng.split("brain-subject").split_index(subject as u64);
    store.insert(format!("{p}proj/weight"), normal_init(&mut r, &[h, c], c), true)?;
    store.insert(format!("{p}proj/bias"), Tensor::zeros(&[h]), true)?;
    if cfg.per_timestep() {
        let t = cfg.window_len;
        store.insert(format!("{p}timestep/weight"), normal_init(&mut r, &[t, h, h], h), true)?;
        store.insert(format!("{p}timestep/bias"), Tensor::zeros(&[t, h]), true)?;
    } else {
        store.insert(format!("{p}shared/weight"), normal_init(&mut r, &[h, h], h), true)?;
        store.insert(format!("{p}shared/bias"), Tensor::zeros(&[h]), true)?;
    }
    Ok(())
}

/// Removes every parameter of `subject`.
pub fn remove_subject<F: Real>(store: &mut ParamStore<F>, subject: usize) {
    let p = subject_prefix(subject);
    let names: Vec<String> = store.names().filter(|n| n.starts_with(&p)).cloned().collect();
    for n in names {
        store.remove(&n);
    }
}

/// Initializes the trunk plus one set of layers per `(subject, n_voxels)`.
pub fn init_brain_module<F: Real>(
    cfg: &BrainModuleConfig,
    subjects: &[(usize, usize)],
    rng: &Rng,
) -> Result<ParamStore<F>> {
    cfg.validate()?;
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("brain module needs at least one subject".into()));
    }
    let mut store = ParamStore::new();
    add_trunk(cfg, &mut store, rng)?;
    for &(s, c) in subjects {
        add_subject(cfg, &mut store, s, c, rng)?;
    }
    Ok(store)
}

pub fn add_trunk<F: Real>(cfg: &BrainModuleConfig, store: &mut ParamStore<F>, rng: &Rng) -> Result<()> {
    let (h, t) = (cfg.hidden, cfg.window_len);
    let mut r = rng.split("brain-trunk");
    store.insert("brain/norm/gamma", Tensor::full(&[h], F::ONE), true)?;
    store.insert("brain/norm/beta", Tensor::zeros(&[h]), true)?;
    // both aggregation positions weigh the T time samples
    store.insert("brain/agg/weight", Tensor::full(&[t], F::of(1.0 / t as f64)), true)?;
    store.insert("brain/agg/bias", Tensor::zeros(&[1]), true)?;
    let pd = cfg.tokens * cfg.token_dim;
    store.insert("brain/out/weight", normal_init(&mut r, &[pd, h], h), true)?;
    store.insert("brain/out/bias", Tensor::zeros(&[pd]), true)?;
    Ok(())
}

/// Stacks epochs of one subject into a time-major `[B, T, C]` tensor.
pub fn epochs_to_input<F: Real>(epochs: &[&Epoch]) -> Result<Tensor<F>> {
    let first = epochs.first().ok_or_else(|| Error::InvalidArgument("empty epoch batch".into()))?;
    let (t, c) = (first.n_samples, first.n_voxels);
    let mut data = Vec::with_capacity(epochs.len() * t * c);
    for e in epochs {
        if (e.n_samples, e.n_voxels) != (t, c) {
            return Err(Error::Shape(format!("epoch {}x{} in a batch of {}x{}", e.n_samples, e.n_voxels, t, c)));
        }
        data.extend(e.time_major().into_iter().map(|v| F::of(v as f64)));
    }
    Tensor::new(vec![epochs.len(), t, c], data)
}

/// Forward pass for a batch `x: [B, T, C]` of one subject → `[B, P, D]`.
/// Dropout is drawn from `rng` only when `training`.
pub fn brain_forward<F: Real>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    cfg: &BrainModuleConfig,
    subject: usize,
    x: Var,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 || xs[1] != cfg.window_len {
        return Err(Error::Shape(format!("brain input {xs:?}, expected [B, {}, C]", cfg.window_len)));
    }
    let p = subject_prefix(subject);
    let proj = format!("{p}proj/weight");
    let w =
        b.params().get(&proj).map_err(|_| Error::InvalidArgument(format!("no subject layer for subject {subject}")))?;
    if w.shape()[1] != xs[2] {
        return Err(Error::Shape(format!("subject {subject} expects {} voxels, got {}", w.shape()[1], xs[2])));
    }
    let batch = xs[0];
    let (w, bias) = (b.var(g, &proj), b.var(g, &format!("{p}proj/bias")));
    let z = g.linear(x, w, Some(bias));
    let gamma = b.var(g, "brain/norm/gamma");
    let beta = b.var(g, "brain/norm/beta");
    let (aw, ab) = (b.var(g, "brain/agg/weight"), b.var(g, "brain/agg/bias"));
    let drop = if training { cfg.dropout } else { 0.0 };
    let u = match cfg.aggregation {
        Aggregation::Out => {
            let z = if cfg.per_timestep() {
                let (tw, tb) = (b.var(g, &format!("{p}timestep/weight")), b.var(g, &format!("{p}timestep/bias")));
                g.timestep_linear(z, tw, tb)
            } else {
                let (sw, sb) = (b.var(g, &format!("{p}shared/weight")), b.var(g, &format!("{p}shared/bias")));
                g.linear(z, sw, Some(sb))
            };
            let z = g.layer_norm(z, gamma, beta);
            let z = g.gelu(z);
            let z = g.dropout(z, drop, rng);
            g.temporal_agg(z, aw, ab)
        }
        Aggregation::In => {
            let u = g.temporal_agg(z, aw, ab);
            let (sw, sb) = (b.var(g, &format!("{p}shared/weight")), b.var(g, &format!("{p}shared/bias")));
            let u = g.linear(u, sw, Some(sb));
            let u = g.layer_norm(u, gamma, beta);
            let u = g.gelu(u);
            g.dropout(u, drop, rng)
        }
    };
    let (ow, ob) = (b.var(g, "brain/out/weight"), b.var(g, "brain/out/bias"));
    let out = g.linear(u, ow, Some(ob));
    Ok(g.reshape(out, &[batch, cfg.tokens, cfg.token_dim]))
}
