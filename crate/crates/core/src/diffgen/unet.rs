//! Cross-attention U-Net noise predictor with optional LoRA adapters.
//!
//! Parameters live under `unet/`, adapters under `lora/`, and the learned
//! null conditioning under `cond/null`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::{Binder, Graph, ParamStore, Real, Rng, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub image_channels: usize,
    pub resolution: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Cross-attention after the residual block of each level.
    pub attention: Vec<bool>,
    pub temb_dim: usize,
    pub groups: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            resolution: 32,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            attention: vec![false, true, true],
            temb_dim: 128,
            groups: 8,
            tokens: 8,
            token_dim: 64,
            lora_rank: 4,
            lora_alpha: 4.0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: format!("unet.{key}"), msg });
        if self.channel_mults.is_empty() || self.channel_mults.len() != self.attention.len() {
            return bad("attention", "needs one flag per channel multiplier".into());
        }
        let down = 1usize << (self.channel_mults.len() - 1);
        if self.resolution % down != 0 {
            return bad("resolution", format!("{} not divisible by {down}", self.resolution));
        }
        if self.temb_dim % 2 != 0 || self.temb_dim == 0 {
            return bad("temb_dim", "must be positive and even".into());
        }
        for m in &self.channel_mults {
            if (self.base_channels * m) % self.groups != 0 {
                return bad(
                    "groups",
                    format!("{} channels not divisible into {} groups", self.base_channels * m, self.groups),
                );
            }
        }
        if self.lora_rank == 0 {
            return bad("lora_rank", "must be positive".into());
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    fn emb_dim(&self) -> usize {
        4 * self.base_channels
    }
}

pub const NULL_TOKENS: &str = "cond/null";

fn is_attn_projection(name: &str) -> bool {
    ["/attn/q/", "/attn/k/", "/attn/v/", "/attn/o/"].iter().any(|p| name.contains(p))
}

/// Cross-attention projection weights and biases.
pub fn is_cross_attn_param(name: &str) -> bool {
    name.starts_with("unet/") && is_attn_projection(name)
}

/// Every fully connected layer of the U-Net (attention, time MLP, and the
/// per-block time projections).
pub fn is_linear_param(name: &str) -> bool {
    name.starts_with("unet/")
        && (is_attn_projection(name) || name.contains("/temb_proj/") || name.starts_with("unet/temb/"))
}

pub fn is_unet_param(name: &str) -> bool {
    name.starts_with("unet/")
}

pub fn is_lora_param(name: &str) -> bool {
    name.starts_with("lora/")
}

fn he<F: Real>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    Tensor::randn(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

struct Init<'a, F> {
    store: &'a mut ParamStore<F>,
    rng: Rng,
}

impl<F: Real> Init<'_, F> {
    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, zero: bool) -> Result<()> {
        let mut r = self.rng.split(name);
        let w = if zero { Tensor::zeros(&[d_out, d_in]) } else { he(&mut r, &[d_out, d_in], d_in) };
        self.store.insert(format!("{name}/weight"), w, true)?;
        self.store.insert(format!("{name}/bias"), Tensor::zeros(&[d_out]), true)
    }

    fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, zero: bool) -> Result<()> {
        let mut r = self.rng.split(name);
        let w = if zero { Tensor::zeros(&[co, ci, k, k]) } else { he(&mut r, &[co, ci, k, k], ci * k * k) };
        self.store.insert(format!("{name}/weight"), w, true)?;
        self.store.insert(format!("{name}/bias"), Tensor::zeros(&[co]), true)
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{name}/gamma"), Tensor::full(&[c], F::ONE), true)?;
        self.store.insert(format!("{name}/beta"), Tensor::zeros(&[c]), true)
    }

    fn res(&mut self, name: &str, ci: usize, co: usize, emb: usize) -> Result<()> {
        self.norm(&format!("{name}/norm1"), ci)?;
        self.conv(&format!("{name}/conv1"), ci, co, 3, false)?;
        self.linear(&format!("{name}/temb_proj"), emb, co, false)?;
        self.norm(&format!("{name}/norm2"), co)?;
        self.conv(&format!("{name}/conv2"), co, co, 3, true)?;
        if ci != co {
            self.conv(&format!("{name}/skip"), ci, co, 1, false)?;
        }
        Ok(())
    }

    fn attn(&mut self, name: &str, c: usize, d: usize) -> Result<()> {
        self.norm(&format!("{name}/norm"), c)?;
        self.linear(&format!("{name}/q"), c, c, false)?;
        self.linear(&format!("{name}/k"), d, c, false)?;
        self.linear(&format!("{name}/v"), d, c, false)?;
        self.linear(&format!("{name}/o"), c, c, false)
    }
}

/// Fresh U-Net weights plus the null conditioning tokens.
pub fn init_unet<F: Real>(cfg: &UNetConfig, rng: &Rng) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, rng: rng.split("unet") };
    let (c0, emb, d) = (cfg.base_channels, cfg.emb_dim(), cfg.token_dim);
    init.linear("unet/temb/fc1", cfg.temb_dim, emb, false)?;
    init.linear("unet/temb/fc2", emb, emb, false)?;
    init.conv("unet/in", cfg.image_channels, c0, 3, false)?;
    let levels = cfg.channel_mults.len();
    let mut ch = c0;
    for l in 0..levels {
        let co = cfg.channels(l);
        init.res(&format!("unet/enc{l}/res"), ch, co, emb)?;
        if cfg.attention[l] {
            init.attn(&format!("unet/enc{l}/attn"), co, d)?;
        }
        if l + 1 < levels {
            init.conv(&format!("unet/enc{l}/down"), co, co, 3, false)?;
        }
        ch = co;
    }
    init.res("unet/mid/res", ch, ch, emb)?;
    if cfg.attention[levels - 1] {
        init.attn("unet/mid/attn", ch, d)?;
    }
    for l in (0..levels).rev() {
        let co = cfg.channels(l);
        init.res(&format!("unet/dec{l}/res"), ch + co, co, emb)?;
        if cfg.attention[l] {
            init.attn(&format!("unet/dec{l}/attn"), co, d)?;
        }
        if l > 0 {
            init.conv(&format!("unet/dec{l}/up"), co, cfg.channels(l - 1), 3, false)?;
        }
        ch = if l > 0 { cfg.channels(l - 1) } else { co };
    }
    init.norm("unet/out/norm", c0)?;
    init.conv("unet/out/conv", c0, cfg.image_channels, 3, true)?;
    let mut r = rng.split("null");
    store.insert(NULL_TOKENS, Tensor::randn(&mut r, &[cfg.tokens, cfg.token_dim], 1.0), true)?;
    Ok(store)
}

/// Attaches rank-r adapters to every cross-attention projection:
/// `A ~ N(0, 1/d_in)`, `B = 0`.
pub fn attach_lora<F: Real>(cfg: &UNetConfig, store: &mut ParamStore<F>, rng: &Rng) -> Result<usize> {
    let targets: Vec<(String, Vec<usize>)> = store
        .iter()
        .filter(|(n, _)| is_cross_attn_param(n) && n.ends_with("/weight"))
        .map(|(n, e)| (n.trim_end_matches("/weight").to_string(), e.tensor.shape().to_vec()))
        .collect();
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no cross-attention layers to adapt".into()));
    }
    let r = cfg.lora_rank;
    for (base, shape) in &targets {
        let (d_out, d_in) = (shape[0], shape[1]);
        let name = format!("lora/{}", base.trim_start_matches("unet/"));
        let mut g = rng.split(&name);
        store.insert(format!("{name}/A"), he(&mut g, &[r, d_in], d_in), true)?;
        store.insert(format!("{name}/B"), Tensor::zeros(&[d_out, r]), true)?;
    }
    Ok(targets.len())
}

pub fn has_lora<F: Real>(store: &ParamStore<F>) -> bool {
    store.names().any(|n| is_lora_param(n))
}

/// `W·x + b + (α/r)·B·(A·x)` on a plain vector; reference form of the
/// adapted projection.
pub fn lora_apply(x: &[f64], w: &[f64], d_out: usize, a: &[f64], b: &[f64], rank: usize, scale: f64) -> Vec<f64> {
    let d_in = x.len();
    let ax: Vec<f64> = (0..rank).map(|i| (0..d_in).map(|j| a[i * d_in + j] * x[j]).sum()).collect();
    (0..d_out)
        .map(|o| {
            let wx: f64 = (0..d_in).map(|j| w[o * d_in + j] * x[j]).sum();
            let bax: f64 = (0..rank).map(|i| b[o * rank + i] * ax[i]).sum();
            wx + scale * bax
        })
        .collect()
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding<F: Real>(ts: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
        let f: Vec<f64> = freqs.collect();
        data.extend(f.iter().map(|a| F::of(a.sin())));
        data.extend(f.iter().map(|a| F::of(a.cos())));
    }
    Tensor::new(vec![ts.len(), dim], data).expect("embedding extents")
}

struct Net<'a, 'b, 'p, F> {
    g: &'a mut Graph<F>,
    b: &'b mut Binder<'p, F>,
    cfg: &'a UNetConfig,
}

impl<F: Real> Net<'_, '_, '_, F> {
    fn p(&mut self, name: &str) -> Var {
        self.b.var(self.g, name)
    }

    fn linear(&mut self, x: Var, name: &str) -> Var {
        let (w, bias) = (self.p(&format!("{name}/weight")), self.p(&format!("{name}/bias")));
        let y = self.g.linear(x, w, Some(bias));
        let lora = format!("lora/{}", name.trim_start_matches("unet/"));
        if !self.b.has(&format!("{lora}/A")) {
            return y;
        }
        let (a, bm) = (self.p(&format!("{lora}/A")), self.p(&format!("{lora}/B")));
        let ax = self.g.linear(x, a, None);
        let bax = self.g.linear(ax, bm, None);
        let s = self.cfg.lora_scale();
        let bax = if s == 1.0 { bax } else { self.g.scale(bax, F::of(s)) };
        self.g.add(y, bax)
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize) -> Var {
        let (w, bias) = (self.p(&format!("{name}/weight")), self.p(&format!("{name}/bias")));
        self.g.conv2d(x, w, Some(bias), stride)
    }

    fn norm(&mut self, x: Var, name: &str) -> Var {
        let (gm, bt) = (self.p(&format!("{name}/gamma")), self.p(&format!("{name}/beta")));
        self.g.group_norm(x, gm, bt, self.cfg.groups)
    }

    fn res(&mut self, x: Var, name: &str, emb: Var) -> Var {
        let h = self.norm(x, &format!("{name}/norm1"));
        let h = self.g.silu(h);
        let h = self.conv(h, &format!("{name}/conv1"), 1);
        let e = self.linear(emb, &format!("{name}/temb_proj"));
        let h = self.g.add_channel_bias(h, e);
        let h = self.norm(h, &format!("{name}/norm2"));
        let h = self.g.silu(h);
        let h = self.conv(h, &format!("{name}/conv2"), 1);
        let skip =
            if self.b.has(&format!("{name}/skip/weight")) { self.conv(x, &format!("{name}/skip"), 1) } else { x };
        self.g.add(skip, h)
    }

    fn attn(&mut self, x: Var, name: &str, tokens: Var) -> Var {
        let s = self.g.shape(x).to_vec();
        let (batch, c, hw) = (s[0], s[1], s[2] * s[3]);
        let h = self.norm(x, &format!("{name}/norm"));
        let h = self.g.reshape(h, &[batch, c, hw]);
        let h = self.g.transpose_last2(h);
        let q = self.linear(h, &format!("{name}/q"));
        let k = self.linear(tokens, &format!("{name}/k"));
        let v = self.linear(tokens, &format!("{name}/v"));
        let scores = self.g.bmm(q, k, false, true);
        let scores = self.g.scale(scores, F::of(1.0 / (c as f64).sqrt()));
        let attn = self.g.softmax(scores);
        let out = self.g.bmm(attn, v, false, false);
        let out = self.linear(out, &format!("{name}/o"));
        let out = self.g.transpose_last2(out);
        let out = self.g.reshape(out, &s);
        self.g.add(x, out)
    }

    fn check(&self, v: Var, block: &str) -> Result<()> {
        if self.g.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("U-Net block `{block}`")))
        }
    }
}

/// Predicts the noise in `x_t: [B, C, H, W]` given per-item timesteps and
/// conditioning `tokens: [B, P, D]`.
pub fn unet_forward<F: Real>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    cfg: &UNetConfig,
    x_t: Var,
    ts: &[usize],
    tokens: Var,
) -> Result<Var> {
    let xs = g.shape(x_t).to_vec();
    let expect = [ts.len(), cfg.image_channels, cfg.resolution, cfg.resolution];
    if xs != expect {
        return Err(Error::Shape(format!("U-Net input {xs:?}, expected {expect:?}")));
    }
    let tk = g.shape(tokens).to_vec();
    if tk != [ts.len(), cfg.tokens, cfg.token_dim] {
        return Err(Error::Shape(format!("tokens {tk:?}, expected [{}, {}, {}]", ts.len(), cfg.tokens, cfg.token_dim)));
    }
    let mut n = Net { g, b, cfg };
    let temb = n.g.constant(timestep_embedding(ts, cfg.temb_dim));
    let e = n.linear(temb, "unet/temb/fc1");
    let e = n.g.silu(e);
    let e = n.linear(e, "unet/temb/fc2");
    let emb = n.g.silu(e);

    let levels = cfg.channel_mults.len();
    let mut h = n.conv(x_t, "unet/in", 1);
    let mut skips = Vec::with_capacity(levels);
    for l in 0..levels {
        let name = format!("unet/enc{l}");
        h = n.res(h, &format!("{name}/res"), emb);
        if cfg.attention[l] {
            h = n.attn(h, &format!("{name}/attn"), tokens);
        }
        n.check(h, &name)?;
        skips.push(h);
        if l + 1 < levels {
            h = n.conv(h, &format!("{name}/down"), 2);
        }
    }
    h = n.res(h, "unet/mid/res", emb);
    if cfg.attention[levels - 1] {
        h = n.attn(h, "unet/mid/attn", tokens);
    }
    n.check(h, "unet/mid")?;
    for l in (0..levels).rev() {
        let name = format!("unet/dec{l}");
        h = n.g.concat(&[h, skips[l]], 1);
        h = n.res(h, &format!("{name}/res"), emb);
        if cfg.attention[l] {
            h = n.attn(h, &format!("{name}/attn"), tokens);
        }
        n.check(h, &name)?;
        if l > 0 {
            h = n.g.upsample2x(h);
            h = n.conv(h, &format!("{name}/up"), 1);
        }
    }
    h = n.norm(h, "unet/out/norm");
    h = n.g.silu(h);
    let out = n.conv(h, "unet/out/conv", 1);
    n.check(out, "unet/out")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::gradcheck::{gradcheck, GradCheckOptions};

    pub(crate) fn tiny() -> UNetConfig {
        UNetConfig {
            resolution: 8,
            base_channels: 4,
            channel_mults: vec![1, 2],
            attention: vec![false, true],
            temb_dim: 8,
            groups: 2,
            tokens: 2,
            token_dim: 3,
            ..Default::default()
        }
    }

    fn forward(
        cfg: &UNetConfig,
        store: &ParamStore<f32>,
        x: &Tensor<f32>,
        ts: &[usize],
        tok: &Tensor<f32>,
    ) -> Tensor<f32> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(store);
        let (xv, tv) = (g.constant(x.clone()), g.constant(tok.clone()));
        let out = unet_forward(&mut g, &mut b, cfg, xv, ts, tv).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn lora_reference_examples() {
        let y = lora_apply(&[1.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2, &[1.0, 0.0], &[1.0, 0.0], 1, 1.0);
        assert_eq!(y, vec![2.0, 1.0]);
        let y = lora_apply(&[0.5, -2.0], &[1.0, 2.0, 3.0, 4.0], 2, &[1.0, 1.0], &[0.0, 0.0], 1, 1.0);
        assert_eq!(y, vec![-3.5, -6.5]);
        assert_eq!(UNetConfig::default().lora_scale(), 1.0);
    }

    #[test]
    fn shapes_determinism_and_lora_zero_equivalence() {
        let cfg = tiny();
        let mut store = init_unet::<f32>(&cfg, &Rng::new(1)).unwrap();
        // perturb the zero-initialized convolutions so the test exercises every path
        for n in ["unet/out/conv/weight", "unet/dec0/res/conv2/weight"] {
            let t = store.tensor_mut(n).unwrap();
            let mut r = Rng::new(5);
            t.data_mut().iter_mut().for_each(|v| *v = 0.1 * r.normal() as f32);
        }
        let mut r = Rng::new(2);
        let x = Tensor::randn(&mut r, &[2, 3, 8, 8], 1.0);
        let tok = Tensor::randn(&mut r, &[2, 2, 3], 1.0);
        let a = forward(&cfg, &store, &x, &[3, 900], &tok);
        assert_eq!(a.shape(), &[2, 3, 8, 8]);
        assert_eq!(a, forward(&cfg, &store, &x, &[3, 900], &tok));
        let mut adapted = store.clone();
        assert_eq!(attach_lora(&cfg, &mut adapted, &Rng::new(3)).unwrap(), 12);
        let b = forward(&cfg, &adapted, &x, &[3, 900], &tok);
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn regime_predicates() {
        let store = init_unet::<f32>(&tiny(), &Rng::new(1)).unwrap();
        let count = |f: fn(&str) -> bool| store.names().filter(|n| f(n)).count();
        assert!(count(is_cross_attn_param) < count(is_linear_param));
        assert!(count(is_linear_param) < count(is_unet_param));
        assert!(!is_unet_param(NULL_TOKENS));
    }

    #[test]
    fn non_finite_input_names_a_block() {
        let cfg = tiny();
        let store = init_unet::<f32>(&cfg, &Rng::new(1)).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let mut x = Tensor::zeros(&[1, 3, 8, 8]);
        x.data_mut()[0] = f32::NAN;
        let xv = g.constant(x);
        let tv = g.constant(Tensor::zeros(&[1, 2, 3]));
        let err = unet_forward(&mut g, &mut b, &cfg, xv, &[1], tv).unwrap_err();
        assert!(err.to_string().contains("enc0"), "{err}");
    }

    #[test]
    fn gradcheck_one_block_config() {
        let cfg = UNetConfig {
            resolution: 4,
            base_channels: 4,
            channel_mults: vec![1],
            attention: vec![true],
            temb_dim: 4,
            groups: 2,
            tokens: 2,
            token_dim: 3,
            ..Default::default()
        };
        let mut store = init_unet::<f64>(&cfg, &Rng::new(7)).unwrap();
        attach_lora(&cfg, &mut store, &Rng::new(8)).unwrap();
        for n in store.names().cloned().collect::<Vec<_>>() {
            let mut r = Rng::new(9).split(&n);
            store.tensor_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v += 0.2 * r.normal());
        }
        store.insert("x", Tensor::randn(&mut Rng::new(1), &[1, 3, 4, 4], 1.0), true).unwrap();
        store.insert("tok", Tensor::randn(&mut Rng::new(2), &[1, 2, 3], 1.0), true).unwrap();
        let weights: Vec<f64> = (0..48).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.3).collect();
        let report = gradcheck(
            &store,
            |g, b| {
                let (x, tok) = (b.var(g, "x"), b.var(g, "tok"));
                let out = unet_forward(g, b, &cfg, x, &[17], tok).unwrap();
                g.weighted_sum(out, weights.clone())
            },
            GradCheckOptions { max_entries: 16, ..Default::default() },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
