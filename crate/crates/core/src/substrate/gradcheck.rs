//! Central finite-difference checks of analytic gradients (64-bit).

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{Binder, ParamStore};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Parameters with more entries are checked on a seeded subsample of
    /// this many (at least 64) entries.
    pub max_entries: usize,
    pub seed: u64,
    /// Multiplier applied to the analytic gradient before comparison. Only
    /// useful for exercising the checker itself.
    pub corrupt: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-3, max_entries: 64, seed: 0, corrupt: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares analytic gradients of the scalar returned by `forward` with
/// central differences, for every trainable parameter of `params`.
pub fn gradcheck<Fwd>(params: &ParamStore<f64>, forward: Fwd, opts: GradCheckOptions) -> Result<GradReport>
where
    Fwd: Fn(&mut Graph<f64>, &mut Binder<f64>) -> Var,
{
    if opts.eps <= 0.0 {
        return Err(Error::InvalidArgument("gradcheck eps must be positive".into()));
    }
    let eval = |p: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let mut b = Binder::frozen(p);
        let out = forward(&mut g, &mut b);
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let mut binder = Binder::new(params);
    let out = forward(&mut g, &mut binder);
    assert_eq!(g.value(out).numel(), 1, "gradcheck needs a scalar output");
    let mut grads = g.backward(out);
    let analytic = binder.collect(&mut grads);
    drop(binder);

    let mut work = params.clone();
    let rng = Rng::new(opts.seed).split("gradcheck");
    let mut per_param = Vec::new();
    let mut max_rel_err = 0.0f64;
    for name in params.trainable_names() {
        let numel = params.get(&name)?.numel();
        let zeros;
        let grad = match analytic.get(&name) {
            Some(t) => t,
            None => {
                zeros = Tensor::zeros(params.get(&name)?.shape());
                &zeros
            }
        };
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        let mut idx: Vec<usize> = (0..numel).collect();
        let budget = opts.max_entries.max(64);
        if numel > budget {
            rng.split(&name).shuffle(&mut idx);
            idx.truncate(budget);
            idx.sort_unstable();
        }
        let mut worst = 0.0f64;
        for i in idx {
            let orig = work.get(&name)?.data()[i];
            work.tensor_mut(&name)?.data_mut()[i] = orig + opts.eps;
            let plus = eval(&work);
            work.tensor_mut(&name)?.data_mut()[i] = orig - opts.eps;
            let minus = eval(&work);
            work.tensor_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("finite difference of `{name}`")));
            }
            let a = grad.data()[i] * opts.corrupt;
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.push((name, worst));
    }
    Ok(GradReport { per_param, max_rel_err, passed: max_rel_err <= opts.tol })
}

/// The layer inventory the models are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv3x3,
    Conv3x3Stride2,
    Conv1x1,
    GroupNorm,
    LayerNorm,
    Gelu,
    Silu,
    Attention,
    Dropout,
    Upsample2x,
}

impl LayerKind {
    pub const ALL: [LayerKind; 11] = [
        LayerKind::Linear,
        LayerKind::Conv3x3,
        LayerKind::Conv3x3Stride2,
        LayerKind::Conv1x1,
        LayerKind::GroupNorm,
        LayerKind::LayerNorm,
        LayerKind::Gelu,
        LayerKind::Silu,
        LayerKind::Attention,
        LayerKind::Dropout,
        LayerKind::Upsample2x,
    ];
}

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::randn(rng, shape, std)
}

/// Builds a small random instance of `kind` (its input is checked as a
/// parameter too) and runs [`gradcheck`] on a random projection of the
/// output.
pub fn gradcheck_layer(kind: LayerKind, seed: u64, opts: GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(seed).split("layer-fixture");
    let mut p = ParamStore::new();
    let input_shape: Vec<usize> = match kind {
        LayerKind::Linear | LayerKind::LayerNorm | LayerKind::Gelu | LayerKind::Silu | LayerKind::Dropout => vec![4, 3],
        LayerKind::Attention => vec![2, 5, 8],
        _ => vec![2, 8, 4, 4],
    };
    p.insert("input", randn(&mut rng, &input_shape, 1.0), true)?;
    match kind {
        LayerKind::Linear => {
            p.insert("w", randn(&mut rng, &[3, 3], 0.5), true)?;
            p.insert("b", randn(&mut rng, &[3], 0.5), true)?;
        }
        LayerKind::Conv3x3 | LayerKind::Conv3x3Stride2 => {
            p.insert("w", randn(&mut rng, &[4, 8, 3, 3], 0.3), true)?;
            p.insert("b", randn(&mut rng, &[4], 0.3), true)?;
        }
        LayerKind::Conv1x1 => {
            p.insert("w", randn(&mut rng, &[4, 8, 1, 1], 0.3), true)?;
            p.insert("b", randn(&mut rng, &[4], 0.3), true)?;
        }
        LayerKind::GroupNorm => {
            p.insert("gamma", randn(&mut rng, &[8], 1.0), true)?;
            p.insert("beta", randn(&mut rng, &[8], 1.0), true)?;
        }
        LayerKind::LayerNorm => {
            p.insert("gamma", randn(&mut rng, &[3], 1.0), true)?;
            p.insert("beta", randn(&mut rng, &[3], 1.0), true)?;
        }
        LayerKind::Attention => {
            p.insert("tokens", randn(&mut rng, &[2, 3, 6], 1.0), true)?;
            for (name, d_in) in [("wq", 8), ("wk", 6), ("wv", 6)] {
                p.insert(name, randn(&mut rng, &[4, d_in], 0.4), true)?;
            }
        }
        LayerKind::Gelu | LayerKind::Silu | LayerKind::Dropout | LayerKind::Upsample2x => {}
    }
    let forward_out = |g: &mut Graph<f64>, b: &mut Binder<f64>| -> Var {
        let x = b.var(g, "input");
        match kind {
            LayerKind::Linear => {
                let (w, bias) = (b.var(g, "w"), b.var(g, "b"));
                g.linear(x, w, Some(bias))
            }
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                let (w, bias) = (b.var(g, "w"), b.var(g, "b"));
                g.conv2d(x, w, Some(bias), 1)
            }
            LayerKind::Conv3x3Stride2 => {
                let (w, bias) = (b.var(g, "w"), b.var(g, "b"));
                g.conv2d(x, w, Some(bias), 2)
            }
            LayerKind::GroupNorm => {
                let (ga, be) = (b.var(g, "gamma"), b.var(g, "beta"));
                g.group_norm(x, ga, be, 4)
            }
            LayerKind::LayerNorm => {
                let (ga, be) = (b.var(g, "gamma"), b.var(g, "beta"));
                g.layer_norm(x, ga, be)
            }
            LayerKind::Gelu => g.gelu(x),
            LayerKind::Silu => g.silu(x),
            LayerKind::Dropout => g.dropout(x, 0.5, &mut Rng::new(seed).split("dropout")),
            LayerKind::Upsample2x => g.upsample2x(x),
            LayerKind::Attention => {
                let tok = b.var(g, "tokens");
                let (wq, wk, wv) = (b.var(g, "wq"), b.var(g, "wk"), b.var(g, "wv"));
                let q = g.linear(x, wq, None);
                let k = g.linear(tok, wk, None);
                let v = g.linear(tok, wv, None);
                let s = g.bmm(q, k, false, true);
                let s = g.scale(s, 0.5);
                let a = g.softmax(s);
                g.bmm(a, v, false, false)
            }
        }
    };
    let probe_seed = seed;
    let forward = move |g: &mut Graph<f64>, b: &mut Binder<f64>| -> Var {
        let y = forward_out(g, b);
        let n = g.value(y).numel();
        let mut r = Rng::new(probe_seed).split("projection");
        let weights = (0..n).map(|_| r.normal()).collect();
        g.weighted_sum(y, weights)
    };
    gradcheck(&p, forward, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes_on_three_seeds() {
        for kind in LayerKind::ALL {
            for seed in 0..3 {
                let r = gradcheck_layer(kind, seed, GradCheckOptions::default()).unwrap();
                assert!(r.passed, "{kind:?} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn gelu_at_zero_input() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::zeros(&[5]), true).unwrap();
        let r = gradcheck(
            &p,
            |g, b| {
                let x = b.var(g, "x");
                let y = g.gelu(x);
                g.sum(y)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut p = ParamStore::new();
        let mut rng = Rng::new(1);
        p.insert("x", randn(&mut rng, &[16, 3], 3.0), false).unwrap();
        p.insert("w", randn(&mut rng, &[4, 3], 1.0), true).unwrap();
        let fwd = |g: &mut Graph<f64>, b: &mut Binder<f64>| {
            let (x, w) = (b.var(g, "x"), b.var(g, "w"));
            let y = g.linear(x, w, None);
            g.sum(y)
        };
        let ok = gradcheck(&p, fwd, GradCheckOptions::default()).unwrap();
        assert!(ok.passed);
        let bad = gradcheck(&p, fwd, GradCheckOptions { corrupt: 1.1, ..Default::default() }).unwrap();
        assert!(!bad.passed);
        assert!((bad.max_rel_err - 0.1).abs() < 0.01, "{}", bad.max_rel_err);
    }
}
