//! Classifier-free guidance and deterministic DDIM sampling.

use serde::{Deserialize, Serialize};

use super::schedule::{ddim_timesteps, NoiseSchedule};
use super::unet::{unet_forward, UNetConfig, NULL_TOKENS};
use crate::error::{Error, Result};
use crate::substrate::{Binder, Graph, ParamStore, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    pub steps: usize,
    pub guidance: f64,
    /// Clamp the running x0 estimate to the data range [-1, 1].
    pub clip_x0: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { steps: 20, guidance: 3.0, clip_x0: true }
    }
}

/// `uncond + scale·(cond − uncond)`; scales 1 and 0 return their operand
/// untouched.
pub fn cfg_combine(cond: &[f32], uncond: &[f32], scale: f64) -> Vec<f32> {
    assert_eq!(cond.len(), uncond.len(), "cfg_combine: length mismatch");
    if scale == 1.0 {
        return cond.to_vec();
    }
    if scale == 0.0 {
        return uncond.to_vec();
    }
    let s = scale as f32;
    cond.iter().zip(uncond).map(|(&c, &u)| u + s * (c - u)).collect()
}

/// DDIM (η = 0) from `x` at `T − 1` down to 0 with a caller-supplied noise
/// predictor. Returns the final model-space sample.
pub fn ddim_loop(
    schedule: &NoiseSchedule,
    steps: usize,
    clip_x0: bool,
    mut x: Vec<f32>,
    mut predict: impl FnMut(&[f32], usize) -> Result<Vec<f32>>,
) -> Result<Vec<f32>> {
    let ts = ddim_timesteps(schedule.t_max, steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let eps = predict(&x, t)?;
        if eps.len() != x.len() {
            return Err(Error::Shape(format!("predictor returned {} values for {}", eps.len(), x.len())));
        }
        let (a, s) = schedule.coefficients(t);
        let x0: Vec<f64> = x
            .iter()
            .zip(&eps)
            .map(|(&xv, &e)| {
                let v = (xv as f64 - s * e as f64) / a;
                if clip_x0 {
                    v.clamp(-1.0, 1.0)
                } else {
                    v
                }
            })
            .collect();
        x = match ts.get(i + 1) {
            Some(&prev) => {
                let (ap, sp) = schedule.coefficients(prev);
                x0.iter().zip(&eps).map(|(&x0, &e)| (ap * x0 + sp * e as f64) as f32).collect()
            }
            None => x0.iter().map(|&v| v as f32).collect(),
        };
    }
    Ok(x)
}

/// Model-space `[-1, 1]` to image-space `[0, 1]`, clipped.
pub fn to_image_range(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect()
}

pub fn to_model_range(img: &[f32]) -> Vec<f32> {
    img.iter().map(|&v| 2.0 * v - 1.0).collect()
}

pub fn hwc_to_chw(img: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + p] = img[p * c + ch];
        }
    }
    out
}

pub fn chw_to_hwc(img: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            out[p * c + ch] = img[ch * h * w + p];
        }
    }
    out
}

/// One U-Net evaluation outside of training.
pub fn predict_eps(
    params: &ParamStore<f32>,
    cfg: &UNetConfig,
    x: &[f32],
    ts: &[usize],
    tokens: &Tensor<f32>,
) -> Result<Vec<f32>> {
    let r = cfg.resolution;
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let xv = g.constant(Tensor::new(vec![ts.len(), cfg.image_channels, r, r], x.to_vec())?);
    let tv = g.constant(tokens.clone());
    let out = unet_forward(&mut g, &mut b, cfg, xv, ts, tv)?;
    Ok(g.value(out).data().to_vec())
}

/// Guided DDIM for a batch of conditioning tokens `[B, P, D]`. Each item's
/// starting noise comes from `rng.split_index(item)`, so results do not
/// depend on how the batch is chunked. Returns HWC images in `[0, 1]`.
pub fn ddim_sample(
    params: &ParamStore<f32>,
    cfg: &UNetConfig,
    schedule: &NoiseSchedule,
    tokens: &Tensor<f32>,
    settings: &SamplerSettings,
    rng: &Rng,
) -> Result<Vec<Vec<f32>>> {
    let ts = tokens.shape();
    if ts.len() != 3 || ts[1] != cfg.tokens || ts[2] != cfg.token_dim {
        return Err(Error::Shape(format!("tokens {ts:?}")));
    }
    let noise: Vec<Rng> = (0..ts[0]).map(|i| rng.split_index(i as u64)).collect();
    ddim_sample_seeded(params, cfg, schedule, tokens, settings, &noise)
}

/// Like [`ddim_sample`], with one noise stream per item.
pub fn ddim_sample_seeded(
    params: &ParamStore<f32>,
    cfg: &UNetConfig,
    schedule: &NoiseSchedule,
    tokens: &Tensor<f32>,
    settings: &SamplerSettings,
    noise: &[Rng],
) -> Result<Vec<Vec<f32>>> {
    let ts = tokens.shape();
    if ts.len() != 3 || ts[1] != cfg.tokens || ts[2] != cfg.token_dim || ts[0] != noise.len() {
        return Err(Error::Shape(format!("tokens {ts:?} for {} noise streams", noise.len())));
    }
    let batch = ts[0];
    let (c, r) = (cfg.image_channels, cfg.resolution);
    let item = c * r * r;
    let mut x = Vec::with_capacity(batch * item);
    for ri in noise {
        let mut ri = ri.clone();
        x.extend((0..item).map(|_| ri.normal() as f32));
    }
    let null = params.get(NULL_TOKENS)?.clone();
    let guided = settings.guidance != 1.0;
    let both = if guided {
        let mut parts: Vec<Tensor<f32>> =
            (0..batch).map(|i| tokens.slice_outer(i, i + 1).reshape(&ts[1..]).expect("token slice")).collect();
        parts.extend(std::iter::repeat_n((*null).clone(), batch));
        Tensor::stack(&parts)?
    } else {
        tokens.clone()
    };
    let out = ddim_loop(schedule, settings.steps, settings.clip_x0, x, |x, t| {
        if !guided {
            return predict_eps(params, cfg, x, &vec![t; batch], &both);
        }
        let mut doubled = x.to_vec();
        doubled.extend_from_slice(x);
        let eps = predict_eps(params, cfg, &doubled, &vec![t; 2 * batch], &both)?;
        let (cond, uncond) = eps.split_at(batch * item);
        Ok(cfg_combine(cond, uncond, settings.guidance))
    })?;
    Ok(out.chunks(item).map(|x| chw_to_hwc(&to_image_range(x), c, r, r)).collect())
}
