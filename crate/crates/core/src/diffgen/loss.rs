//! The denoising objective.

use super::schedule::{offset_noise, NoiseSchedule, TimestepSampling};
use super::unet::{unet_forward, UNetConfig};
use crate::error::{Error, Result};
use crate::substrate::{Binder, Graph, Real, Rng, Tensor, Var};

/// Timesteps and noise for one batch, drawn ahead of the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    pub eps: Vec<f32>,
}

pub fn draw_noise(
    rng: &mut Rng,
    batch: usize,
    shape: (usize, usize, usize),
    lambda: f64,
    sampling: TimestepSampling,
    t_max: usize,
) -> NoiseDraw {
    let ts = (0..batch).map(|_| sampling.sample(rng, t_max)).collect();
    let eps = (0..batch).flat_map(|_| offset_noise(rng, shape, lambda)).collect();
    NoiseDraw { ts, eps }
}

/// Noises `x0: [B, C, H, W]` (model range) and scores `predict` against the
/// true noise with a batch-mean squared error.
pub fn diffusion_loss_with<F: Real>(
    g: &mut Graph<F>,
    schedule: &NoiseSchedule,
    x0: &Tensor<F>,
    draw: &NoiseDraw,
    predict: impl FnOnce(&mut Graph<F>, Var, &[usize]) -> Result<Var>,
) -> Result<Var> {
    let shape = x0.shape().to_vec();
    let batch = shape[0];
    if batch == 0 || draw.ts.len() != batch || draw.eps.len() != x0.numel() {
        return Err(Error::Shape(format!("noise draw does not match batch {shape:?}")));
    }
    let item = x0.numel() / batch;
    let mut xt = Vec::with_capacity(x0.numel());
    for (i, &t) in draw.ts.iter().enumerate() {
        let (a, s) = schedule.coefficients(t);
        let (a, s) = (F::of(a), F::of(s));
        for j in i * item..(i + 1) * item {
            xt.push(a * x0.data()[j] + s * F::of(draw.eps[j] as f64));
        }
    }
    let xt = g.constant(Tensor::new(shape.clone(), xt)?);
    let eps = g.constant(Tensor::new(shape, draw.eps.iter().map(|&e| F::of(e as f64)).collect())?);
    let pred = predict(g, xt, &draw.ts)?;
    Ok(g.mse(pred, eps))
}

pub fn diffusion_loss<F: Real>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    cfg: &UNetConfig,
    schedule: &NoiseSchedule,
    x0: &Tensor<F>,
    tokens: Var,
    draw: &NoiseDraw,
) -> Result<Var> {
    diffusion_loss_with(g, schedule, x0, draw, |g, xt, ts| unet_forward(g, b, cfg, xt, ts, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_predictors() {
        let s = NoiseSchedule::default();
        let mut rng = Rng::new(4);
        let x0 = Tensor::<f64>::randn(&mut rng, &[8, 3, 8, 8], 0.5);
        let draw = draw_noise(&mut rng, 8, (3, 8, 8), 0.1, TimestepSampling::Bicubic, 1000);
        let mut g = Graph::new();
        let exact = diffusion_loss_with(&mut g, &s, &x0, &draw, |g, _, _| {
            Ok(g.constant(Tensor::new(vec![8, 3, 8, 8], draw.eps.iter().map(|&e| e as f64).collect()).unwrap()))
        })
        .unwrap();
        assert_eq!(g.value(exact).data(), &[0.0]);

        // zero predictor → E‖ε‖²/n = 1 + λ²
        let big = Tensor::<f64>::zeros(&[256, 3, 8, 8]);
        let draw = draw_noise(&mut rng, 256, (3, 8, 8), 0.1, TimestepSampling::Uniform, 1000);
        let mut g = Graph::new();
        let l = diffusion_loss_with(&mut g, &s, &big, &draw, |g, _, _| Ok(g.constant(Tensor::zeros(&[256, 3, 8, 8]))))
            .unwrap();
        let v = g.value(l).data()[0];
        assert!((v - 1.01).abs() < 0.02, "{v}");
        assert!(v >= 0.0);
    }
}
