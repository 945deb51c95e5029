//! Frozen random convolutional feature probes for two-way identification.

use crate::substrate::{Binder, Graph, ParamStore, Rng, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PROBE_SEED: u64 = 0x5EED_9B0E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    /// Two stride-2 conv blocks, spatial 8×8×8 output.
    Low,
    /// Four conv blocks then global average pooling.
    High,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 2] = [ProbeKind::Low, ProbeKind::High];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Low => "low",
            ProbeKind::High => "high",
        }
    }

    /// (in, out, stride) per conv block.
    fn blocks(self) -> &'static [(usize, usize, usize)] {
        match self {
            ProbeKind::Low => &[(3, 8, 2), (8, 8, 2)],
            ProbeKind::High => &[(3, 16, 2), (16, 32, 2), (32, 64, 2), (64, 128, 1)],
        }
    }
}

/// Probe with weights drawn once from [`PROBE_SEED`]. Uniform (not
/// Gaussian) init keeps the weights bit-stable across libm versions.
#[derive(Debug, Clone)]
pub struct Probe {
    pub kind: ProbeKind,
    params: ParamStore<f32>,
}

impl Probe {
    pub fn new(kind: ProbeKind) -> Self {
        let rng = Rng::new(PROBE_SEED).split(kind.name());
        let mut params = ParamStore::new();
        for (i, &(ci, co, _)) in kind.blocks().iter().enumerate() {
            let mut r = rng.split_index(i as u64);
            let a = (6.0 / (ci * 9) as f64).sqrt();
            let w: Vec<f32> = (0..co * ci * 9).map(|_| r.uniform_range(-a, a) as f32).collect();
            let b: Vec<f32> = (0..co).map(|_| r.uniform_range(-0.1, 0.1) as f32).collect();
            params.insert(format!("conv{i}/weight"), Tensor::from_parts(vec![co, ci, 3, 3], w), false).expect("fresh");
            params.insert(format!("conv{i}/bias"), Tensor::from_parts(vec![co], b), false).expect("fresh");
        }
        Self { kind, params }
    }

    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in self.params.iter() {
            h.update(name.as_bytes());
            for v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Features for a batch of `res × res × 3` images in `[0, 1]`.
    pub fn features(&self, images: &[Vec<f32>], res: usize) -> Vec<Vec<f32>> {
        if images.is_empty() {
            return Vec::new();
        }
        let n = images.len();
        let mut x = Vec::with_capacity(n * 3 * res * res);
        for img in images {
            assert_eq!(img.len(), res * res * 3, "probe input must be {res}x{res}x3");
            for c in 0..3 {
                x.extend((0..res * res).map(|p| img[p * 3 + c] - 0.5));
            }
        }
        let mut g = Graph::<f32>::new();
        let mut b = Binder::frozen(&self.params);
        let mut h = g.constant(Tensor::from_parts(vec![n, 3, res, res], x));
        for (i, &(_, _, stride)) in self.kind.blocks().iter().enumerate() {
            let w = b.var(&mut g, &format!("conv{i}/weight"));
            let bias = b.var(&mut g, &format!("conv{i}/bias"));
            h = g.conv2d(h, w, Some(bias), stride);
            h = g.gelu(h);
        }
        let out = g.value(h);
        let per = out.numel() / n;
        let data = out.data();
        match self.kind {
            ProbeKind::Low => data.chunks(per).map(<[f32]>::to_vec).collect(),
            ProbeKind::High => {
                let ch = out.shape()[1];
                let hw = per / ch;
                data.chunks(per)
                    .map(|item| item.chunks(hw).map(|m| m.iter().sum::<f32>() / hw as f32).collect())
                    .collect()
            }
        }
    }

    pub fn feature_dim(&self, res: usize) -> usize {
        match self.kind {
            ProbeKind::Low => {
                let s = res.div_ceil(2).div_ceil(2);
                8 * s * s
            }
            ProbeKind::High => 128,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::metrics::pearson;
    use crate::synthcortex::{render_scene, sample_scene, Palette, SceneConfig};

    #[test]
    fn dimensions_and_determinism() {
        let palette = Palette::default();
        let mut rng = Rng::new(7);
        let img = render_scene(&sample_scene(&mut rng, &SceneConfig::default(), &palette), &palette, 32);
        for kind in ProbeKind::ALL {
            let p = Probe::new(kind);
            let f = p.features(&[img.clone(), img.clone()], 32);
            assert_eq!(f[0].len(), p.feature_dim(32));
            assert_eq!(f[0], f[1]);
            assert_eq!(p.weights_hash(), Probe::new(kind).weights_hash());
        }
        assert_eq!(Probe::new(ProbeKind::Low).feature_dim(32), 512);
    }

    /// Shift by `dx` pixels horizontally, filling with the background color.
    fn shift(img: &[f32], res: usize, dx: usize, fill: [f32; 3]) -> Vec<f32> {
        let mut out = vec![0.0; img.len()];
        for y in 0..res {
            for x in 0..res {
                let px: [f32; 3] = if x >= dx {
                    let s = (y * res + x - dx) * 3;
                    [img[s], img[s + 1], img[s + 2]]
                } else {
                    fill
                };
                out[(y * res + x) * 3..][..3].copy_from_slice(&px);
            }
        }
        out
    }

    #[test]
    fn pooling_tolerates_translation() {
        let palette = Palette::default();
        let mut rng = Rng::new(11);
        let (mut low, mut high) = (0.0, 0.0);
        let a: Vec<Vec<f32>> = (0..100)
            .map(|_| render_scene(&sample_scene(&mut rng, &SceneConfig::default(), &palette), &palette, 32))
            .collect();
        let b: Vec<Vec<f32>> = a.iter().map(|img| shift(img, 32, 2, palette.colors[0])).collect();
        for (kind, acc) in [(ProbeKind::Low, &mut low), (ProbeKind::High, &mut high)] {
            let p = Probe::new(kind);
            let (fa, fb) = (p.features(&a, 32), p.features(&b, 32));
            *acc = fa.iter().zip(&fb).map(|(x, y)| 1.0 - pearson(x, y).unwrap_or(0.0)).sum::<f64>() / 100.0;
        }
        assert!(low > high, "low-probe distance {low} vs high-probe {high}");
    }
}
