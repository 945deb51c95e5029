//! Reconstruction from preprocessed epochs.

use serde::{Deserialize, Serialize};

use super::checkpoint::DecoderCheckpoint;
use crate::brainmod::{brain_forward, epochs_to_input};
use crate::diffgen::{ddim_sample_seeded, SamplerSettings, NULL_TOKENS};
use crate::error::{Error, Result};
use crate::prep::{Epoch, WindowSpec};
use crate::substrate::{Binder, Graph, Rng, Tensor};

/// Items per sampler batch.
pub const INFER_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject: usize,
    pub stimulus: usize,
    pub run: usize,
    pub event: usize,
    pub repetition: usize,
    pub window: WindowSpec,
    pub delta: f64,
    pub seed: u64,
    pub sampler: SamplerSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub provenance: Provenance,
    /// HWC in `[0, 1]`.
    pub image: Vec<f32>,
}

/// Starting-noise stream for an epoch, keyed by where the trial sits so
/// that batching and ordering never change an image.
pub fn noise_stream(seed: u64, epoch: &Epoch) -> Rng {
    Rng::new(seed)
        .split("infer")
        .split_index(epoch.subject as u64)
        .split_index(epoch.run as u64)
        .split_index(epoch.event as u64)
}

/// Brain tokens `[B, P, D]` (dropout inactive) for epochs of one subject.
pub fn brain_tokens(ckpt: &DecoderCheckpoint, epochs: &[&Epoch]) -> Result<Tensor<f32>> {
    let Some(first) = epochs.first() else {
        return Err(Error::InvalidArgument("no epochs".into()));
    };
    let subject = first.subject;
    if epochs.iter().any(|e| e.subject != subject) {
        return Err(Error::InvalidArgument("brain_tokens expects a single subject".into()));
    }
    let brain = &ckpt.meta.model.brain;
    for e in epochs {
        if e.n_samples != brain.window_len {
            return Err(Error::Shape(format!(
                "epoch has {} samples but the checkpoint was trained on windows of {}",
                e.n_samples, brain.window_len
            )));
        }
    }
    match ckpt.meta.n_voxels(subject) {
        Some(c) if c == first.n_voxels => {}
        Some(c) => {
            return Err(Error::Shape(format!(
                "subject {subject}: epoch has {} voxels, model expects {c}",
                first.n_voxels
            )))
        }
        None => return Err(Error::InvalidArgument(format!("checkpoint has no subject layer for subject {subject}"))),
    }
    let mut g = Graph::new();
    let mut b = Binder::frozen(&ckpt.params);
    let x = g.constant(epochs_to_input(epochs)?);
    let out = brain_forward(&mut g, &mut b, brain, subject, x, false, &mut Rng::new(0))?;
    Ok(g.value(out).clone())
}

fn chunks(epochs: &[Epoch]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < epochs.len() {
        let s = epochs[start].subject;
        let mut end = start + 1;
        while end < epochs.len() && end - start < INFER_CHUNK && epochs[end].subject == s {
            end += 1;
        }
        out.push(start..end);
        start = end;
    }
    out
}

/// One image per epoch, in input order.
pub fn infer(
    ckpt: &DecoderCheckpoint,
    epochs: &[Epoch],
    settings: &SamplerSettings,
    seed: u64,
) -> Result<Vec<Reconstruction>> {
    let model = &ckpt.meta.model;
    let schedule = model.schedule.build()?;
    let work = |range: &std::ops::Range<usize>| -> Result<Vec<Reconstruction>> {
        let part: Vec<&Epoch> = epochs[range.clone()].iter().collect();
        let tokens = brain_tokens(ckpt, &part)?;
        let noise: Vec<Rng> = part.iter().map(|e| noise_stream(seed, e)).collect();
        let images = ddim_sample_seeded(&ckpt.params, &model.unet, &schedule, &tokens, settings, &noise)?;
        Ok(part
            .iter()
            .zip(images)
            .map(|(e, image)| Reconstruction {
                provenance: Provenance {
                    subject: e.subject,
                    stimulus: e.stimulus,
                    run: e.run,
                    event: e.event,
                    repetition: e.repetition,
                    window: e.window,
                    delta: e.delta,
                    seed,
                    sampler: *settings,
                },
                image,
            })
            .collect())
    };
    let ranges = chunks(epochs);
    #[cfg(feature = "parallel")]
    let parts: Vec<Vec<Reconstruction>> = {
        use rayon::prelude::*;
        ranges.par_iter().map(work).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Vec<Reconstruction>> = ranges.iter().map(work).collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Samples conditioned on the null tokens only.
pub fn sample_unconditional(
    ckpt: &DecoderCheckpoint,
    n: usize,
    settings: &SamplerSettings,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    let model = &ckpt.meta.model;
    let schedule = model.schedule.build()?;
    let null = ckpt.params.get(NULL_TOKENS)?;
    let root = Rng::new(seed).split("unconditional");
    let settings = SamplerSettings { guidance: 1.0, ..*settings };
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(n);
        let tokens = Tensor::stack(&vec![(**null).clone(); end - start])?;
        let noise: Vec<Rng> = (start..end).map(|i| root.split_index(i as u64)).collect();
        out.extend(ddim_sample_seeded(&ckpt.params, &model.unet, &schedule, &tokens, &settings, &noise)?);
    }
    Ok(out)
}
