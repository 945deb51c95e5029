//! Training loops. Every random draw of step `k` comes from a stream keyed
//! by `k`, so a resumed run replays the uninterrupted one exactly.

use std::path::Path;

use super::checkpoint::{CheckpointMeta, DecoderCheckpoint, Stage, TraceRow, META_SCHEMA_VERSION};
use super::config::{ModelConfig, Regime, TrainConfig};
use super::data::{ImageBank, TrainingSet};
use crate::brainmod::{
    self, add_subject, brain_forward, epochs_to_input, is_brain_param, param_subject, BrainModuleConfig,
};
use crate::diffgen::NULL_TOKENS;
use crate::diffgen::{
    attach_lora, diffusion_loss, draw_noise, has_lora, init_unet, is_lora_param, is_unet_param, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::prep::PrepConfig;
use crate::substrate::{adamw_step_present, Binder, Graph, LrSchedule, OptimizerState, ParamStore, Rng, Tensor, Var};

enum Source<'d> {
    Images(&'d ImageBank),
    Brain(&'d TrainingSet),
}

pub struct Trainer<'d> {
    pub ckpt: DecoderCheckpoint,
    source: Source<'d>,
    schedule: NoiseSchedule,
    lr: Option<LrSchedule>,
    rng: Rng,
}

/// Marks trainable tensors for a stage and regime.
pub fn configure_trainable(
    params: &mut ParamStore<f32>,
    stage: Stage,
    regime: Regime,
    adapted: Option<usize>,
) -> Result<()> {
    if stage != Stage::Pretrain && regime == Regime::Lora && !has_lora(params) {
        return Err(Error::InvalidArgument("regime `lora` needs attached adapters but none are present".into()));
    }
    params.set_trainable_where(|name| match stage {
        Stage::Pretrain => is_unet_param(name) || name == NULL_TOKENS,
        _ => {
            if is_unet_param(name) {
                regime.trains_unet_param(name)
            } else if is_lora_param(name) {
                regime == Regime::Lora
            } else if is_brain_param(name) {
                match (stage, param_subject(name)) {
                    (Stage::Adapt, Some(s)) => Some(s) == adapted,
                    _ => true,
                }
            } else {
                name == NULL_TOKENS
            }
        }
    });
    Ok(())
}

/// Random stream of one training step.
pub fn step_stream(stage_rng: &Rng, step: u64) -> Rng {
    stage_rng.split("step").split_index(step)
}

/// Whether a step trains on the null tokens instead of brain tokens.
pub fn cond_dropout_draw(step_rng: &Rng, p: f64) -> bool {
    p > 0.0 && step_rng.split("cond").bernoulli(p)
}

/// Root stream of a stage, from the config seed.
pub fn stage_stream(seed: u64, stage: Stage) -> Rng {
    Rng::new(seed).split(stage.name())
}

impl<'d> Trainer<'d> {
    fn new(ckpt: DecoderCheckpoint, source: Source<'d>) -> Result<Self> {
        let meta = &ckpt.meta;
        meta.model.validate()?;
        meta.train.validate()?;
        if let Source::Brain(set) = &source {
            meta.model.check_window(&set.window)?;
            for s in set.subjects() {
                if meta.n_voxels(s) != Some(set.n_voxels[&s]) {
                    return Err(Error::InvalidArgument(format!("subject {s} has no matching subject layer")));
                }
            }
        }
        let schedule = meta.model.schedule.build()?;
        let lr = if meta.train.steps > 0 {
            Some(LrSchedule::new(meta.train.max_lr * meta.lr_scale, meta.train.warmup_steps, meta.train.steps)?)
        } else {
            None
        };
        let rng = stage_stream(meta.train.seed, meta.stage);
        Ok(Self { ckpt, source, schedule, lr, rng })
    }

    /// Continues a saved run on the same data.
    pub fn resume(
        ckpt: DecoderCheckpoint,
        images: Option<&'d ImageBank>,
        set: Option<&'d TrainingSet>,
    ) -> Result<Self> {
        let source = match (ckpt.meta.stage, images, set) {
            (Stage::Pretrain, Some(b), _) => Source::Images(b),
            (Stage::Pretrain, None, _) => {
                return Err(Error::InvalidArgument("pretraining resumes need the image bank".into()))
            }
            (_, _, Some(s)) => Source::Brain(s),
            _ => return Err(Error::InvalidArgument("brain training resumes need the training set".into())),
        };
        if ckpt.optimizer.is_none() && ckpt.step > 0 {
            return Err(Error::InvalidArgument("checkpoint has no optimizer state to resume from".into()));
        }
        Self::new(ckpt, source)
    }

    pub fn done(&self) -> bool {
        self.ckpt.step >= self.ckpt.meta.train.steps
    }

    fn divergence_check(&self) -> Result<()> {
        let cfg = &self.ckpt.meta.train;
        let trace = &self.ckpt.trace;
        let Some(first) = trace.first() else { return Ok(()) };
        let limit = cfg.divergence_factor * first.loss;
        let run = trace.iter().rev().take_while(|r| r.loss > limit).count() as u64;
        if cfg.divergence_patience > 0 && run >= cfg.divergence_patience {
            return Err(Error::Diverged(format!(
                "{} stage: loss above {limit:.4} (10x the initial {:.4}) for {run} consecutive steps ending at step {}",
                self.ckpt.meta.stage.name(),
                first.loss,
                self.ckpt.step
            )));
        }
        Ok(())
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<TraceRow> {
        let meta = &self.ckpt.meta;
        let cfg = &meta.train;
        let unet = &meta.model.unet;
        let step = self.ckpt.step;
        let srng = step_stream(&self.rng, step);
        let batch = cfg.batch_size;
        let (c, r) = (unet.image_channels, unet.resolution);
        let item = c * r * r;

        let mut g = Graph::<f32>::new();
        let mut b = Binder::new(&self.ckpt.params);
        let mut x0 = Vec::with_capacity(batch * item);
        let mut pick = srng.split("batch");
        let mut cond_dropped = false;
        let tokens: Var = match &self.source {
            Source::Images(bank) => {
                let ids = bank.ids();
                for _ in 0..batch {
                    x0.extend_from_slice(bank.get(ids[pick.below(ids.len())])?);
                }
                let null = b.var(&mut g, NULL_TOKENS);
                g.broadcast_batch(null, batch)
            }
            Source::Brain(set) => {
                let mut idx: Vec<usize> = (0..batch).map(|_| pick.below(set.items.len())).collect();
                idx.sort_by_key(|&i| set.items[i].epoch.subject);
                for &i in &idx {
                    x0.extend_from_slice(set.images.get(set.items[i].target)?);
                }
                cond_dropped = cond_dropout_draw(&srng, cfg.cond_dropout);
                if cond_dropped {
                    let null = b.var(&mut g, NULL_TOKENS);
                    g.broadcast_batch(null, batch)
                } else {
                    let mut parts = Vec::new();
                    let mut start = 0;
                    while start < idx.len() {
                        let s = set.items[idx[start]].epoch.subject;
                        let end = start + idx[start..].iter().take_while(|&&i| set.items[i].epoch.subject == s).count();
                        let epochs: Vec<_> = idx[start..end].iter().map(|&i| &set.items[i].epoch).collect();
                        let x = g.constant(epochs_to_input(&epochs)?);
                        let mut drop_rng = srng.split("dropout").split_index(s as u64);
                        parts.push(brain_forward(&mut g, &mut b, &meta.model.brain, s, x, true, &mut drop_rng)?);
                        start = end;
                    }
                    if parts.len() == 1 {
                        parts[0]
                    } else {
                        g.concat(&parts, 0)
                    }
                }
            }
        };
        let x0 = Tensor::new(vec![batch, c, r, r], x0)?;
        let draw = draw_noise(
            &mut srng.split("noise"),
            batch,
            (c, r, r),
            cfg.offset_noise,
            cfg.timestep_sampling,
            self.schedule.t_max,
        );
        let loss = diffusion_loss(&mut g, &mut b, unet, &self.schedule, &x0, tokens, &draw)?;
        let loss_value = g.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at step {step} of the {} stage", meta.stage.name())));
        }
        let mut grads = g.backward(loss);
        let grads = b.collect(&mut grads);
        drop(g);
        let lr = self.lr.map_or(0.0, |s| s.lr_at(step + 1).lr);
        let adamw = cfg.adamw();
        let opt = self.ckpt.optimizer.get_or_insert_with(OptimizerState::new);
        adamw_step_present(&mut self.ckpt.params, &grads, opt, lr, &adamw)?;
        let row = TraceRow { step, loss: loss_value, lr, cond_dropped };
        self.ckpt.trace.push(row);
        self.ckpt.step += 1;
        self.divergence_check()?;
        Ok(row)
    }

    /// Runs up to `until` (capped at the configured step count).
    pub fn run_until(&mut self, until: u64) -> Result<()> {
        let until = until.min(self.ckpt.meta.train.steps);
        let every = (self.ckpt.meta.train.steps / 20).max(1);
        while self.ckpt.step < until {
            let row = self.step()?;
            if (row.step + 1) % every == 0 {
                let tail = &self.ckpt.trace[self.ckpt.trace.len().saturating_sub(every as usize)..];
                let mean = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
                log::info!(
                    "{} step {}/{} loss {mean:.4} lr {:.2e}",
                    self.ckpt.meta.stage.name(),
                    row.step + 1,
                    self.ckpt.meta.train.steps,
                    row.lr
                );
            }
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<DecoderCheckpoint> {
        self.run_until(u64::MAX)?;
        Ok(self.ckpt)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.ckpt.save(dir)
    }
}

fn meta(
    stage: Stage,
    model: ModelConfig,
    train: TrainConfig,
    subjects: Vec<(usize, usize)>,
    prep: PrepConfig,
) -> CheckpointMeta {
    CheckpointMeta {
        schema_version: META_SCHEMA_VERSION,
        stage,
        model,
        train,
        subjects,
        prep,
        sessions_used: None,
        lr_scale: 1.0,
        adapted_subject: None,
    }
}

/// Fresh generator (U-Net + null tokens) ready for pretraining.
pub fn init_generator(model: &ModelConfig, cfg: &TrainConfig) -> Result<DecoderCheckpoint> {
    model.validate()?;
    cfg.validate()?;
    let mut params = init_unet(&model.unet, &Rng::new(cfg.seed).split("init"))?;
    configure_trainable(&mut params, Stage::Pretrain, cfg.finetune_regime, None)?;
    let meta = meta(Stage::Pretrain, model.clone(), cfg.clone(), Vec::new(), PrepConfig::default());
    Ok(DecoderCheckpoint { meta, params, optimizer: None, step: 0, trace: Vec::new() })
}

/// Unconditional generator training on stimulus images; the null tokens
/// stand in for conditioning throughout.
pub fn pretrain_generator(images: &ImageBank, model: &ModelConfig, cfg: &TrainConfig) -> Result<DecoderCheckpoint> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to pretrain on".into()));
    }
    if images.resolution != model.unet.resolution {
        return Err(Error::Config {
            key: "unet.resolution".into(),
            msg: format!("images are {}px but the generator is {}px", images.resolution, model.unet.resolution),
        });
    }
    Trainer::new(init_generator(model, cfg)?, Source::Images(images))?.run()
}

/// Starting point for brain-conditioned training: pretrained generator +
/// fresh brain module (+ adapters for the `lora` regime).
pub fn init_joint(
    pretrained: &DecoderCheckpoint,
    brain: &BrainModuleConfig,
    set: &TrainingSet,
    cfg: &TrainConfig,
    prep: PrepConfig,
    stage: Stage,
) -> Result<DecoderCheckpoint> {
    if pretrained.meta.stage != Stage::Pretrain {
        return Err(Error::InvalidArgument(format!(
            "expected a pretrained generator, got a {} checkpoint",
            pretrained.meta.stage.name()
        )));
    }
    let mut model = pretrained.meta.model.clone();
    model.brain = brain.clone();
    model.validate()?;
    model.check_window(&cfg.window)?;
    cfg.validate()?;
    let root = Rng::new(cfg.seed).split("init-joint");
    let subjects: Vec<(usize, usize)> = set.n_voxels.iter().map(|(&s, &c)| (s, c)).collect();
    let mut params = pretrained.params.clone();
    let brain_store = brainmod::init_brain_module::<f32>(brain, &subjects, &root.split("brain"))?;
    for (name, e) in brain_store.iter() {
        params.insert(name.clone(), (*e.tensor).clone(), true)?;
    }
    if cfg.finetune_regime == Regime::Lora {
        attach_lora(&model.unet, &mut params, &root.split("lora"))?;
    }
    configure_trainable(&mut params, stage, cfg.finetune_regime, None)?;
    let meta = meta(stage, model, cfg.clone(), subjects, prep);
    Ok(DecoderCheckpoint { meta, params, optimizer: None, step: 0, trace: Vec::new() })
}

fn check_set_window(set: &TrainingSet, cfg: &TrainConfig) -> Result<()> {
    if set.window != cfg.window || set.delta != cfg.delta {
        return Err(Error::InvalidArgument(format!(
            "training set built for window {:?} δ={} but config says {:?} δ={}",
            set.window, set.delta, cfg.window, cfg.delta
        )));
    }
    Ok(())
}

/// Joint training of the brain module and the regime's generator weights
/// for one subject.
pub fn train_single_stage(
    set: &TrainingSet,
    pretrained: &DecoderCheckpoint,
    brain: &BrainModuleConfig,
    cfg: &TrainConfig,
    prep: PrepConfig,
) -> Result<DecoderCheckpoint> {
    check_set_window(set, cfg)?;
    let start = init_joint(pretrained, brain, set, cfg, prep, Stage::SingleStage)?;
    Trainer::new(start, Source::Brain(set))?.run()
}

/// One model for several subjects: per-subject input layers, shared rest.
pub fn train_multi_subject(
    set: &TrainingSet,
    pretrained: &DecoderCheckpoint,
    brain: &BrainModuleConfig,
    cfg: &TrainConfig,
    prep: PrepConfig,
) -> Result<DecoderCheckpoint> {
    if set.n_voxels.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "multi-subject training needs ≥ 2 subjects, got {}",
            set.n_voxels.len()
        )));
    }
    check_set_window(set, cfg)?;
    let start = init_joint(pretrained, brain, set, cfg, prep, Stage::MultiSubject)?;
    Trainer::new(start, Source::Brain(set))?.run()
}

pub const ADAPT_LR_SCALE: f64 = 0.1;

/// Starting point for adapting a multi-subject model to a new subject.
pub fn init_adapt(
    base: &DecoderCheckpoint,
    set: &TrainingSet,
    sessions_used: usize,
    cfg: &TrainConfig,
) -> Result<DecoderCheckpoint> {
    if sessions_used == 0 {
        return Err(Error::InvalidArgument("sessions_used must be at least 1".into()));
    }
    let subjects = set.subjects();
    let [subject] = subjects[..] else {
        return Err(Error::InvalidArgument(format!("adaptation data must hold exactly one subject, got {subjects:?}")));
    };
    if base.meta.n_voxels(subject).is_some() {
        return Err(Error::InvalidArgument(format!("subject {subject} was already part of the pretrained model")));
    }
    cfg.validate()?;
    check_set_window(set, cfg)?;
    let model = base.meta.model.clone();
    model.check_window(&cfg.window)?;
    let mut params = base.params.clone();
    add_subject(&model.brain, &mut params, subject, set.n_voxels[&subject], &Rng::new(cfg.seed).split("init-adapt"))?;
    if cfg.finetune_regime == Regime::Lora && !has_lora(&params) {
        attach_lora(&model.unet, &mut params, &Rng::new(cfg.seed).split("lora"))?;
    }
    configure_trainable(&mut params, Stage::Adapt, cfg.finetune_regime, Some(subject))?;
    let mut subjects = base.meta.subjects.clone();
    subjects.push((subject, set.n_voxels[&subject]));
    let mut m = meta(Stage::Adapt, model, cfg.clone(), subjects, base.meta.prep);
    m.sessions_used = Some(sessions_used);
    m.lr_scale = ADAPT_LR_SCALE;
    m.adapted_subject = Some(subject);
    Ok(DecoderCheckpoint { meta: m, params, optimizer: None, step: 0, trace: Vec::new() })
}

/// Fresh subject layers for an unseen subject; everything else finetuned
/// at a tenth of the learning rate. `set` must already be restricted to
/// the first `sessions_used` runs.
pub fn adapt_new_subject(
    base: &DecoderCheckpoint,
    set: &TrainingSet,
    sessions_used: usize,
    cfg: &TrainConfig,
) -> Result<DecoderCheckpoint> {
    let start = init_adapt(base, set, sessions_used, cfg)?;
    Trainer::new(start, Source::Brain(set))?.run()
}

/// Trainer over a prepared starting checkpoint (for step-wise control).
pub fn trainer_for<'d>(
    start: DecoderCheckpoint,
    images: Option<&'d ImageBank>,
    set: Option<&'d TrainingSet>,
) -> Result<Trainer<'d>> {
    Trainer::resume(start, images, set)
}
