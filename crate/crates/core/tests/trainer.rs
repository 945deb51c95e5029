mod common;

use bolddecode::brainmod::{is_brain_param, param_subject, BrainModuleConfig};
use bolddecode::diffgen::{is_lora_param, is_unet_param, SamplerSettings, UNetConfig, NULL_TOKENS};
use bolddecode::prep::{PrepConfig, WindowSpec};
use bolddecode::substrate::{ParamStore, Rng};
use bolddecode::trainer::*;
use bolddecode::Error;

fn tiny_model() -> ModelConfig {
    let unet = UNetConfig {
        resolution: 16,
        base_channels: 8,
        channel_mults: vec![1, 2],
        attention: vec![false, true],
        temb_dim: 16,
        groups: 4,
        tokens: 4,
        token_dim: 8,
        ..Default::default()
    };
    let brain = BrainModuleConfig { hidden: 12, tokens: 4, token_dim: 8, ..Default::default() };
    ModelConfig { unet, brain, sampler: SamplerSettings { steps: 4, ..Default::default() }, ..Default::default() }
}

fn tiny_train(steps: u64) -> TrainConfig {
    TrainConfig { steps, batch_size: 4, warmup_steps: 2.min(steps.saturating_sub(1)), ..Default::default() }
}

struct World {
    _dir: tempfile::TempDir,
    f: common::Fixture,
    pre: DecoderCheckpoint,
}

fn world(seed: u64) -> World {
    let dir = tempfile::tempdir().unwrap();
    let f = common::fixture(dir.path(), &common::small_config(), seed);
    let bank = train_image_bank(&f.dataset).unwrap();
    let pre = pretrain_generator(
        &bank,
        &tiny_model(),
        &TrainConfig { steps: 3, warmup_steps: 1, batch_size: 4, ..TrainConfig::pretrain() },
    )
    .unwrap();
    World { _dir: dir, f, pre }
}

fn set(w: &World, subjects: &[usize], max_runs: Option<usize>) -> TrainingSet {
    TrainingSet::build(&w.f.dataset, &w.f.prepared, &w.f.split, subjects, WindowSpec::default(), 0.0, max_runs).unwrap()
}

fn changed(before: &ParamStore<f32>, after: &ParamStore<f32>) -> Vec<String> {
    let (a, b) = (before.hashes(), after.hashes());
    a.iter().filter(|(n, h)| b.get(*n) != Some(h)).map(|(n, _)| n.clone()).collect()
}

#[test]
fn pretraining_zero_steps_is_initialization_and_seeded_runs_match() {
    let dir = tempfile::tempdir().unwrap();
    let f = common::fixture(dir.path(), &common::small_config(), 1);
    let bank = train_image_bank(&f.dataset).unwrap();
    let model = tiny_model();
    let zero = TrainConfig { steps: 0, warmup_steps: 0, ..TrainConfig::pretrain() };
    let init = init_generator(&model, &zero).unwrap();
    let out = pretrain_generator(&bank, &model, &zero).unwrap();
    assert_eq!(init.params.hash_where(|_| true), out.params.hash_where(|_| true));
    assert!(out.trace.is_empty());

    let cfg = TrainConfig { steps: 4, warmup_steps: 1, batch_size: 3, ..TrainConfig::pretrain() };
    let a = pretrain_generator(&bank, &model, &cfg).unwrap();
    let b = pretrain_generator(&bank, &model, &cfg).unwrap();
    assert_eq!(a.params.hash_where(|_| true), b.params.hash_where(|_| true));
    assert_ne!(a.params.hash_where(|_| true), init.params.hash_where(|_| true));
    assert_eq!(a.trace.len(), 4);
    assert!(a.trace.iter().all(|r| !r.cond_dropped));
}

#[test]
fn regimes_touch_only_their_trainable_sets() {
    let w = world(2);
    let data = set(&w, &[0], None);
    let brain = tiny_model().brain;
    for regime in Regime::ALL {
        let cfg = TrainConfig { finetune_regime: regime, ..tiny_train(5) };
        let start = init_joint(&w.pre, &brain, &data, &cfg, PrepConfig::default(), Stage::SingleStage).unwrap();
        let trained = trainer_run(start.clone(), &data);
        for name in changed(&start.params, &trained.params) {
            let allowed = regime.trains_unet_param(&name)
                || (regime == Regime::Lora && is_lora_param(&name))
                || is_brain_param(&name)
                || name == NULL_TOKENS;
            assert!(allowed, "{} changed `{name}`", regime.name());
        }
        if regime == Regime::None || regime == Regime::Lora {
            assert_eq!(start.params.hash_where(is_unet_param), trained.params.hash_where(is_unet_param));
        } else {
            assert_ne!(start.params.hash_where(is_unet_param), trained.params.hash_where(is_unet_param));
        }
        assert_ne!(start.params.hash_where(is_brain_param), trained.params.hash_where(is_brain_param));
    }
}

fn trainer_run(start: DecoderCheckpoint, data: &TrainingSet) -> DecoderCheckpoint {
    let t = bolddecode::trainer::run::Trainer::resume(start, None, Some(data)).unwrap();
    t.run().unwrap()
}

#[test]
fn lora_trains_far_fewer_parameters_than_full_finetuning() {
    let w = world(3);
    let data = set(&w, &[0], None);
    let brain = tiny_model().brain;
    let count = |regime: Regime| {
        let cfg = TrainConfig { finetune_regime: regime, ..tiny_train(5) };
        let ck = init_joint(&w.pre, &brain, &data, &cfg, PrepConfig::default(), Stage::SingleStage).unwrap();
        ck.params.count_where(|n, e| e.trainable && (is_unet_param(n) || is_lora_param(n)))
    };
    let (lora, all) = (count(Regime::Lora), count(Regime::All));
    assert!(lora * 10 < all, "lora {lora} vs all {all}");
    assert_eq!(count(Regime::None), 0);
}

#[test]
fn lora_regime_without_adapters_is_rejected() {
    let w = world(4);
    let mut params = w.pre.params.clone();
    let err = configure_trainable(&mut params, Stage::SingleStage, Regime::Lora, None).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(m) if m.contains("adapters")));
}

#[test]
fn conditioning_dropout_rate() {
    // 10^4 steps in each of 32 independent stage streams
    let per = 10_000u64;
    let mut dropped = 0usize;
    let mut streams = 0usize;
    for seed in 0..8 {
        for stage in [Stage::Pretrain, Stage::SingleStage, Stage::MultiSubject, Stage::Adapt] {
            let root = stage_stream(seed, stage);
            dropped += (0..per).filter(|&k| cond_dropout_draw(&step_stream(&root, k), 0.1)).count();
            streams += 1;
        }
    }
    let n = (per as usize * streams) as f64;
    let sigma = (n * 0.1 * 0.9).sqrt();
    assert!((dropped as f64 - 0.1 * n).abs() < 3.0 * sigma, "{dropped} of {n}");
    assert!(!cond_dropout_draw(&step_stream(&stage_stream(0, Stage::SingleStage), 3), 0.0));
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let w = world(5);
    let data = set(&w, &[0], None);
    let brain = tiny_model().brain;
    let cfg = tiny_train(8);
    let start = init_joint(&w.pre, &brain, &data, &cfg, PrepConfig::default(), Stage::SingleStage).unwrap();
    let straight = trainer_run(start.clone(), &data);

    let dir = tempfile::tempdir().unwrap();
    let mut t = bolddecode::trainer::run::Trainer::resume(start, None, Some(&data)).unwrap();
    t.run_until(4).unwrap();
    t.save(dir.path()).unwrap();
    let reloaded = DecoderCheckpoint::load(dir.path()).unwrap();
    assert_eq!(reloaded.step, 4);
    let resumed = trainer_run(reloaded, &data);
    assert_eq!(straight.params.hash_where(|_| true), resumed.params.hash_where(|_| true));
    assert_eq!(straight.trace, resumed.trace);
    let trace = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert!(trace.starts_with("step,loss,lr,cond_dropped\n"));
    assert_eq!(trace.lines().count(), 5);
}

#[test]
fn divergence_aborts_with_a_diagnostic() {
    let w = world(6);
    let data = set(&w, &[0], None);
    let cfg = TrainConfig { divergence_factor: 1e-9, divergence_patience: 3, ..tiny_train(10) };
    let err = train_single_stage(&data, &w.pre, &tiny_model().brain, &cfg, PrepConfig::default()).unwrap_err();
    assert!(matches!(&err, Error::Diverged(m) if m.contains("3 consecutive steps")), "{err}");
}

#[test]
fn multi_subject_shares_the_trunk() {
    let w = world(7);
    let data = set(&w, &[0, 1], None);
    let brain = tiny_model().brain;
    let cfg = tiny_train(4);
    let start = init_joint(&w.pre, &brain, &data, &cfg, PrepConfig::default(), Stage::MultiSubject).unwrap();
    let one =
        init_joint(&w.pre, &brain, &set(&w, &[0], None), &cfg, PrepConfig::default(), Stage::SingleStage).unwrap();
    let c1 = data.n_voxels[&1];
    assert_eq!(start.params.total_count() - one.params.total_count(), brain.subject_param_count(c1));
    assert_eq!(brain.subject_param_count(c1), (c1 * 12 + 12) + 6 * (12 * 12 + 12));

    // one step on subject-0 data only moves the trunk that subject 1 also uses
    let only0 = set(&w, &[0], None);
    let mut t = bolddecode::trainer::run::Trainer::resume(start.clone(), None, Some(&only0)).unwrap();
    while t.step().unwrap().cond_dropped {}
    let after = t.ckpt;
    let moved = changed(&start.params, &after.params);
    assert!(moved.iter().any(|n| n.starts_with("brain/out/")));
    assert!(!moved.iter().any(|n| param_subject(n) == Some(1)));
    let probe = w.f.prepared.epoch(1, w.f.split.subject(1).unwrap().test[0], WindowSpec::default(), 0.0).unwrap();
    let before_tokens = brain_tokens(&start, &[&probe]).unwrap();
    let after_tokens = brain_tokens(&after, &[&probe]).unwrap();
    assert_ne!(before_tokens.data(), after_tokens.data());

    assert!(matches!(
        train_multi_subject(&only0, &w.pre, &brain, &cfg, PrepConfig::default()),
        Err(Error::InvalidArgument(_))
    ));
    let multi = train_multi_subject(&data, &w.pre, &brain, &cfg, PrepConfig::default()).unwrap();
    assert_eq!(multi.meta.subjects.len(), 2);
}

#[test]
fn adaptation_trains_only_the_new_subject_layers_and_the_trunk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg3 = bolddecode::synthcortex::DatasetConfig { n_subjects: 3, ..common::small_config() };
    let f = common::fixture(dir.path(), &cfg3, 8);
    let bank = train_image_bank(&f.dataset).unwrap();
    let pre = pretrain_generator(
        &bank,
        &tiny_model(),
        &TrainConfig { steps: 2, warmup_steps: 1, batch_size: 2, ..TrainConfig::pretrain() },
    )
    .unwrap();
    let brain = tiny_model().brain;
    let build =
        |s: &[usize], k| TrainingSet::build(&f.dataset, &f.prepared, &f.split, s, WindowSpec::default(), 0.0, k);
    let cfg = tiny_train(4);
    let multi = train_multi_subject(&build(&[0, 1], None).unwrap(), &pre, &brain, &cfg, PrepConfig::default()).unwrap();

    let n_runs = f.dataset.manifest.runs_of(2).count();
    assert!(matches!(build(&[2], Some(0)), Err(Error::InvalidArgument(_))));
    assert!(matches!(build(&[2], Some(n_runs + 1)), Err(Error::InvalidArgument(_))));
    let few = build(&[2], Some(2)).unwrap();
    assert!(few.items.iter().all(|i| i.epoch.run < 2));
    assert!(matches!(adapt_new_subject(&multi, &few, 0, &cfg), Err(Error::InvalidArgument(_))));
    assert!(adapt_new_subject(&multi, &build(&[0], Some(2)).unwrap(), 2, &cfg).is_err());

    let adapted = adapt_new_subject(&multi, &few, 2, &cfg).unwrap();
    assert_eq!(adapted.meta.sessions_used, Some(2));
    assert!((adapted.meta.lr_scale - 0.1).abs() < 1e-12);
    let old = |n: &str| matches!(param_subject(n), Some(0) | Some(1));
    assert_eq!(multi.params.hash_where(old), adapted.params.hash_where(old));
    assert_eq!(multi.params.hash_where(is_unet_param), adapted.params.hash_where(is_unet_param));
    assert_ne!(
        multi.params.hash_where(|n| n.starts_with("brain/out/")),
        adapted.params.hash_where(|n| n.starts_with("brain/out/"))
    );
    let peak_lr = adapted.trace.iter().map(|r| r.lr).fold(0.0, f64::max);
    assert!(peak_lr <= cfg.max_lr * 0.1 + 1e-15);
}

#[test]
fn inference_is_deterministic_ordered_and_checked() {
    let w = world(9);
    let data = set(&w, &[0, 1], None);
    let brain = tiny_model().brain;
    let ck = train_multi_subject(&data, &w.pre, &brain, &tiny_train(3), PrepConfig::default()).unwrap();
    assert_eq!(SamplerSettings::default().steps, 20);
    assert_eq!(SamplerSettings::default().guidance, 3.0);
    let trials: Vec<_> = [(0usize, 0usize), (1, 1), (0, 2)]
        .iter()
        .map(|&(s, i)| {
            w.f.prepared.epoch(s, w.f.split.subject(s).unwrap().test[i], WindowSpec::default(), 0.0).unwrap()
        })
        .collect();
    let settings = ck.meta.model.sampler;
    let a = infer(&ck, &trials, &settings, 11).unwrap();
    assert_eq!(a.len(), 3);
    for (r, e) in a.iter().zip(&trials) {
        assert_eq!((r.provenance.subject, r.provenance.run, r.provenance.event), (e.subject, e.run, e.event));
        assert_eq!(r.image.len(), 16 * 16 * 3);
        assert!(r.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // alone or in a batch, same epoch and seed give the same image
    let single = infer(&ck, &trials[1..2], &settings, 11).unwrap();
    assert_eq!(single[0].image, a[1].image);
    assert_ne!(infer(&ck, &trials[1..2], &settings, 12).unwrap()[0].image, a[1].image);

    // reloading reproduces outputs bitwise
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = DecoderCheckpoint::load(dir.path()).unwrap();
    assert_eq!(infer(&back, &trials, &settings, 11).unwrap(), a);

    let short = w.f.prepared.epoch(0, trials[0].run_trial(), WindowSpec { t: 3.0, d: 4.0 }, 0.0).unwrap();
    assert!(matches!(infer(&ck, &[short], &settings, 11), Err(Error::Shape(_))));
}

trait RunTrial {
    fn run_trial(&self) -> bolddecode::synthcortex::TrialRef;
}

impl RunTrial for bolddecode::prep::Epoch {
    fn run_trial(&self) -> bolddecode::synthcortex::TrialRef {
        bolddecode::synthcortex::TrialRef { run: self.run, event: self.event }
    }
}

#[test]
fn shuffle_control_permutes_targets_within_subject() {
    let w = world(10);
    let mut data = set(&w, &[0, 1], None);
    let before: Vec<(usize, usize)> = data.items.iter().map(|i| (i.epoch.subject, i.target)).collect();
    data.shuffle_targets(3);
    let after: Vec<(usize, usize)> = data.items.iter().map(|i| (i.epoch.subject, i.target)).collect();
    assert_ne!(before, after);
    for s in [0, 1] {
        let mut a: Vec<usize> = before.iter().filter(|x| x.0 == s).map(|x| x.1).collect();
        let mut b: Vec<usize> = after.iter().filter(|x| x.0 == s).map(|x| x.1).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
    let _ = Rng::new(0);
}
