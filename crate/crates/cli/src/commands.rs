//! Subcommand arguments and their execution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bolddecode::brainmod::BrainModuleConfig;
use bolddecode::evalkit::{
    duration_sweep, emit_report, emit_sweep, evaluate_split, time_sweep, ConstantDecoder, Decoder, MetricsReport,
    PerfectDecoder, Summary, METRICS,
};
use bolddecode::prep::{
    build_split_standard, build_split_time_resolved, pick_test_repetitions, EpochCache, PreparedRuns, SplitKind,
    SplitSpec, WindowSpec,
};
use bolddecode::substrate::container;
use bolddecode::synthcortex::{build_dataset, Dataset, TR};
use bolddecode::trainer::{
    infer, init_adapt, init_generator, init_joint, train_image_bank, trainer_for, DecoderCheckpoint, ImageBank, Regime,
    Stage, TrainingSet,
};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{CliConfig, RESOLVED_FILE, RESOLVED_SCHEMA_VERSION};
use crate::error::CliError;
use crate::models::{is_checkpoint, ModelSet, SetDecoders};
use crate::{Command, Resolved};

/// Training checkpoints are flushed this often, so runs can resume.
pub const SAVE_EVERY: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Default, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    /// Rebuild even when a dataset already exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Args, Serialize, Deserialize)]
pub struct PreprocessArgs {}

#[derive(Debug, Clone, PartialEq, Default, Args, Serialize, Deserialize)]
pub struct PretrainArgs {}

/// Parses seconds, or TR multiples written as `3tr` / `-3TR`.
pub fn parse_seconds(raw: &str) -> Result<f64, String> {
    let s = raw.trim();
    let lower = s.to_ascii_lowercase();
    if let Some(k) = lower.strip_suffix("tr") {
        return k.trim().parse::<f64>().map(|k| k * TR).map_err(|e| format!("`{raw}`: {e}"));
    }
    s.parse::<f64>().map_err(|e| format!("`{raw}`: {e}"))
}

#[derive(Debug, Clone, PartialEq, Default, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Which generator parameters are finetuned.
    #[arg(long, value_parser = clap::value_parser!(Regime))]
    pub regime: Option<Regime>,
    /// One model with a shared trunk for all selected subjects.
    #[arg(long, conflicts_with = "adapt_subject")]
    pub multi_subject: bool,
    /// Adapt a multi-subject model (see --base) to this new subject.
    #[arg(long, requires = "base")]
    pub adapt_subject: Option<usize>,
    /// Multi-subject checkpoint to adapt from.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Runs of the new subject used for adaptation (default: a quarter).
    #[arg(long)]
    pub sessions: Option<usize>,
    /// Only the first N runs of each subject (data-limited baselines).
    #[arg(long)]
    pub max_runs: Option<usize>,
    /// Window start after onset (seconds, or e.g. `2tr`).
    #[arg(long, value_parser = parse_seconds, allow_hyphen_values = true)]
    pub window_t: Option<f64>,
    /// Window duration (seconds, or e.g. `6tr`); also sets the brain
    /// module's window length.
    #[arg(long, value_parser = parse_seconds)]
    pub window_d: Option<f64>,
    /// Window shift (seconds, or e.g. `-3tr`).
    #[arg(long, value_parser = parse_seconds, allow_hyphen_values = true)]
    pub delta: Option<f64>,
    /// Subjects to train, comma separated (default: config, then all).
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<usize>,
    /// Permute image targets across trials (shuffle control).
    #[arg(long)]
    pub shuffle: bool,
    /// Output name under the train directory.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Args, Serialize, Deserialize)]
pub struct InferArgs {
    /// Model set directory (or a single checkpoint).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<usize>,
    /// Window shift applied to the test epochs (seconds or `kTR`).
    #[arg(long, value_parser = parse_seconds, allow_hyphen_values = true)]
    pub delta: Option<f64>,
    /// At most this many trials per subject.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Flat background color.
    Constant,
    /// The presented stimulus itself.
    Perfect,
}

#[derive(Debug, Clone, PartialEq, Default, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Model set directory (or a single checkpoint).
    #[arg(long, required_unless_present = "baseline")]
    pub model: Option<PathBuf>,
    /// Score a reference decoder instead of a model.
    #[arg(long, conflicts_with = "model")]
    pub baseline: Option<Baseline>,
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<usize>,
    #[arg(long, value_parser = parse_seconds, allow_hyphen_values = true)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Args, Serialize, Deserialize)]
pub struct SweepTimeArgs {
    /// General model set; trained under the train directory when absent.
    #[arg(long)]
    pub general: Option<PathBuf>,
    /// Specialized model sets as `k=DIR` (shift k·TR); the configured
    /// shifts without one are trained.
    #[arg(long = "specialized", value_parser = parse_specialized)]
    pub specialized: Vec<(i32, PathBuf)>,
    /// Fail instead of training missing models.
    #[arg(long)]
    pub no_train: bool,
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<usize>,
}

fn parse_specialized(raw: &str) -> Result<(i32, PathBuf), String> {
    let (k, dir) = raw.split_once('=').ok_or_else(|| format!("`{raw}`: expected k=DIR"))?;
    Ok((k.trim().parse().map_err(|e| format!("`{raw}`: {e}"))?, PathBuf::from(dir)))
}

#[derive(Debug, Clone, PartialEq, Default, Args, Serialize, Deserialize)]
pub struct SweepDurationArgs {
    #[arg(long)]
    pub no_train: bool,
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub no_train: bool,
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SelftestArgs {
    /// Monte-Carlo draws for the sampler checks.
    #[arg(long, default_value_t = 1_000_000)]
    pub draws: usize,
    /// Run only these suites (substrate, prep, diffusion, brain).
    #[arg(long, value_delimiter = ',')]
    pub suites: Vec<String>,
}

impl Default for SelftestArgs {
    fn default() -> Self {
        Self { draws: 1_000_000, suites: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A resolved_config.json written by an earlier run.
    pub file: PathBuf,
}

/// Resolved config plus paths, shared by every command.
pub struct Ctx {
    pub root: PathBuf,
    pub cfg: CliConfig,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

impl Ctx {
    pub fn dir(&self, p: &Path) -> PathBuf {
        self.cfg.path(&self.root, p)
    }

    pub fn write_resolved(&self, dir: &Path, invocation: &Command) -> Result<(), CliError> {
        create_dir(dir)?;
        let r = Resolved {
            schema_version: RESOLVED_SCHEMA_VERSION,
            invocation: invocation.clone(),
            config: self.cfg.clone(),
        };
        write_text(&dir.join(RESOLVED_FILE), &to_json(&r))
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let dir = self.dir(&self.cfg.paths.data);
        if !dir.join("manifest.json").is_file() {
            return Err(CliError::Usage(format!("no dataset at {} (run gen-data first)", dir.display())));
        }
        Ok(Dataset::open(&dir)?)
    }

    /// Explicit list, else the config's, else every subject.
    pub fn subjects(&self, ds: &Dataset, explicit: &[usize]) -> Result<Vec<usize>, CliError> {
        let all = ds.manifest.subject_ids();
        let chosen = if !explicit.is_empty() {
            explicit.to_vec()
        } else if !self.cfg.eval.subjects.is_empty() {
            self.cfg.eval.subjects.clone()
        } else {
            all.clone()
        };
        if let Some(s) = chosen.iter().find(|s| !all.contains(s)) {
            return Err(CliError::Usage(format!("subject {s} not in the dataset (have {all:?})")));
        }
        Ok(chosen)
    }

    pub fn split(&self, ds: &Dataset) -> Result<SplitSpec, CliError> {
        Ok(match self.cfg.split.kind {
            SplitKind::Standard => build_split_standard(&ds.manifest)?,
            SplitKind::TimeResolved => build_split_time_resolved(
                &ds.manifest,
                self.cfg.split.test_run_fraction,
                self.cfg.seed,
                self.cfg.split.exclude_leaked,
            )?,
        })
    }

    pub fn pretrained(&self) -> Result<DecoderCheckpoint, CliError> {
        let dir = self.dir(&self.cfg.paths.pretrain);
        if !is_checkpoint(&dir) {
            return Err(CliError::Usage(format!(
                "no pretrained generator at {} (run pretrain-gen first)",
                dir.display()
            )));
        }
        let ck = DecoderCheckpoint::load(&dir)?;
        if ck.step < ck.meta.train.steps {
            return Err(CliError::Usage(format!(
                "pretraining at {} stopped at step {} of {} (rerun pretrain-gen)",
                dir.display(),
                ck.step,
                ck.meta.train.steps
            )));
        }
        if ck.meta.model.unet != self.cfg.model.unet {
            return Err(CliError::Config {
                key: "model.unet".into(),
                msg: format!("differs from the generator pretrained at {}", dir.display()),
            });
        }
        Ok(ck.weights_only())
    }
}

/// Trains `start` to completion, flushing to `out` every [`SAVE_EVERY`]
/// steps. A partial checkpoint in `out` with identical metadata resumes.
pub fn run_training(
    start: DecoderCheckpoint,
    images: Option<&ImageBank>,
    set: Option<&TrainingSet>,
    out: &Path,
) -> Result<DecoderCheckpoint, CliError> {
    let start = if is_checkpoint(out) {
        let prev = DecoderCheckpoint::load(out)?;
        if prev.meta == start.meta && prev.step <= start.meta.train.steps {
            log::info!("resuming {} at step {}", out.display(), prev.step);
            prev
        } else {
            start
        }
    } else {
        start
    };
    let total = start.meta.train.steps;
    let t0 = Instant::now();
    let mut trainer = trainer_for(start, images, set)?;
    while !trainer.done() {
        let next = (trainer.ckpt.step + SAVE_EVERY).min(total);
        trainer.run_until(next)?;
        trainer.save(out)?;
        log::info!("{}: step {next}/{total} ({:.0} s)", out.display(), t0.elapsed().as_secs_f64());
    }
    trainer.save(out)?;
    Ok(trainer.ckpt)
}

fn delta_tag(delta: f64) -> String {
    let k = delta / TR;
    if (k - k.round()).abs() < 1e-9 {
        format!("{}tr", k.round() as i64)
    } else {
        format!("{delta}s")
    }
}

/// Applies the train flags to the config so the resolved file records them.
pub fn apply_train_flags(cfg: &mut CliConfig, a: &TrainArgs) -> Result<(), CliError> {
    if let Some(r) = a.regime {
        cfg.train.finetune_regime = r;
    }
    if let Some(t) = a.window_t {
        cfg.train.window.t = t;
    }
    if let Some(d) = a.window_d {
        cfg.train.window.d = d;
        cfg.model.brain.window_len = WindowSpec { t: 0.0, d }.n_samples(TR);
    }
    if let Some(delta) = a.delta {
        cfg.train.delta = delta;
    }
    if a.shuffle {
        cfg.train.shuffle_conditioning = true;
    }
    cfg.validate()
}

fn default_train_name(cfg: &CliConfig, a: &TrainArgs) -> String {
    let w = cfg.train.window;
    let mut name =
        format!("{}_t{}_d{}_delta{}", cfg.train.finetune_regime.name(), w.t, w.d, delta_tag(cfg.train.delta));
    if a.multi_subject {
        name.push_str("_multi");
    }
    if let Some(s) = a.adapt_subject {
        name = format!("adapt_sub{s}");
    }
    if cfg.train.shuffle_conditioning {
        name.push_str("_shuffled");
    }
    if let Some(k) = a.max_runs {
        name.push_str(&format!("_runs{k}"));
    }
    name
}

/// Trains the model set described by `a` under `out`. Returns its directory.
pub fn train_models(ctx: &Ctx, a: &TrainArgs, out: &Path) -> Result<PathBuf, CliError> {
    let cfg = &ctx.cfg;
    let ds = ctx.dataset()?;
    let split = ctx.split(&ds)?;
    let window = cfg.train.window;
    let delta = cfg.train.delta;
    create_dir(out)?;
    if let Some(s) = a.adapt_subject {
        let base_dir = a.base.as_ref().expect("clap requires --base");
        let base_set = ModelSet::load(base_dir)?;
        let base = base_set
            .checkpoints
            .iter()
            .find(|(_, c)| c.meta.stage == Stage::MultiSubject)
            .map(|(_, c)| c.weights_only())
            .ok_or_else(|| CliError::Usage(format!("{} holds no multi-subject checkpoint", base_dir.display())))?;
        let runs = ds.manifest.runs_of(s).count();
        let sessions = a.sessions.unwrap_or_else(|| (runs / 4).max(1));
        let prepared = PreparedRuns::load(&ds, base.meta.prep, &[s])?;
        let mut set = TrainingSet::build(&ds, &prepared, &split, &[s], window, delta, Some(sessions))?;
        if cfg.train.shuffle_conditioning {
            set.shuffle_targets(cfg.train.seed);
        }
        let mut train_cfg = cfg.train.clone();
        train_cfg.window = base.meta.train.window;
        let start = init_adapt(&base, &set, sessions, &train_cfg)?;
        run_training(start, None, Some(&set), &out.join(format!("adapt_sub{s}")))?;
        return Ok(out.to_path_buf());
    }
    let pre = ctx.pretrained()?;
    let subjects = ctx.subjects(&ds, &a.subjects)?;
    let prepared = PreparedRuns::load(&ds, cfg.prep, &subjects)?;
    let groups: Vec<(String, Vec<usize>, Stage)> = if a.multi_subject {
        vec![("multi".into(), subjects.clone(), Stage::MultiSubject)]
    } else {
        subjects.iter().map(|&s| (format!("sub{s}"), vec![s], Stage::SingleStage)).collect()
    };
    for (dir_name, group, stage) in groups {
        let mut set = TrainingSet::build(&ds, &prepared, &split, &group, window, delta, a.max_runs)?;
        if cfg.train.shuffle_conditioning {
            set.shuffle_targets(cfg.train.seed);
        }
        log::info!("{dir_name}: {} training trials ({} outside the run)", set.items.len(), set.skipped);
        let start = init_joint(&pre, &cfg.model.brain, &set, &cfg.train, cfg.prep, stage)?;
        run_training(start, None, Some(&set), &out.join(dir_name))?;
    }
    Ok(out.to_path_buf())
}

fn report_line(name: &str, rep: &MetricsReport) -> String {
    let cols: Vec<String> = METRICS
        .iter()
        .map(|m| {
            let s: Summary = rep.summary.get(*m).copied().unwrap_or(Summary { mean: f64::NAN, sem: None, n: 0 });
            match s.sem {
                Some(sem) => format!("{m} {:.3}±{:.3}", s.mean, sem),
                None => format!("{m} {:.3}", s.mean),
            }
        })
        .collect();
    format!("{name}: {}", cols.join("  "))
}

/// Runs a parsed invocation against a resolved config.
pub fn execute(root: &Path, cfg: CliConfig, invocation: Command) -> Result<(), CliError> {
    let mut ctx = Ctx { root: root.to_path_buf(), cfg };
    match &invocation {
        Command::GenData(a) => {
            let dir = ctx.dir(&ctx.cfg.paths.data);
            if dir.join("manifest.json").is_file() && !a.force {
                let ds = Dataset::open(&dir)?;
                if ds.manifest.config == ctx.cfg.dataset && ds.manifest.seed == ctx.cfg.seed {
                    log::info!("dataset at {} is up to date", dir.display());
                    return Ok(());
                }
                return Err(CliError::Usage(format!(
                    "{} holds a dataset with another config or seed (use --force)",
                    dir.display()
                )));
            }
            let t0 = Instant::now();
            let m = build_dataset(&ctx.cfg.dataset, ctx.cfg.seed, &dir)?;
            ctx.write_resolved(&dir, &invocation)?;
            println!(
                "dataset: {} subjects, {} stimuli, {} runs in {:.1} s -> {}",
                m.subjects.len(),
                m.stimuli.len(),
                m.runs.len(),
                t0.elapsed().as_secs_f64(),
                dir.display()
            );
        }
        Command::Preprocess(_) => {
            let ds = ctx.dataset()?;
            let dir = ctx.dir(&ctx.cfg.paths.prep);
            create_dir(&dir)?;
            let subjects = ds.manifest.subject_ids();
            let prepared = PreparedRuns::load(&ds, ctx.cfg.prep, &subjects)?;
            let standard = build_split_standard(&ds.manifest)?;
            let tres = build_split_time_resolved(
                &ds.manifest,
                ctx.cfg.split.test_run_fraction,
                ctx.cfg.seed,
                ctx.cfg.split.exclude_leaked,
            )?;
            write_text(&dir.join("split_standard.json"), &to_json(&standard))?;
            write_text(&dir.join("split_time_resolved.json"), &to_json(&tres))?;
            let split = ctx.split(&ds)?;
            let reps = pick_test_repetitions(&ds.manifest, &split, ctx.cfg.eval.repetition_seed);
            write_text(&dir.join("repetitions.json"), &to_json(&reps))?;
            let w = ctx.cfg.train.window;
            for &s in &subjects {
                let ss = split.subject(s).expect("split covers every subject");
                let mut epochs = Vec::new();
                for t in ss.train.iter().chain(&ss.test) {
                    if let Ok(e) = prepared.epoch(s, *t, w, ctx.cfg.train.delta) {
                        epochs.push(e);
                    }
                }
                EpochCache::write(&dir.join(format!("epochs_sub{s}")), &ctx.cfg.prep, &epochs)?;
                log::info!("subject {s}: {} epochs cached", epochs.len());
            }
            ctx.write_resolved(&dir, &invocation)?;
            println!("preprocessed {} subjects -> {}", subjects.len(), dir.display());
        }
        Command::PretrainGen(_) => {
            let ds = ctx.dataset()?;
            let dir = ctx.dir(&ctx.cfg.paths.pretrain);
            let bank = train_image_bank(&ds)?;
            ctx.write_resolved(&dir, &invocation)?;
            let start = init_generator(&ctx.cfg.model, &ctx.cfg.pretrain)?;
            let ck = if ctx.cfg.pretrain.steps == 0 {
                start.save(&dir)?;
                start
            } else {
                run_training(start, Some(&bank), None, &dir)?
            };
            println!("pretrained generator: {} steps -> {}", ck.step, dir.display());
        }
        Command::Train(a) => {
            apply_train_flags(&mut ctx.cfg, a)?;
            let name = a.name.clone().unwrap_or_else(|| default_train_name(&ctx.cfg, a));
            let out = ctx.dir(&ctx.cfg.paths.train).join(name);
            ctx.write_resolved(&out, &invocation)?;
            train_models(&ctx, a, &out)?;
            println!("trained -> {}", out.display());
        }
        Command::Infer(a) => {
            let ds = ctx.dataset()?;
            let set = ModelSet::load(&a.model)?;
            let subjects = if a.subjects.is_empty() { set.subjects() } else { a.subjects.clone() };
            let split = ctx.split(&ds)?;
            let prepared = PreparedRuns::load(&ds, set.checkpoints[0].1.meta.prep, &subjects)?;
            let reps = pick_test_repetitions(&ds.manifest, &split, ctx.cfg.eval.repetition_seed);
            let routes = set.routes();
            let name = a.name.clone().unwrap_or_else(|| dir_label(&a.model));
            let out = ctx.dir(&ctx.cfg.paths.infer).join(name);
            ctx.write_resolved(&out, &invocation)?;
            let mut provenance = Vec::new();
            let mut images = Vec::new();
            for &s in &subjects {
                let ck = routes
                    .get(&s)
                    .ok_or_else(|| CliError::Usage(format!("model set has no decoder for subject {s}")))?;
                let (mut epochs, _) = bolddecode::evalkit::test_epochs(
                    &prepared,
                    &reps,
                    s,
                    ck.meta.window(),
                    a.delta.unwrap_or(ck.meta.train.delta),
                )?;
                if let Some(k) = a.limit {
                    epochs.truncate(k);
                }
                for r in infer(ck, &epochs, &ck.meta.model.sampler, ctx.cfg.eval.sample_seed)? {
                    provenance.push(r.provenance);
                    images.extend(r.image);
                }
            }
            let res = ds.manifest.config.resolution;
            let n = provenance.len();
            write_text(&out.join("reconstructions.json"), &to_json(&provenance))?;
            container::write_f32(&out.join("reconstructions.bin"), &[n, res, res, 3], &images)?;
            let targets: Vec<f32> =
                provenance.iter().map(|p| ds.image(p.stimulus)).collect::<bolddecode::Result<Vec<_>>>()?.concat();
            write_text_bytes(&out.join("preview.ppm"), &preview_ppm(&targets, &images, n, res))?;
            println!("{n} reconstructions -> {}", out.display());
        }
        Command::Eval(a) => {
            let ds = ctx.dataset()?;
            let split = ctx.split(&ds)?;
            let (label, window, delta, prep) = match &a.model {
                Some(m) => {
                    let set = ModelSet::load(m)?;
                    let meta = &set.checkpoints[0].1.meta;
                    (dir_label(m), meta.window(), a.delta.unwrap_or(meta.train.delta), meta.prep)
                }
                None => (
                    format!("baseline_{:?}", a.baseline.expect("clap requires one")).to_lowercase(),
                    ctx.cfg.train.window,
                    a.delta.unwrap_or(ctx.cfg.train.delta),
                    ctx.cfg.prep,
                ),
            };
            let name = a.name.clone().unwrap_or(label);
            let out = ctx.dir(&ctx.cfg.paths.eval).join(&name);
            ctx.write_resolved(&out, &invocation)?;
            let set = a.model.as_ref().map(|m| ModelSet::load(m)).transpose()?;
            let subjects = match &set {
                Some(s) if a.subjects.is_empty() && ctx.cfg.eval.subjects.is_empty() => s.subjects(),
                _ => ctx.subjects(&ds, &a.subjects)?,
            };
            let prepared = PreparedRuns::load(&ds, prep, &subjects)?;
            let seed = ctx.cfg.eval.repetition_seed;
            let report = match (&set, a.baseline) {
                (Some(set), _) => {
                    let decs = SetDecoders::new(set, ctx.cfg.eval.sample_seed);
                    evaluate_split(&decs.routed(), &ds, &prepared, &split, &subjects, seed, window, delta)?
                }
                (None, Some(Baseline::Constant)) => evaluate_split(
                    &ConstantDecoder::background(&ds),
                    &ds,
                    &prepared,
                    &split,
                    &subjects,
                    seed,
                    window,
                    delta,
                )?,
                (None, _) => {
                    evaluate_split(&PerfectDecoder(&ds), &ds, &prepared, &split, &subjects, seed, window, delta)?
                }
            };
            emit_report(&report, &out)?;
            println!("{}", report_line(&name, &report));
        }
        Command::SweepTime(a) => {
            // shifted-window analysis runs on whole held-out runs
            ctx.cfg.split.kind = SplitKind::TimeResolved;
            let out = ctx.dir(&ctx.cfg.paths.sweeps).join("time");
            ctx.write_resolved(&out, &invocation)?;
            let ds = ctx.dataset()?;
            let subjects = ctx.subjects(&ds, &a.subjects)?;
            let train_dir = ctx.dir(&ctx.cfg.paths.train);
            let ensure = |dir: PathBuf, delta_tr: i32| -> Result<PathBuf, CliError> {
                if dir.exists() && ModelSet::load(&dir).is_ok() {
                    return Ok(dir);
                }
                if a.no_train {
                    return Err(CliError::Usage(format!("missing model set {}", dir.display())));
                }
                let args =
                    TrainArgs { delta: Some(delta_tr as f64 * TR), subjects: subjects.clone(), ..Default::default() };
                let mut sub = Ctx { root: ctx.root.clone(), cfg: ctx.cfg.clone() };
                apply_train_flags(&mut sub.cfg, &args)?;
                sub.write_resolved(&dir, &Command::Train(args.clone()))?;
                train_models(&sub, &args, &dir)
            };
            let general = ensure(a.general.clone().unwrap_or_else(|| train_dir.join("time_general")), 0)?;
            let mut spec_dirs: BTreeMap<i32, PathBuf> = a.specialized.iter().cloned().collect();
            for &k in &ctx.cfg.eval.specialized_deltas_tr {
                if let std::collections::btree_map::Entry::Vacant(e) = spec_dirs.entry(k) {
                    e.insert(ensure(train_dir.join(format!("time_delta{k}tr")), k)?);
                }
            }
            let general_set = ModelSet::load(&general)?;
            let spec_sets: Vec<(i32, ModelSet)> =
                spec_dirs.iter().map(|(&k, d)| ModelSet::load(d).map(|s| (k, s))).collect::<Result<_, _>>()?;
            let seed = ctx.cfg.eval.sample_seed;
            let general_decs = SetDecoders::new(&general_set, seed);
            let spec_decs: Vec<(i32, SetDecoders)> =
                spec_sets.iter().map(|(k, s)| (*k, SetDecoders::new(s, seed))).collect();
            let general_routed = general_decs.routed();
            let spec_routed: Vec<(i32, bolddecode::evalkit::RoutedDecoder)> =
                spec_decs.iter().map(|(k, d)| (*k, d.routed())).collect();
            let specialized: BTreeMap<i32, &dyn Decoder> =
                spec_routed.iter().map(|(k, d)| (*k, d as &dyn Decoder)).collect();
            let meta = &general_set.checkpoints[0].1.meta;
            let split = ctx.split(&ds)?;
            let prepared = PreparedRuns::load(&ds, meta.prep, &subjects)?;
            let sweep = time_sweep(
                &general_routed,
                &specialized,
                &ds,
                &prepared,
                &split,
                &subjects,
                ctx.cfg.eval.repetition_seed,
                meta.window(),
                &ctx.cfg.eval.deltas_tr,
            )?;
            let files = emit_sweep(&sweep, &out)?;
            println!("time sweep: {} shifts -> {}", sweep.points.len(), files[0].display());
        }
        Command::SweepDuration(a) => {
            let out = ctx.dir(&ctx.cfg.paths.sweeps).join("duration");
            ctx.write_resolved(&out, &invocation)?;
            let ds = ctx.dataset()?;
            let subjects = ctx.subjects(&ds, &a.subjects)?;
            let train_dir = ctx.dir(&ctx.cfg.paths.train);
            let mut sets = Vec::new();
            for &k in &ctx.cfg.eval.durations_tr {
                let dir = train_dir.join(format!("duration_d{k}tr"));
                if ModelSet::load(&dir).is_err() {
                    if a.no_train {
                        return Err(CliError::Usage(format!("missing model set {}", dir.display())));
                    }
                    let args =
                        TrainArgs { window_d: Some(k as f64 * TR), subjects: subjects.clone(), ..Default::default() };
                    let mut sub = Ctx { root: ctx.root.clone(), cfg: ctx.cfg.clone() };
                    apply_train_flags(&mut sub.cfg, &args)?;
                    sub.write_resolved(&dir, &Command::Train(args.clone()))?;
                    train_models(&sub, &args, &dir)?;
                }
                sets.push(ModelSet::load(&dir)?);
            }
            let seed = ctx.cfg.eval.sample_seed;
            let decs: Vec<SetDecoders> = sets.iter().map(|s| SetDecoders::new(s, seed)).collect();
            let routed: Vec<_> = decs.iter().map(|d| d.routed()).collect();
            let models: Vec<(WindowSpec, &dyn Decoder)> =
                sets.iter().zip(&routed).map(|(s, r)| (s.checkpoints[0].1.meta.window(), r as &dyn Decoder)).collect();
            let split = ctx.split(&ds)?;
            let prepared = PreparedRuns::load(&ds, ctx.cfg.prep, &subjects)?;
            let sweep = duration_sweep(&models, &ds, &prepared, &split, &subjects, ctx.cfg.eval.repetition_seed)?;
            let files = emit_sweep(&sweep, &out)?;
            println!("duration sweep: {} durations -> {}", sweep.points.len(), files[0].display());
        }
        Command::AblateBrainmod(a) => {
            let out = ctx.dir(&ctx.cfg.paths.eval).join("ablate_brainmod");
            ctx.write_resolved(&out, &invocation)?;
            let ds = ctx.dataset()?;
            let subjects = ctx.subjects(&ds, &a.subjects)?;
            let split = ctx.split(&ds)?;
            let prepared = PreparedRuns::load(&ds, ctx.cfg.prep, &subjects)?;
            let train_dir = ctx.dir(&ctx.cfg.paths.train);
            let variants: Vec<(&str, BrainModuleConfig)> = ctx.cfg.model.brain.variants();
            let mut rows = String::from("variant,metric,mean,sem\n");
            let mut table = BTreeMap::new();
            for (vname, brain) in variants {
                let dir = train_dir.join(format!("brainmod_{vname}"));
                if ModelSet::load(&dir).is_err() {
                    if a.no_train {
                        return Err(CliError::Usage(format!("missing model set {}", dir.display())));
                    }
                    let mut sub = Ctx { root: ctx.root.clone(), cfg: ctx.cfg.clone() };
                    sub.cfg.model.brain = brain;
                    let args = TrainArgs { subjects: subjects.clone(), ..Default::default() };
                    sub.write_resolved(&dir, &Command::Train(args.clone()))?;
                    train_models(&sub, &args, &dir)?;
                }
                let set = ModelSet::load(&dir)?;
                let decs = SetDecoders::new(&set, ctx.cfg.eval.sample_seed);
                let meta = &set.checkpoints[0].1.meta;
                let report = evaluate_split(
                    &decs.routed(),
                    &ds,
                    &prepared,
                    &split,
                    &subjects,
                    ctx.cfg.eval.repetition_seed,
                    meta.window(),
                    meta.train.delta,
                )?;
                for m in METRICS {
                    let s = report.summary[m];
                    rows.push_str(&format!(
                        "{vname},{m},{},{}\n",
                        s.mean,
                        s.sem.map(|v| v.to_string()).unwrap_or_default()
                    ));
                }
                println!("{}", report_line(vname, &report));
                table.insert(vname.to_string(), report);
            }
            write_text(&out.join("ablation.csv"), &rows)?;
            write_text(&out.join("ablation.json"), &to_json(&table))?;
        }
        Command::Selftest(a) => {
            let out = ctx.root.join("selftest");
            ctx.write_resolved(&out, &invocation)?;
            let suites: Vec<String> = if a.suites.is_empty() {
                bolddecode::selftest::SUITES.iter().map(|s| s.to_string()).collect()
            } else {
                a.suites.clone()
            };
            let mut checks = Vec::new();
            for s in &suites {
                let t0 = Instant::now();
                let got = bolddecode::selftest::run_suite(s, a.draws)?;
                for c in &got {
                    println!(
                        "[{}] {}: {} (value {:.3e}, bound {:.1e})",
                        if c.passed { "PASS" } else { "FAIL" },
                        c.suite,
                        c.name,
                        c.value,
                        c.bound
                    );
                }
                log::info!("suite {s}: {:.1} s", t0.elapsed().as_secs_f64());
                checks.extend(got);
            }
            write_text(&out.join("selftest.json"), &to_json(&checks))?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(CliError::SelfTest { failed });
            }
            println!("all {} checks passed", checks.len());
        }
        Command::Replay(_) => return Err(CliError::Usage("replay cannot be nested".into())),
    }
    Ok(())
}

fn dir_label(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn write_text_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Binary PPM: targets on the top row, reconstructions below, at most 16
/// columns.
pub fn preview_ppm(targets: &[f32], recons: &[f32], n: usize, res: usize) -> Vec<u8> {
    let cols = n.min(16);
    let (w, h) = (cols * res, 2 * res);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let item = res * res * 3;
    for row in 0..h {
        let (src, y) = if row < res { (targets, row) } else { (recons, row - res) };
        for x in 0..w {
            let (k, px) = (x / res, x % res);
            for c in 0..3 {
                let v = src.get(k * item + (y * res + px) * 3 + c).copied().unwrap_or(0.0);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}
