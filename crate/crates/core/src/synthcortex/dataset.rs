//! Dataset generation and the on-disk layout.
//!
//! ```text
//! manifest.json
//! runs/subXX_runYYY.bin        f32 [n_voxels, n_volumes]
//! stimuli/images/stimNNNNN.bin f32 [res, res, 3]
//! stimuli/masks/stimNNNNN.bin  u32 [res, res]
//! ```
//!
//! Every trial location is `(run, event)` within one subject. Anything that
//! can be expressed in this layout (for example converted real recordings)
//! loads through [`Dataset::open`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::encoding::{sample_subject, SubjectConfig, SubjectSpec};
use super::scene::{render_mask, render_scene, sample_scene, Palette, SceneConfig, StimulusScene};
use super::simulate::{simulate_run, FmriRun, NoiseConfig, RunTimeline, TR};
use crate::error::{Error, IoContext, Result};
use crate::substrate::{container, Rng};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_subjects: usize,
    /// Unique training stimuli per subject.
    pub n_train: usize,
    /// Unique test stimuli, shared by every subject.
    pub n_test: usize,
    pub repetitions: usize,
    pub trials_per_run: usize,
    /// Fixed run budget per subject; derived from the trial count when unset.
    pub runs_per_subject: Option<usize>,
    pub resolution: usize,
    pub tr: f64,
    /// All subjects see the same training stimuli.
    pub shared_train: bool,
    /// Every subject is a copy of subject 0: tuning, stimuli, schedule, noise.
    pub identical_subjects: bool,
    pub palette: Palette,
    pub scene: SceneConfig,
    pub subject: SubjectConfig,
    pub noise: NoiseConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            n_train: 500,
            n_test: 100,
            repetitions: 3,
            trials_per_run: 50,
            runs_per_subject: None,
            resolution: 32,
            tr: TR,
            shared_train: false,
            identical_subjects: false,
            palette: Palette::default(),
            scene: SceneConfig::default(),
            subject: SubjectConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

impl DatasetConfig {
    /// Trial counts of the full-size natural-scenes recordings (dry checks only).
    pub fn nsd_scale() -> Self {
        Self { n_train: 9000, n_test: 1000, trials_per_run: 63, runs_per_subject: Some(480), ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialPlan {
    pub train_trials: usize,
    pub test_trials: usize,
    pub runs_per_subject: usize,
}

/// Trial and run counts per subject implied by `cfg`, without generating anything.
pub fn plan_trials(cfg: &DatasetConfig) -> Result<TrialPlan> {
    if cfg.trials_per_run == 0 || cfg.repetitions == 0 || cfg.n_subjects == 0 {
        return Err(Error::Config { key: "dataset".into(), msg: "counts must be positive".into() });
    }
    let train_trials = cfg.n_train * cfg.repetitions;
    let test_trials = cfg.n_test * cfg.repetitions;
    let total = train_trials + test_trials;
    let needed = total.div_ceil(cfg.trials_per_run);
    let runs = match cfg.runs_per_subject {
        Some(r) if r * cfg.trials_per_run < total => {
            return Err(Error::Config {
                key: "dataset.runs_per_subject".into(),
                msg: format!("{r} runs of {} trials cannot hold {total} trials", cfg.trials_per_run),
            })
        }
        Some(r) => r,
        None => needed,
    };
    Ok(TrialPlan { train_trials, test_trials, runs_per_subject: runs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrialRef {
    pub run: usize,
    pub event: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StimulusSplit {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusRecord {
    pub id: usize,
    pub split: StimulusSplit,
    pub scene: StimulusScene,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub subject: usize,
    pub run: usize,
    pub path: String,
    pub n_voxels: usize,
    pub split_tag: String,
    pub timeline: RunTimeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub palette: Palette,
    pub subjects: Vec<SubjectSpec>,
    pub runs: Vec<RunRecord>,
    pub stimuli: Vec<StimulusRecord>,
    /// Per subject: stimulus id → trial locations in presentation order.
    pub repetitions: Vec<BTreeMap<usize, Vec<TrialRef>>>,
}

impl DatasetManifest {
    pub fn subject_ids(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.id).collect()
    }

    pub fn runs_of(&self, subject: usize) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.subject == subject)
    }

    pub fn run(&self, subject: usize, run: usize) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.subject == subject && r.run == run)
    }

    pub fn stimulus(&self, id: usize) -> Option<&StimulusRecord> {
        self.stimuli.get(id).filter(|s| s.id == id).or_else(|| self.stimuli.iter().find(|s| s.id == id))
    }

    pub fn n_voxels(&self, subject: usize) -> Option<usize> {
        self.subjects.iter().find(|s| s.id == subject).map(|s| s.n_voxels())
    }

    pub fn test_stimuli(&self) -> Vec<usize> {
        self.stimuli.iter().filter(|s| s.split == StimulusSplit::Test).map(|s| s.id).collect()
    }

    /// Checks the repetition and split invariants.
    pub fn validate(&self) -> Result<()> {
        let reps = self.config.repetitions;
        let tests = self.test_stimuli();
        for (s, map) in self.repetitions.iter().enumerate() {
            for (stim, trials) in map {
                if trials.len() != reps {
                    return Err(Error::InvalidArgument(format!(
                        "subject {s}: stimulus {stim} presented {} times, expected {reps}",
                        trials.len()
                    )));
                }
            }
            if let Some(missing) = tests.iter().find(|t| !map.contains_key(t)) {
                return Err(Error::InvalidArgument(format!("subject {s} never sees test stimulus {missing}")));
            }
        }
        Ok(())
    }
}

struct SubjectPlan {
    spec: SubjectSpec,
    train_ids: Vec<usize>,
    runs: Vec<Vec<usize>>,
}

fn image_path(id: usize) -> String {
    format!("stimuli/images/stim{id:05}.bin")
}

fn mask_path(id: usize) -> String {
    format!("stimuli/masks/stim{id:05}.bin")
}

pub fn run_path(subject: usize, run: usize) -> String {
    format!("runs/sub{subject:02}_run{run:03}.bin")
}

/// Generates the whole dataset under `dir`. A pure function of
/// `(cfg, seed)`: re-running yields byte-identical files.
pub fn build_dataset(cfg: &DatasetConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    cfg.palette.validate()?;
    let plan = plan_trials(cfg)?;
    let root = Rng::new(seed);
    let n_train_ids =
        if cfg.shared_train || cfg.identical_subjects { cfg.n_train } else { cfg.n_train * cfg.n_subjects };
    let n_stimuli = cfg.n_test + n_train_ids;
    let scenes: Vec<StimulusScene> = (0..n_stimuli)
        .map(|id| sample_scene(&mut root.split("scene").split_index(id as u64), &cfg.scene, &cfg.palette))
        .collect();

    let plans: Vec<SubjectPlan> = (0..cfg.n_subjects)
        .map(|s| {
            let src = if cfg.identical_subjects { 0 } else { s };
            let mut spec = sample_subject(
                s,
                &mut root.split("subject").split_index(src as u64),
                &cfg.subject,
                cfg.palette.n_foreground(),
            );
            spec.id = s;
            let train_ids: Vec<usize> = if cfg.shared_train || cfg.identical_subjects {
                (cfg.n_test..cfg.n_test + cfg.n_train).collect()
            } else {
                (cfg.n_test + s * cfg.n_train..cfg.n_test + (s + 1) * cfg.n_train).collect()
            };
            let mut trials: Vec<usize> = (0..cfg.n_test).chain(train_ids.iter().copied()).collect();
            trials = trials.iter().flat_map(|&id| std::iter::repeat_n(id, cfg.repetitions)).collect();
            root.split("schedule").split_index(src as u64).shuffle(&mut trials);
            let n_runs = plan.runs_per_subject;
            let base = trials.len() / n_runs;
            let extra = trials.len() % n_runs;
            let mut runs = Vec::with_capacity(n_runs);
            let mut it = trials.into_iter();
            for r in 0..n_runs {
                runs.push(it.by_ref().take(base + usize::from(r < extra)).collect());
            }
            SubjectPlan { spec, train_ids, runs }
        })
        .collect();

    std::fs::create_dir_all(dir).at(dir)?;
    let res = cfg.resolution;
    let stimuli: Vec<StimulusRecord> = scenes
        .iter()
        .enumerate()
        .map(|(id, scene)| -> Result<StimulusRecord> {
            let image = image_path(id);
            let mask = mask_path(id);
            container::write_f32(&dir.join(&image), &[res, res, 3], &render_scene(scene, &cfg.palette, res))?;
            let m: Vec<u32> = render_mask(scene, res).into_iter().map(u32::from).collect();
            container::write_u32(&dir.join(&mask), &[res, res], &m)?;
            let split = if id < cfg.n_test { StimulusSplit::Test } else { StimulusSplit::Train };
            Ok(StimulusRecord { id, split, scene: scene.clone(), image, mask })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> =
        plans.iter().enumerate().flat_map(|(s, p)| (0..p.runs.len()).map(move |r| (s, r))).collect();
    let simulate = |&(s, r): &(usize, usize)| -> Result<RunRecord> {
        let p = &plans[s];
        let src = if cfg.identical_subjects { 0 } else { s };
        let timeline = RunTimeline::regular(&p.runs[r], cfg.tr);
        timeline.validate()?;
        let mut rng = root.split("run").split_index(src as u64).split_index(r as u64);
        let run = simulate_run(&p.spec, r, &timeline, |id| scenes.get(id).cloned(), &mut rng, &cfg.noise)?;
        let path = run_path(s, r);
        let data: Vec<f32> = run.data.iter().map(|&v| v as f32).collect();
        container::write_f32(&dir.join(&path), &[run.n_voxels, run.n_volumes()], &data)?;
        Ok(RunRecord { subject: s, run: r, path, n_voxels: run.n_voxels, split_tag: run.split_tag, timeline })
    };
    #[cfg(feature = "parallel")]
    let runs: Vec<RunRecord> = {
        use rayon::prelude::*;
        jobs.par_iter().map(simulate).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<RunRecord> = jobs.iter().map(simulate).collect::<Result<_>>()?;

    let repetitions = plans
        .iter()
        .map(|p| {
            let mut map: BTreeMap<usize, Vec<TrialRef>> = BTreeMap::new();
            for (r, run) in p.runs.iter().enumerate() {
                for (event, &stim) in run.iter().enumerate() {
                    map.entry(stim).or_default().push(TrialRef { run: r, event });
                }
            }
            debug_assert_eq!(map.len(), cfg.n_test + p.train_ids.len());
            map
        })
        .collect();

    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        seed,
        config: cfg.clone(),
        palette: cfg.palette.clone(),
        subjects: plans.into_iter().map(|p| p.spec).collect(),
        runs,
        stimuli,
        repetitions,
    };
    manifest.validate()?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest).at(&path)?).at(&path)?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path).at(&path)?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes).at(&path)?;
        if manifest.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Format { path, msg: format!("schema version {}", manifest.schema_version) });
        }
        manifest.validate()?;
        Ok(Self { root: dir.to_path_buf(), manifest })
    }

    pub fn load_run(&self, subject: usize, run: usize) -> Result<FmriRun> {
        let rec = self
            .manifest
            .run(subject, run)
            .ok_or_else(|| Error::InvalidArgument(format!("no run {run} for subject {subject}")))?;
        let path = self.root.join(&rec.path);
        let (dims, data) = container::read_f32(&path)?;
        if dims != [rec.n_voxels, rec.timeline.n_volumes] {
            return Err(Error::Format { path, msg: format!("dims {dims:?} disagree with manifest") });
        }
        Ok(FmriRun {
            subject,
            run,
            split_tag: rec.split_tag.clone(),
            timeline: rec.timeline.clone(),
            n_voxels: rec.n_voxels,
            data: data.into_iter().map(f64::from).collect(),
        })
    }

    /// RGB image `[res, res, 3]`.
    pub fn image(&self, stimulus: usize) -> Result<Vec<f32>> {
        let rec = self.stimulus(stimulus)?;
        Ok(container::read_f32(&self.root.join(&rec.image))?.1)
    }

    pub fn mask(&self, stimulus: usize) -> Result<Vec<u8>> {
        let rec = self.stimulus(stimulus)?;
        Ok(container::read_u32(&self.root.join(&rec.mask))?.1.into_iter().map(|v| v as u8).collect())
    }

    fn stimulus(&self, id: usize) -> Result<&StimulusRecord> {
        self.manifest.stimulus(id).ok_or_else(|| Error::InvalidArgument(format!("unknown stimulus {id}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            n_subjects: 2,
            n_train: 20,
            n_test: 5,
            trials_per_run: 15,
            subject: SubjectConfig { voxels_min: 30, voxels_max: 40, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn desk_and_nsd_trial_counts() {
        let desk = plan_trials(&DatasetConfig::default()).unwrap();
        assert_eq!((desk.train_trials, desk.test_trials, desk.runs_per_subject), (1500, 300, 36));
        let nsd = plan_trials(&DatasetConfig::nsd_scale()).unwrap();
        assert_eq!((nsd.train_trials, nsd.test_trials, nsd.runs_per_subject), (27_000, 3_000, 480));
    }

    #[test]
    fn insufficient_capacity_is_an_error() {
        let cfg = DatasetConfig { runs_per_subject: Some(10), ..Default::default() };
        assert!(matches!(plan_trials(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn builds_valid_reproducible_datasets() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = build_dataset(&small(), 5, a.path()).unwrap();
        build_dataset(&small(), 5, b.path()).unwrap();
        for rec in &m.runs {
            assert_eq!(
                std::fs::read(a.path().join(&rec.path)).unwrap(),
                std::fs::read(b.path().join(&rec.path)).unwrap()
            );
        }
        assert_eq!(
            std::fs::read(a.path().join("manifest.json")).unwrap(),
            std::fs::read(b.path().join("manifest.json")).unwrap()
        );
        // 25 stimuli × 3 / 15 = 5 runs per subject
        assert_eq!(m.runs.len(), 10);
        let ds = Dataset::open(a.path()).unwrap();
        for s in 0..2 {
            let map = &ds.manifest.repetitions[s];
            assert_eq!(map.len(), 25);
            assert!(map.values().all(|t| t.len() == 3));
            assert!((0..5).all(|t| map.contains_key(&t)));
        }
        let run = ds.load_run(1, 2).unwrap();
        assert_eq!(run.n_voxels, ds.manifest.n_voxels(1).unwrap());
        let mask = ds.mask(3).unwrap();
        let img = ds.image(3).unwrap();
        for (p, &c) in mask.iter().enumerate() {
            assert_eq!(&img[3 * p..3 * p + 3], &ds.manifest.palette.colors[c as usize]);
        }
        assert_eq!(mask.len(), 32 * 32);
    }

    #[test]
    fn train_stimuli_are_private_test_stimuli_shared() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small(), 1, dir.path()).unwrap();
        let train = |s: usize| -> Vec<usize> { m.repetitions[s].keys().copied().filter(|&k| k >= 5).collect() };
        assert!(train(0).iter().all(|k| !train(1).contains(k)));
    }
}
