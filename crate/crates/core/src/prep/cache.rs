//! Preprocessed runs held in memory, and an on-disk epoch cache.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::detrend::{preprocess_run, PrepConfig};
use super::split::trial_index;
use super::window::{extract_window, Epoch, WindowSpec};
use crate::error::{Error, IoContext, Result};
use crate::substrate::container;
use crate::synthcortex::dataset::{Dataset, TrialRef};
use crate::synthcortex::FmriRun;

/// Every run of the selected subjects, detrended and z-scored.
#[derive(Debug, Clone)]
pub struct PreparedRuns {
    pub prep: PrepConfig,
    runs: BTreeMap<(usize, usize), FmriRun>,
    /// (subject, run) → zeroed voxels.
    pub degenerate: BTreeMap<(usize, usize), Vec<usize>>,
    trials: BTreeMap<usize, BTreeMap<TrialRef, (usize, usize)>>,
}

impl PreparedRuns {
    pub fn load(dataset: &Dataset, prep: PrepConfig, subjects: &[usize]) -> Result<Self> {
        let jobs: Vec<(usize, usize)> =
            subjects.iter().flat_map(|&s| dataset.manifest.runs_of(s).map(move |r| (s, r.run))).collect();
        let work = |&(s, r): &(usize, usize)| -> Result<((usize, usize), FmriRun, Vec<usize>)> {
            let (run, degenerate) = preprocess_run(&dataset.load_run(s, r)?, &prep)?;
            Ok(((s, r), run, degenerate))
        };
        #[cfg(feature = "parallel")]
        let done: Vec<_> = {
            use rayon::prelude::*;
            jobs.par_iter().map(work).collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let done: Vec<_> = jobs.iter().map(work).collect::<Result<_>>()?;
        Ok(Self::from_runs(dataset, prep, done))
    }

    fn from_runs(dataset: &Dataset, prep: PrepConfig, done: Vec<((usize, usize), FmriRun, Vec<usize>)>) -> Self {
        let mut runs = BTreeMap::new();
        let mut degenerate = BTreeMap::new();
        let mut trials = BTreeMap::new();
        for (key, run, deg) in done {
            trials.entry(key.0).or_insert_with(|| trial_index(&dataset.manifest, key.0));
            if !deg.is_empty() {
                degenerate.insert(key, deg);
            }
            runs.insert(key, run);
        }
        Self { prep, runs, degenerate, trials }
    }

    pub fn run(&self, subject: usize, run: usize) -> Option<&FmriRun> {
        self.runs.get(&(subject, run))
    }

    pub fn subjects(&self) -> Vec<usize> {
        self.trials.keys().copied().collect()
    }

    /// `(stimulus, repetition)` shown at a trial.
    pub fn stimulus_at(&self, subject: usize, trial: TrialRef) -> Option<(usize, usize)> {
        self.trials.get(&subject)?.get(&trial).copied()
    }

    pub fn epoch(&self, subject: usize, trial: TrialRef, window: WindowSpec, delta: f64) -> Result<Epoch> {
        let run = self
            .run(subject, trial.run)
            .ok_or_else(|| Error::InvalidArgument(format!("subject {subject} run {} not loaded", trial.run)))?;
        let rep = self.stimulus_at(subject, trial).map_or(0, |(_, r)| r);
        extract_window(run, trial.event, window, delta, rep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    #[serde(flatten)]
    epoch: Epoch,
    /// Element offset into the flat payload.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheIndex {
    schema_version: u32,
    prep: PrepConfig,
    payload: String,
    entries: Vec<CacheEntry>,
}

/// Epochs stored as one flat f32 container plus a JSON index.
pub struct EpochCache;

impl EpochCache {
    fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("bin"), stem.with_extension("json"))
    }

    pub fn write(stem: &Path, prep: &PrepConfig, epochs: &[Epoch]) -> Result<()> {
        let (bin, json) = Self::paths(stem);
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(epochs.len());
        for e in epochs {
            entries.push(CacheEntry { epoch: e.clone(), offset: payload.len() });
            payload.extend_from_slice(&e.data);
        }
        if payload.is_empty() {
            return Err(Error::InvalidArgument("refusing to cache zero epochs".into()));
        }
        container::write_f32(&bin, &[payload.len()], &payload)?;
        let index = CacheIndex {
            schema_version: 1,
            prep: *prep,
            payload: bin.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            entries,
        };
        std::fs::write(&json, serde_json::to_vec_pretty(&index).at(&json)?).at(&json)
    }

    pub fn read(stem: &Path) -> Result<(PrepConfig, Vec<Epoch>)> {
        let (bin, json) = Self::paths(stem);
        let index: CacheIndex = serde_json::from_slice(&std::fs::read(&json).at(&json)?).at(&json)?;
        let (_, payload) = container::read_f32(&bin)?;
        let epochs = index
            .entries
            .into_iter()
            .map(|mut e| {
                let n = e.epoch.n_voxels * e.epoch.n_samples;
                let slice = payload.get(e.offset..e.offset + n).ok_or_else(|| Error::Format {
                    path: bin.clone(),
                    msg: format!("entry at offset {} overruns payload", e.offset),
                })?;
                e.epoch.data = slice.to_vec();
                Ok(e.epoch)
            })
            .collect::<Result<_>>()?;
        Ok((index.prep, epochs))
    }
}
