//! In-memory training material: epochs paired with stimulus images.

use std::collections::{BTreeMap, BTreeSet};

use crate::diffgen::sample::{hwc_to_chw, to_model_range};
use crate::error::{Error, Result};
use crate::prep::{Epoch, PreparedRuns, SplitSpec, WindowSpec};
use crate::substrate::Rng;
use crate::synthcortex::dataset::StimulusSplit;
use crate::synthcortex::Dataset;

/// Model-range CHW copies of stimulus images.
#[derive(Debug, Clone, Default)]
pub struct ImageBank {
    pub channels: usize,
    pub resolution: usize,
    images: BTreeMap<usize, Vec<f32>>,
}

impl ImageBank {
    pub fn load(dataset: &Dataset, ids: impl IntoIterator<Item = usize>) -> Result<Self> {
        let res = dataset.manifest.config.resolution;
        let mut images = BTreeMap::new();
        for id in ids {
            if let std::collections::btree_map::Entry::Vacant(e) = images.entry(id) {
                e.insert(hwc_to_chw(&to_model_range(&dataset.image(id)?), 3, res, res));
            }
        }
        Ok(Self { channels: 3, resolution: res, images })
    }

    pub fn get(&self, id: usize) -> Result<&[f32]> {
        self.images
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("stimulus {id} not loaded")))
    }

    pub fn ids(&self) -> Vec<usize> {
        self.images.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn item_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }
}

/// Train-split stimuli, the generator pretraining distribution.
pub fn train_image_bank(dataset: &Dataset) -> Result<ImageBank> {
    let ids: Vec<usize> =
        dataset.manifest.stimuli.iter().filter(|s| s.split == StimulusSplit::Train).map(|s| s.id).collect();
    if ids.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training stimuli".into()));
    }
    ImageBank::load(dataset, ids)
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub epoch: Epoch,
    /// Image paired with the epoch (differs from `epoch.stimulus` only in
    /// the shuffle control).
    pub target: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub window: WindowSpec,
    pub delta: f64,
    pub items: Vec<TrainItem>,
    pub images: ImageBank,
    pub n_voxels: BTreeMap<usize, usize>,
    /// Trials dropped because the shifted window left the run.
    pub skipped: usize,
}

impl TrainingSet {
    /// Every train-side presentation (repetitions kept separate) of the
    /// given subjects. `max_runs` keeps only trials from each subject's
    /// first `max_runs` runs.
    pub fn build(
        dataset: &Dataset,
        prepared: &PreparedRuns,
        split: &SplitSpec,
        subjects: &[usize],
        window: WindowSpec,
        delta: f64,
        max_runs: Option<usize>,
    ) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::InvalidArgument("no training subjects".into()));
        }
        let mut items = Vec::new();
        let mut n_voxels = BTreeMap::new();
        let mut skipped = 0;
        for &s in subjects {
            let ss = split.subject(s).ok_or_else(|| Error::InvalidArgument(format!("subject {s} not in split")))?;
            let allowed: Option<BTreeSet<usize>> = match max_runs {
                None => None,
                Some(k) => {
                    let runs: Vec<usize> = dataset.manifest.runs_of(s).map(|r| r.run).collect();
                    if k == 0 || k > runs.len() {
                        return Err(Error::InvalidArgument(format!(
                            "sessions_used = {k} but subject {s} has {} runs",
                            runs.len()
                        )));
                    }
                    Some(runs[..k].iter().copied().collect())
                }
            };
            n_voxels.insert(
                s,
                dataset.manifest.n_voxels(s).ok_or_else(|| Error::InvalidArgument(format!("unknown subject {s}")))?,
            );
            for &t in &ss.train {
                if allowed.as_ref().is_some_and(|a| !a.contains(&t.run)) {
                    continue;
                }
                match prepared.epoch(s, t, window, delta) {
                    Ok(epoch) => {
                        let target = epoch.stimulus;
                        items.push(TrainItem { epoch, target });
                    }
                    Err(Error::OutOfBounds(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }
        if items.is_empty() {
            return Err(Error::InvalidArgument("no training trials after filtering".into()));
        }
        let images = ImageBank::load(dataset, items.iter().map(|i| i.target))?;
        Ok(Self { window, delta, items, images, n_voxels, skipped })
    }

    /// Label-shuffle control: permutes image targets across the items of
    /// each subject, breaking the brain-stimulus coupling.
    pub fn shuffle_targets(&mut self, seed: u64) {
        let root = Rng::new(seed).split("shuffle-targets");
        for s in self.n_voxels.keys().copied().collect::<Vec<_>>() {
            let idx: Vec<usize> = (0..self.items.len()).filter(|&i| self.items[i].epoch.subject == s).collect();
            let mut targets: Vec<usize> = idx.iter().map(|&i| self.items[i].target).collect();
            root.split_index(s as u64).shuffle(&mut targets);
            for (&i, t) in idx.iter().zip(targets) {
                self.items[i].target = t;
            }
        }
    }

    pub fn subjects(&self) -> Vec<usize> {
        self.n_voxels.keys().copied().collect()
    }
}
