#![allow(dead_code)]

use std::path::Path;

use bolddecode::prep::{build_split_standard, PrepConfig, PreparedRuns, SplitSpec};
use bolddecode::synthcortex::{build_dataset, Dataset, DatasetConfig, SubjectConfig};

/// Two subjects, 16 px stimuli, a few hundred voxels: builds in well under
/// a second.
pub fn small_config() -> DatasetConfig {
    DatasetConfig {
        n_subjects: 2,
        n_train: 24,
        n_test: 12,
        trials_per_run: 12,
        resolution: 16,
        subject: SubjectConfig { voxels_min: 40, voxels_max: 60, ..Default::default() },
        ..Default::default()
    }
}

pub struct Fixture {
    pub dataset: Dataset,
    pub prepared: PreparedRuns,
    pub split: SplitSpec,
}

pub fn fixture(dir: &Path, cfg: &DatasetConfig, seed: u64) -> Fixture {
    build_dataset(cfg, seed, dir).unwrap();
    let dataset = Dataset::open(dir).unwrap();
    let subjects = dataset.manifest.subject_ids();
    let prepared = PreparedRuns::load(&dataset, PrepConfig::default(), &subjects).unwrap();
    let split = build_split_standard(&dataset.manifest).unwrap();
    Fixture { dataset, prepared, split }
}
