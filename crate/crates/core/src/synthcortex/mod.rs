//! Synthetic cortex: parametric scenes, voxel encoding models, and BOLD
//! runs laid out like a natural-scenes recording.

pub mod dataset;
pub mod encoding;
pub mod hrf;
pub mod scene;
pub mod simulate;

pub use dataset::{build_dataset, plan_trials, Dataset, DatasetConfig, DatasetManifest, TrialRef};
pub use encoding::{sample_subject, voxel_response, SubjectConfig, SubjectSpec};
pub use hrf::hrf;
pub use scene::{render_mask, render_scene, sample_scene, Palette, SceneConfig, Shape, ShapeKind, StimulusScene};
pub use simulate::{simulate_run, FmriRun, NoiseConfig, RunTimeline, TR};
