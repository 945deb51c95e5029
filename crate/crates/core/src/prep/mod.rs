//! Preprocessing: drift removal, z-scoring, window extraction, splits and
//! an on-disk epoch cache.

pub mod cache;
pub mod detrend;
pub mod split;
pub mod window;

pub use cache::{EpochCache, PreparedRuns};
pub use detrend::{cosine_basis, detrend, preprocess_run, zscore, PrepConfig, DEFAULT_CUTOFF_S};
pub use split::{
    build_split_standard, build_split_time_resolved, pick_test_repetitions, time_resolved_test_runs, RepetitionMap,
    SplitKind, SplitSpec, SubjectSplit, TIME_RESOLVED_FRACTION,
};
pub use window::{extract_window, window_indices, Epoch, WindowSpec};
