//! Trial-wise metrics, identification probes, aggregation, sweeps and reports.

pub mod metrics;
pub mod probes;

pub use metrics::{grayscale, miou, pearson, pixcorr, segment_by_palette, ssim, two_way_id, Flagged, Identification};
pub use probes::{Probe, ProbeKind, PROBE_SEED};
pub mod evaluate;

pub use evaluate::{
    duration_sweep, evaluate_split, summarize, test_epochs, time_sweep, CheckpointDecoder, ConstantDecoder, Decoder,
    MetricsReport, PerfectDecoder, Protocol, RoutedDecoder, Scorer, SubjectScores, Summary, SweepAxis, SweepPoint,
    SweepResult, Target, ABSENT_BY_DESIGN, METRICS, REPORT_SCHEMA_VERSION,
};
pub mod report;

pub use report::{emit_report, emit_sweep, report_csv, sweep_csv, sweep_svg};
