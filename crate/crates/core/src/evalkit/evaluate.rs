//! Split evaluation and the shifted-window / window-duration sweeps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{miou, pixcorr, segment_by_palette, ssim, two_way_id};
use super::probes::{Probe, ProbeKind};
use crate::diffgen::SamplerSettings;
use crate::error::{Error, Result};
use crate::prep::{pick_test_repetitions, Epoch, PreparedRuns, RepetitionMap, SplitKind, SplitSpec, WindowSpec};
use crate::synthcortex::{Dataset, TrialRef, TR};
use crate::trainer::{infer, DecoderCheckpoint};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Metric columns, in report order.
pub const METRICS: [&str; 5] = ["pixcorr", "ssim", "id_low", "id_high", "miou"];

/// Columns of the reference metric suite that need pretrained networks.
pub const ABSENT_BY_DESIGN: [&str; 3] = ["effnet", "swav", "dreamsim"];

/// Anything that turns epochs into HWC images in `[0, 1]`.
pub trait Decoder: Sync {
    fn decode(&self, epochs: &[Epoch]) -> Result<Vec<Vec<f32>>>;
    fn describe(&self) -> String;
    fn sampler(&self) -> Option<SamplerSettings> {
        None
    }
}

pub struct CheckpointDecoder<'a> {
    pub ckpt: &'a DecoderCheckpoint,
    pub settings: SamplerSettings,
    pub seed: u64,
}

impl<'a> CheckpointDecoder<'a> {
    pub fn new(ckpt: &'a DecoderCheckpoint, seed: u64) -> Self {
        Self { ckpt, settings: ckpt.meta.model.sampler, seed }
    }
}

impl Decoder for CheckpointDecoder<'_> {
    fn decode(&self, epochs: &[Epoch]) -> Result<Vec<Vec<f32>>> {
        Ok(infer(self.ckpt, epochs, &self.settings, self.seed)?.into_iter().map(|r| r.image).collect())
    }

    fn describe(&self) -> String {
        format!("{} checkpoint at step {}", self.ckpt.meta.stage.name(), self.ckpt.step)
    }

    fn sampler(&self) -> Option<SamplerSettings> {
        Some(self.settings)
    }
}

/// Returns the presented stimulus itself (upper bound).
pub struct PerfectDecoder<'a>(pub &'a Dataset);

impl Decoder for PerfectDecoder<'_> {
    fn decode(&self, epochs: &[Epoch]) -> Result<Vec<Vec<f32>>> {
        epochs.iter().map(|e| self.0.image(e.stimulus)).collect()
    }

    fn describe(&self) -> String {
        "perfect decoder".into()
    }
}

/// Returns one flat color for every epoch.
pub struct ConstantDecoder {
    pub color: [f32; 3],
    pub resolution: usize,
}

impl ConstantDecoder {
    /// Flat palette background, the mIoU baseline.
    pub fn background(dataset: &Dataset) -> Self {
        Self { color: dataset.manifest.palette.colors[0], resolution: dataset.manifest.config.resolution }
    }
}

impl Decoder for ConstantDecoder {
    fn decode(&self, epochs: &[Epoch]) -> Result<Vec<Vec<f32>>> {
        let img: Vec<f32> = (0..self.resolution * self.resolution).flat_map(|_| self.color).collect();
        Ok(vec![img; epochs.len()])
    }

    fn describe(&self) -> String {
        format!("constant {:?}", self.color)
    }
}

/// Dispatches each epoch to the decoder of its subject.
pub struct RoutedDecoder<'a> {
    pub routes: BTreeMap<usize, &'a dyn Decoder>,
}

impl Decoder for RoutedDecoder<'_> {
    fn decode(&self, epochs: &[Epoch]) -> Result<Vec<Vec<f32>>> {
        let mut out: Vec<Option<Vec<f32>>> = vec![None; epochs.len()];
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in epochs.iter().enumerate() {
            groups.entry(e.subject).or_default().push(i);
        }
        for (subject, idx) in groups {
            let dec = self
                .routes
                .get(&subject)
                .ok_or_else(|| Error::InvalidArgument(format!("no decoder routed for subject {subject}")))?;
            let batch: Vec<Epoch> = idx.iter().map(|&i| epochs[i].clone()).collect();
            for (i, img) in idx.into_iter().zip(dec.decode(&batch)?) {
                out[i] = Some(img);
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every epoch routed")).collect())
    }

    fn describe(&self) -> String {
        let parts: Vec<String> = self.routes.iter().map(|(s, d)| format!("subject {s}: {}", d.describe())).collect();
        parts.join("; ")
    }

    fn sampler(&self) -> Option<SamplerSettings> {
        self.routes.values().next().and_then(|d| d.sampler())
    }
}

/// Mean with cross-subject standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample std / √n; absent with a single subject.
    pub sem: Option<f64>,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { mean: f64::NAN, sem: None, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sem = (n > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    Summary { mean, sem, n }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScores {
    pub subject: usize,
    pub n_trials: usize,
    /// Metric name → trial mean.
    pub metrics: BTreeMap<String, f64>,
    /// Constant reconstructions scored as PixCorr 0.
    pub pixcorr_degenerate: usize,
    /// Items dropped from identification (constant features).
    pub id_excluded: BTreeMap<String, usize>,
}

/// Scores aligned reconstructions against targets for one subject.
pub struct Scorer {
    probes: Vec<Probe>,
    pub resolution: usize,
}

impl Scorer {
    pub fn new(resolution: usize) -> Self {
        Self { probes: ProbeKind::ALL.iter().map(|&k| Probe::new(k)).collect(), resolution }
    }

    pub fn probe(&self, kind: ProbeKind) -> &Probe {
        self.probes.iter().find(|p| p.kind == kind).expect("all probes built")
    }

    /// Two-way identification of `targets` from `recons` in one probe space.
    pub fn identification(&self, kind: ProbeKind, recons: &[Vec<f32>], targets: &[Vec<f32>]) -> Result<(f64, usize)> {
        let p = self.probe(kind);
        let id = two_way_id(&p.features(recons, self.resolution), &p.features(targets, self.resolution))?;
        Ok((id.percent, id.excluded))
    }

    pub fn score(
        &self,
        subject: usize,
        recons: &[Vec<f32>],
        targets: &[Vec<f32>],
        masks: &[Vec<u8>],
        palette: &crate::synthcortex::Palette,
    ) -> Result<SubjectScores> {
        let n = recons.len();
        if n != targets.len() || n != masks.len() {
            return Err(Error::InvalidArgument(format!(
                "subject {subject}: {n} reconstructions for {} targets and {} masks",
                targets.len(),
                masks.len()
            )));
        }
        if n == 0 {
            return Err(Error::InvalidArgument(format!("subject {subject}: no trials to score")));
        }
        let r = self.resolution;
        let (mut pc, mut ss, mut mi, mut degenerate) = (0.0, 0.0, 0.0, 0);
        for i in 0..n {
            let p = pixcorr(&recons[i], &targets[i]);
            pc += p.value;
            degenerate += usize::from(p.degenerate);
            ss += ssim(&recons[i], &targets[i], r, r)?;
            mi += miou(&segment_by_palette(&recons[i], palette), &masks[i], palette.colors.len());
        }
        let mut metrics = BTreeMap::new();
        let mut id_excluded = BTreeMap::new();
        metrics.insert("pixcorr".to_string(), pc / n as f64);
        metrics.insert("ssim".to_string(), ss / n as f64);
        metrics.insert("miou".to_string(), mi / n as f64);
        for kind in ProbeKind::ALL {
            let key = format!("id_{}", kind.name());
            let (v, excl) = if n >= 2 { self.identification(kind, recons, targets)? } else { (f64::NAN, n) };
            metrics.insert(key.clone(), v);
            id_excluded.insert(key, excl);
        }
        Ok(SubjectScores { subject, n_trials: n, metrics, pixcorr_degenerate: degenerate, id_excluded })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub split: SplitKind,
    pub repetition_seed: u64,
    pub window: WindowSpec,
    pub delta: f64,
    /// Images are scored at this size (the native stimulus resolution).
    pub eval_resolution: usize,
    pub sampler: Option<SamplerSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub decoder: String,
    pub protocol: Protocol,
    pub repetitions: RepetitionMap,
    pub subjects: Vec<SubjectScores>,
    pub summary: BTreeMap<String, Summary>,
    pub absent_by_design: Vec<String>,
    /// Chosen trials whose shifted window left the run.
    pub skipped_trials: usize,
}

impl MetricsReport {
    pub fn mean(&self, metric: &str) -> f64 {
        self.summary.get(metric).map_or(f64::NAN, |s| s.mean)
    }
}

fn aggregate(subjects: &[SubjectScores]) -> BTreeMap<String, Summary> {
    METRICS
        .iter()
        .map(|&m| {
            let vals: Vec<f64> =
                subjects.iter().filter_map(|s| s.metrics.get(m).copied()).filter(|v| v.is_finite()).collect();
            (m.to_string(), summarize(&vals))
        })
        .collect()
}

/// Chosen test epochs per subject at a window shift.
pub fn test_epochs(
    prepared: &PreparedRuns,
    reps: &RepetitionMap,
    subject: usize,
    window: WindowSpec,
    delta: f64,
) -> Result<(Vec<Epoch>, usize)> {
    let mut epochs = Vec::new();
    let mut skipped = 0;
    for (_, _, trial) in reps.trials(subject) {
        match prepared.epoch(subject, trial, window, delta) {
            Ok(e) => epochs.push(e),
            Err(Error::OutOfBounds(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((epochs, skipped))
}

/// Trial-wise evaluation on one chosen repetition per test stimulus,
/// aggregated per subject then across subjects.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    decoder: &dyn Decoder,
    dataset: &Dataset,
    prepared: &PreparedRuns,
    split: &SplitSpec,
    subjects: &[usize],
    seed: u64,
    window: WindowSpec,
    delta: f64,
) -> Result<MetricsReport> {
    let reps = pick_test_repetitions(&dataset.manifest, split, seed);
    let scorer = Scorer::new(dataset.manifest.config.resolution);
    let palette = &dataset.manifest.palette;
    let mut scores = Vec::new();
    let mut skipped = 0;
    for &s in subjects {
        if split.subject(s).is_none_or(|ss| ss.test.is_empty()) {
            return Err(Error::InvalidArgument(format!("subject {s} has no test trials in the split")));
        }
        let (epochs, sk) = test_epochs(prepared, &reps, s, window, delta)?;
        skipped += sk;
        let recons = decoder.decode(&epochs)?;
        if recons.len() != epochs.len() {
            return Err(Error::InvalidArgument(format!(
                "decoder returned {} reconstructions for {} chosen trials",
                recons.len(),
                epochs.len()
            )));
        }
        let targets: Vec<Vec<f32>> = epochs.iter().map(|e| dataset.image(e.stimulus)).collect::<Result<_>>()?;
        let masks: Vec<Vec<u8>> = epochs.iter().map(|e| dataset.mask(e.stimulus)).collect::<Result<_>>()?;
        scores.push(scorer.score(s, &recons, &targets, &masks, palette)?);
    }
    let reps = RepetitionMap {
        seed: reps.seed,
        subjects: reps.subjects.into_iter().filter(|(s, _)| subjects.contains(s)).collect(),
    };
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        decoder: decoder.describe(),
        protocol: Protocol {
            split: split.kind,
            repetition_seed: seed,
            window,
            delta,
            eval_resolution: scorer.resolution,
            sampler: decoder.sampler(),
        },
        repetitions: reps,
        summary: aggregate(&scores),
        subjects: scores,
        absent_by_design: ABSENT_BY_DESIGN.iter().map(|s| s.to_string()).collect(),
        skipped_trials: skipped,
    })
}

/// Which trial's image an identification score refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Previous,
    Current,
    Next,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Previous, Target::Current, Target::Next];

    fn offset(self) -> isize {
        match self {
            Target::Previous => -1,
            Target::Current => 0,
            Target::Next => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Previous => "previous",
            Target::Current => "current",
            Target::Next => "next",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Delta,
    Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Shift in seconds (duration sweeps: 0).
    pub delta: f64,
    pub window: WindowSpec,
    pub window_end: f64,
    /// Model kind (`general`, `specialized`) → metric → summary.
    pub values: BTreeMap<String, BTreeMap<String, Summary>>,
    /// Model kind → low-probe identification of the previous/current/next image.
    pub neighbor_id: BTreeMap<String, BTreeMap<String, Summary>>,
    pub skipped_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub schema_version: u32,
    pub name: String,
    pub axis: SweepAxis,
    pub repetition_seed: u64,
    /// Stimulus on-screen interval relative to onset, shaded in plots.
    pub stimulus_interval: (f64, f64),
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn value(&self, point: usize, kind: &str, metric: &str) -> Option<f64> {
        self.points.get(point)?.values.get(kind)?.get(metric).map(|s| s.mean)
    }

    pub fn neighbor(&self, point: usize, kind: &str, target: Target) -> Option<f64> {
        self.points.get(point)?.neighbor_id.get(kind)?.get(target.name()).map(|s| s.mean)
    }

    pub fn point_at_delta(&self, delta: f64) -> Option<usize> {
        self.points.iter().position(|p| (p.delta - delta).abs() < 1e-9)
    }
}

struct PointScores {
    metrics: BTreeMap<String, Summary>,
    neighbors: BTreeMap<String, Summary>,
}

#[allow(clippy::too_many_arguments)]
fn score_point(
    decoder: &dyn Decoder,
    dataset: &Dataset,
    prepared: &PreparedRuns,
    reps: &RepetitionMap,
    subjects: &[usize],
    scorer: &Scorer,
    window: WindowSpec,
    delta: f64,
) -> Result<(PointScores, usize)> {
    let palette = &dataset.manifest.palette;
    let mut scores = Vec::new();
    let mut neighbor_vals: BTreeMap<Target, Vec<f64>> = BTreeMap::new();
    let mut skipped = 0;
    for &s in subjects {
        let (epochs, sk) = test_epochs(prepared, reps, s, window, delta)?;
        skipped += sk;
        if epochs.len() < 2 {
            continue;
        }
        let recons = decoder.decode(&epochs)?;
        let targets: Vec<Vec<f32>> = epochs.iter().map(|e| dataset.image(e.stimulus)).collect::<Result<_>>()?;
        let masks: Vec<Vec<u8>> = epochs.iter().map(|e| dataset.mask(e.stimulus)).collect::<Result<_>>()?;
        scores.push(scorer.score(s, &recons, &targets, &masks, palette)?);
        for target in Target::ALL {
            let mut rs = Vec::new();
            let mut ts = Vec::new();
            for (e, r) in epochs.iter().zip(&recons) {
                let Some(event) = e.event.checked_add_signed(target.offset()) else { continue };
                if let Some((stim, _)) = prepared.stimulus_at(s, TrialRef { run: e.run, event }) {
                    rs.push(r.clone());
                    ts.push(dataset.image(stim)?);
                }
            }
            if rs.len() >= 2 {
                neighbor_vals.entry(target).or_default().push(scorer.identification(ProbeKind::Low, &rs, &ts)?.0);
            }
        }
    }
    let neighbors = neighbor_vals.into_iter().map(|(t, v)| (t.name().to_string(), summarize(&v))).collect();
    Ok((PointScores { metrics: aggregate(&scores), neighbors }, skipped))
}

/// Shifted-window sweep: the general model on every shift, and a
/// specialized model wherever one is given (keyed by shift in TR units).
#[allow(clippy::too_many_arguments)]
pub fn time_sweep(
    general: &dyn Decoder,
    specialized: &BTreeMap<i32, &dyn Decoder>,
    dataset: &Dataset,
    prepared: &PreparedRuns,
    split: &SplitSpec,
    subjects: &[usize],
    seed: u64,
    window: WindowSpec,
    deltas_tr: &[i32],
) -> Result<SweepResult> {
    let reps = pick_test_repetitions(&dataset.manifest, split, seed);
    let scorer = Scorer::new(dataset.manifest.config.resolution);
    let mut sorted = deltas_tr.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut points = Vec::new();
    for &k in &sorted {
        let delta = k as f64 * TR;
        let mut values = BTreeMap::new();
        let mut neighbor_id = BTreeMap::new();
        let mut skipped = 0;
        let kinds: Vec<(&str, &dyn Decoder)> =
            std::iter::once(("general", general)).chain(specialized.get(&k).map(|d| ("specialized", *d))).collect();
        for (kind, dec) in kinds {
            let (ps, sk) = score_point(dec, dataset, prepared, &reps, subjects, &scorer, window, delta)?;
            skipped = sk;
            values.insert(kind.to_string(), ps.metrics);
            neighbor_id.insert(kind.to_string(), ps.neighbors);
        }
        log::info!("time sweep δ = {k}·TR done");
        points.push(SweepPoint {
            delta,
            window,
            window_end: window.end(delta),
            values,
            neighbor_id,
            skipped_trials: skipped,
        });
    }
    Ok(SweepResult {
        schema_version: REPORT_SCHEMA_VERSION,
        name: "time".into(),
        axis: SweepAxis::Delta,
        repetition_seed: seed,
        stimulus_interval: (0.0, crate::synthcortex::simulate::STIMULUS_DURATION),
        points,
    })
}

/// One model per window duration, each evaluated on its own window.
pub fn duration_sweep(
    models: &[(WindowSpec, &dyn Decoder)],
    dataset: &Dataset,
    prepared: &PreparedRuns,
    split: &SplitSpec,
    subjects: &[usize],
    seed: u64,
) -> Result<SweepResult> {
    let reps = pick_test_repetitions(&dataset.manifest, split, seed);
    let scorer = Scorer::new(dataset.manifest.config.resolution);
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| models[a].0.d.total_cmp(&models[b].0.d));
    let mut points = Vec::new();
    for i in order {
        let (window, dec) = models[i];
        let (ps, skipped) = score_point(dec, dataset, prepared, &reps, subjects, &scorer, window, 0.0)?;
        points.push(SweepPoint {
            delta: 0.0,
            window,
            window_end: window.end(0.0),
            values: BTreeMap::from([("general".to_string(), ps.metrics)]),
            neighbor_id: BTreeMap::from([("general".to_string(), ps.neighbors)]),
            skipped_trials: skipped,
        });
    }
    Ok(SweepResult {
        schema_version: REPORT_SCHEMA_VERSION,
        name: "duration".into(),
        axis: SweepAxis::Duration,
        repetition_seed: seed,
        stimulus_interval: (0.0, crate::synthcortex::simulate::STIMULUS_DURATION),
        points,
    })
}
