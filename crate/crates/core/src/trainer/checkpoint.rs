//! Decoder checkpoints: substrate checkpoint + config echo + loss trace.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use crate::error::{Error, IoContext, Result};
use crate::prep::{PrepConfig, WindowSpec};
use crate::substrate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::substrate::{OptimizerState, ParamStore, Rng};

pub const META_SCHEMA_VERSION: u32 = 1;
pub const TRACE_FILE: &str = "loss.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    SingleStage,
    MultiSubject,
    Adapt,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::SingleStage => "single_stage",
            Stage::MultiSubject => "multi_subject",
            Stage::Adapt => "adapt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub stage: Stage,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `(subject, voxel count)` for every subject layer.
    pub subjects: Vec<(usize, usize)>,
    pub prep: PrepConfig,
    pub sessions_used: Option<usize>,
    /// Multiplier on `train.max_lr` (adaptation runs at a tenth).
    pub lr_scale: f64,
    /// Subject whose layers are trained from scratch during adaptation.
    pub adapted_subject: Option<usize>,
}

impl CheckpointMeta {
    pub fn window(&self) -> WindowSpec {
        self.train.window
    }

    pub fn n_voxels(&self, subject: usize) -> Option<usize> {
        self.subjects.iter().find(|(s, _)| *s == subject).map(|&(_, c)| c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub cond_dropped: bool,
}

#[derive(Debug, Clone)]
pub struct DecoderCheckpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub step: u64,
    pub trace: Vec<TraceRow>,
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
    writeln!(f, "step,loss,lr,cond_dropped").at(path)?;
    for r in trace {
        writeln!(f, "{},{},{},{}", r.step, r.loss, r.lr, u8::from(r.cond_dropped)).at(path)?;
    }
    f.flush().at(path)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let bad = |line: usize, msg: &str| Error::Format { path: path.into(), msg: format!("line {line}: {msg}") };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "step,loss,lr,cond_dropped")) => {}
        _ => return Err(bad(1, "missing header")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 1, "expected 4 fields"));
            }
            Ok(TraceRow {
                step: f[0].parse().map_err(|_| bad(i + 1, "step"))?,
                loss: f[1].parse().map_err(|_| bad(i + 1, "loss"))?,
                lr: f[2].parse().map_err(|_| bad(i + 1, "lr"))?,
                cond_dropped: f[3] == "1",
            })
        })
        .collect()
}

impl DecoderCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let extra = serde_json::to_value(&self.meta).at(dir)?;
        let rng = Rng::new(self.meta.train.seed).split(self.meta.stage.name());
        save_checkpoint(dir, &self.params, self.optimizer.as_ref(), &rng, self.step, extra)?;
        write_trace(&dir.join(TRACE_FILE), &self.trace)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let loaded = load_checkpoint(dir)?;
        let meta: CheckpointMeta = serde_json::from_value(loaded.extra).at(dir.join("manifest.json"))?;
        if meta.schema_version != META_SCHEMA_VERSION {
            return Err(Error::Format {
                path: dir.join("manifest.json"),
                msg: format!("checkpoint schema {} (expected {META_SCHEMA_VERSION})", meta.schema_version),
            });
        }
        let trace_path = dir.join(TRACE_FILE);
        let trace = if trace_path.exists() { read_trace(&trace_path)? } else { Vec::new() };
        Ok(Self { meta, params: loaded.params, optimizer: loaded.optimizer, step: loaded.step, trace })
    }

    /// Copy without optimizer moments, for inference or as a new starting point.
    pub fn weights_only(&self) -> Self {
        Self { optimizer: None, ..self.clone() }
    }
}
