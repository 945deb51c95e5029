//! A trained model set on disk: one checkpoint directory per subject
//! (`sub<N>`), one shared multi-subject checkpoint (`multi`), or adapted
//! checkpoints (`adapt_sub<N>`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bolddecode::evalkit::{CheckpointDecoder, Decoder, RoutedDecoder};
use bolddecode::trainer::{DecoderCheckpoint, Stage};

use crate::error::CliError;

pub fn is_checkpoint(dir: &Path) -> bool {
    dir.join("manifest.json").is_file()
}

pub struct ModelSet {
    pub dir: PathBuf,
    pub checkpoints: Vec<(String, DecoderCheckpoint)>,
}

impl ModelSet {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let mut checkpoints = Vec::new();
        if is_checkpoint(dir) {
            checkpoints.push((String::new(), DecoderCheckpoint::load(dir)?));
        } else {
            let entries = std::fs::read_dir(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
            let mut names: Vec<String> = entries
                .filter_map(|e| e.ok())
                .filter(|e| is_checkpoint(&e.path()))
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            for n in names {
                checkpoints.push((n.clone(), DecoderCheckpoint::load(&dir.join(&n))?));
            }
        }
        if checkpoints.is_empty() {
            return Err(CliError::Usage(format!("no checkpoints under {}", dir.display())));
        }
        if let Some((name, _)) = checkpoints.iter().find(|(_, c)| c.meta.stage == Stage::Pretrain) {
            return Err(CliError::Usage(format!(
                "{} holds a pretrained generator ({name}); decoding needs a trained decoder",
                dir.display()
            )));
        }
        Ok(Self { dir: dir.to_path_buf(), checkpoints })
    }

    /// Subject → checkpoint. Dedicated checkpoints (single-subject or
    /// adapted) take precedence over a shared one.
    pub fn routes(&self) -> BTreeMap<usize, &DecoderCheckpoint> {
        let mut shared = BTreeMap::new();
        let mut dedicated = BTreeMap::new();
        for (_, c) in &self.checkpoints {
            match (c.meta.stage, c.meta.adapted_subject) {
                (Stage::Adapt, Some(s)) => {
                    dedicated.insert(s, c);
                }
                (Stage::SingleStage, _) => {
                    for &(s, _) in &c.meta.subjects {
                        dedicated.insert(s, c);
                    }
                }
                _ => {
                    for &(s, _) in &c.meta.subjects {
                        shared.insert(s, c);
                    }
                }
            }
        }
        shared.extend(dedicated);
        shared
    }

    pub fn subjects(&self) -> Vec<usize> {
        self.routes().keys().copied().collect()
    }
}

/// Owns the per-subject decoders so a [`RoutedDecoder`] can borrow them.
pub struct SetDecoders<'a> {
    decoders: BTreeMap<usize, CheckpointDecoder<'a>>,
}

impl<'a> SetDecoders<'a> {
    pub fn new(set: &'a ModelSet, seed: u64) -> Self {
        Self { decoders: set.routes().into_iter().map(|(s, c)| (s, CheckpointDecoder::new(c, seed))).collect() }
    }

    pub fn routed(&self) -> RoutedDecoder<'_> {
        RoutedDecoder { routes: self.decoders.iter().map(|(&s, d)| (s, d as &dyn Decoder)).collect() }
    }
}
