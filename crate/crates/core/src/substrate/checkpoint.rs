//! Checkpoint directories: `manifest.json` plus one blob per tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container;
use super::optim::OptimizerState;
use super::params::ParamStore;
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, IoContext, Result};

pub const CHECKPOINT_FORMAT: &str = "bolddecode-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MomentRecord {
    pub name: String,
    pub m_file: String,
    pub v_file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerRecord {
    pub step: u64,
    pub moments: Vec<MomentRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub rng: Rng,
    pub tensors: Vec<TensorRecord>,
    pub optimizer: Option<OptimizerRecord>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub rng: Rng,
    pub step: u64,
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ParamStore<f32>,
    optimizer: Option<&OptimizerState<f32>>,
    rng: &Rng,
    step: u64,
    extra: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("tensors")).at(dir)?;
    let mut tensors = Vec::with_capacity(params.len());
    for (i, (name, e)) in params.iter().enumerate() {
        let file = format!("tensors/p{i:05}.bin");
        container::write_f32(&dir.join(&file), e.tensor.shape(), e.tensor.data())?;
        tensors.push(TensorRecord {
            name: name.clone(),
            shape: e.tensor.shape().to_vec(),
            dtype: "f32".into(),
            trainable: e.trainable,
            file,
        });
    }
    let optimizer = optimizer.map(|st| -> Result<OptimizerRecord> {
        let mut moments = Vec::new();
        for (i, (name, m)) in st.m.iter().enumerate() {
            let v = st.v.get(name).ok_or_else(|| Error::InvalidArgument(format!("no second moment for `{name}`")))?;
            let m_file = format!("tensors/m{i:05}.bin");
            let v_file = format!("tensors/v{i:05}.bin");
            container::write_f32(&dir.join(&m_file), m.shape(), m.data())?;
            container::write_f32(&dir.join(&v_file), v.shape(), v.data())?;
            moments.push(MomentRecord { name: name.clone(), m_file, v_file });
        }
        Ok(OptimizerRecord { step: st.step, moments })
    });
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        step,
        rng: rng.clone(),
        tensors,
        optimizer: optimizer.transpose()?,
        extra,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).at(&path)?;
    std::fs::write(&path, text).at(&path)
}

fn load_tensor(dir: &Path, file: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let path = dir.join(file);
    let (dims, data) = container::read_f32(&path)?;
    if dims != shape {
        return Err(Error::Format { path, msg: format!("blob dims {dims:?} but manifest says {shape:?}") });
    }
    Tensor::new(dims, data)
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).at(&path)?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).at(&path)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format { path, msg: format!("unexpected format `{}`", manifest.format) });
    }
    let mut params = ParamStore::new();
    for rec in &manifest.tensors {
        params.insert(rec.name.clone(), load_tensor(dir, &rec.file, &rec.shape)?, rec.trainable)?;
    }
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(rec) => {
            let mut st = OptimizerState::new();
            st.step = rec.step;
            for mr in &rec.moments {
                let shape = params.get(&mr.name)?.shape().to_vec();
                st.m.insert(mr.name.clone(), load_tensor(dir, &mr.m_file, &shape)?);
                st.v.insert(mr.name.clone(), load_tensor(dir, &mr.v_file, &shape)?);
            }
            Some(st)
        }
    };
    Ok(LoadedCheckpoint { params, optimizer, rng: manifest.rng, step: manifest.step, extra: manifest.extra })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::new();
        p.insert("a/w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap(), true).unwrap();
        p.insert("b", Tensor::scalar(7.0), false).unwrap();
        let mut st = OptimizerState::new();
        st.step = 3;
        st.m.insert("a/w".into(), Tensor::full(&[2, 2], 0.1));
        st.v.insert("a/w".into(), Tensor::full(&[2, 2], 0.2));
        let mut rng = Rng::new(9);
        rng.next_u64();
        save_checkpoint(dir.path(), &p, Some(&st), &rng, 42, serde_json::json!({"k": 1})).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.rng, rng);
        assert_eq!(back.params.hash_where(|_| true), p.hash_where(|_| true));
        assert!(back.params.is_trainable("a/w") && !back.params.is_trainable("b"));
        let o = back.optimizer.unwrap();
        assert_eq!(o.step, 3);
        assert_eq!(o.v["a/w"], st.v["a/w"]);
    }
}
