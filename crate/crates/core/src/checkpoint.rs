//! Checkpoint directories: `checkpoint.json` (configs, parameter names and
//! shapes, iteration, normalization stats) plus `params.bin` and
//! `optimizer.bin` holding raw little-endian f32 values in declared order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LpwtNet, ModelConfig};
use crate::nn::ParamEntry;
use crate::scf::NormStats;
use crate::training::{AdamState, TrainConfig};

pub const META_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub iteration: usize,
    pub norm: NormStats,
    pub params: Vec<ParamEntry>,
    pub param_count: usize,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub iteration: usize,
    pub norm: NormStats,
    pub params: Vec<f32>,
    pub adam: AdamState,
}

fn write_f32s(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Corrupt { path: path.to_path_buf(), reason: format!("{} bytes, expected {}", bytes.len(), expected * 4) });
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

fn partial(dir: &Path) -> PathBuf {
    let mut s = dir.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

impl Checkpoint {
    /// Writes into `<dir>.partial` and swaps it into place, replacing any older checkpoint.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let net = LpwtNet::new(self.model)?;
        if net.param_count() != self.params.len() {
            return Err(Error::Shape("parameter vector does not match the model".into()));
        }
        let staging = partial(dir);
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            model: self.model,
            train: self.train.clone(),
            iteration: self.iteration,
            norm: self.norm,
            params: net.layout.entries.clone(),
            param_count: self.params.len(),
            adam_step: self.adam.step,
        };
        let mpath = staging.join(META_FILE);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&mpath, e))?;
        fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
        write_f32s(&staging.join(PARAMS_FILE), &self.params)?;
        let moments: Vec<f32> = self.adam.m.iter().chain(&self.adam.v).copied().collect();
        write_f32s(&staging.join(OPTIMIZER_FILE), &moments)?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(META_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
        let net = LpwtNet::new(meta.model)?;
        if net.layout.entries != meta.params || net.param_count() != meta.param_count {
            return Err(Error::Corrupt { path: mpath, reason: "parameter layout does not match the model config".into() });
        }
        let params = read_f32s(&dir.join(PARAMS_FILE), meta.param_count)?;
        let mut moments = read_f32s(&dir.join(OPTIMIZER_FILE), 2 * meta.param_count)?;
        let v = moments.split_off(meta.param_count);
        Ok(Checkpoint {
            model: meta.model,
            train: meta.train,
            iteration: meta.iteration,
            norm: meta.norm,
            params,
            adam: AdamState { m: moments, v, step: meta.adam_step },
        })
    }

    pub fn network(&self) -> Result<LpwtNet> {
        LpwtNet::new(self.model)
    }
}
