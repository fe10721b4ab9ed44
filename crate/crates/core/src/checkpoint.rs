//! Versioned JSON checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::DaNet;
use crate::nn::ParamStore;
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "danet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Next epoch to run: `stage` 0 is local, 1 global, 2 finished.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub stage: usize,
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub config: TrainConfig,
    pub cursor: Cursor,
    pub params: BTreeMap<String, Tensor<T>>,
    pub optimizer: AdamState<T>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    scalar: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: TrainConfig, cursor: Cursor, params: &ParamStore<T>, optimizer: &AdamState<T>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.to_string(),
            config,
            cursor,
            params: params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn network(&self) -> Result<DaNet<T>> {
        let mut store = ParamStore::new();
        for (k, v) in &self.params {
            store.insert(k.clone(), v.clone());
        }
        DaNet::from_params(self.config.network.clone(), store).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header: Header = serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format {:?})", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: header.version, expected: CHECKPOINT_VERSION });
        }
        if header.scalar != T::NAME {
            return Err(Error::Checkpoint(format!("checkpoint stores {} values, expected {}", header.scalar, T::NAME)));
        }
        serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
        Self::from_bytes(&bytes)
    }
}
