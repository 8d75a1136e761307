//! Binary checkpoint: `FWCK`, u32 version, u64 header length, JSON header,
//! then parameters, first and second moments (f64 LE) and the step (u64 LE).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FluidError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::training::optim::{OptimConfig, OptimState};
use crate::training::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    /// Data settings of the run that produced the parameters.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    pub num_params: usize,
    pub layout: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: Option<TrainConfig>,
    pub params: ModelParams<f64>,
    pub state: OptimState<f64>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let flat = self.params.flatten();
        let header = CheckpointHeader {
            model: self.model.clone(),
            optim: self.optim.clone(),
            train: self.train.clone(),
            num_params: flat.len(),
            layout: self.params.layout().into_iter().map(|(n, _, l)| (n, l)).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 24 * flat.len() + 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for block in [&flat, &self.state.m, &self.state.v] {
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.state.step.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |r: &str| FluidError::parse("checkpoint", r);
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(err(&format!("unsupported version {version}")));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + json_len).ok_or_else(|| err("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let n = header.num_params;
        let rest = &bytes[16 + json_len..];
        if rest.len() != 24 * n + 8 {
            return Err(err(&format!("payload has {} bytes, expected {}", rest.len(), 24 * n + 8)));
        }
        let block = |k: usize| -> Vec<f64> {
            rest[8 * n * k..8 * n * (k + 1)].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()
        };
        let mut params = ModelParams::<f64>::init(&header.model, 0);
        let layout: Vec<(String, usize)> = params.layout().into_iter().map(|(n, _, l)| (n, l)).collect();
        if layout != header.layout {
            return Err(err("parameter layout does not match the model config"));
        }
        params.unflatten(&block(0))?;
        let step = u64::from_le_bytes(rest[24 * n..].try_into().unwrap());
        Ok(Self { model: header.model, optim: header.optim, train: header.train, params, state: OptimState { m: block(1), v: block(2), step } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let model = ModelConfig::tiny();
        let params = ModelParams::<f64>::init(&model, 2);
        let n = params.num_params();
        let mut state = OptimState::new(n);
        state.m[3] = 0.25;
        state.v[7] = 1e-9;
        state.step = 42;
        let ck = Checkpoint { model, optim: OptimConfig::default(), train: Some(TrainConfig::default()), params, state };
        let bytes = ck.encode().unwrap();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
    }
}
