//! Binary checkpoint archive: magic, manifest length, JSON manifest, then
//! little-endian `f32` tensor data in manifest order.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Vocabulary;
use crate::model::{FlowFieldNet, ModelConfig, ModelError};
use crate::training::{AdamState, EmaState};

pub const MAGIC: &[u8; 8] = b"EVOCKPT\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

impl From<candle_core::Error> for CheckpointError {
    fn from(e: candle_core::Error) -> Self {
        CheckpointError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the data section.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub train_step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub data: Vec<f32>,
}

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";
const EMA: &str = "ema.";

fn flat_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

impl Checkpoint {
    pub fn from_model(
        model: &FlowFieldNet,
        vocab: &Vocabulary,
        opt: Option<&AdamState>,
        ema: Option<&EmaState>,
    ) -> Result<Self> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        let mut push = |name: String, t: &Tensor| -> Result<()> {
            let values = flat_f32(t)?;
            tensors.push(TensorEntry { name, shape: t.dims().to_vec(), offset: data.len(), len: values.len() });
            data.extend(values);
            Ok(())
        };
        let entries = model.params().entries();
        for (n, v) in entries {
            push(n.clone(), v.as_tensor())?;
        }
        if let Some(opt) = opt {
            for ((n, _), m) in entries.iter().zip(&opt.m) {
                push(format!("{OPT_M}{n}"), m)?;
            }
            for ((n, _), v) in entries.iter().zip(&opt.v) {
                push(format!("{OPT_V}{n}"), v)?;
            }
        }
        if let Some(ema) = ema {
            for ((n, _), s) in entries.iter().zip(&ema.shadow) {
                push(format!("{EMA}{n}"), s)?;
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model_config: model.config().clone(),
            vocabulary: vocab.clone(),
            train_step: opt.map_or(0, |o| o.step),
            tensors,
        };
        Ok(Self { manifest, data })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CheckpointError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
        let json_end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[16..json_end])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!("unsupported format version {}", manifest.format_version)));
        }
        manifest.vocabulary = manifest.vocabulary.validated()?;
        let body = &bytes[json_end..];
        if body.len() % 4 != 0 {
            return Err(bad("tensor data not a whole number of f32 values"));
        }
        let data: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        let mut expected = 0;
        for t in &manifest.tensors {
            if t.offset != expected || t.shape.iter().product::<usize>() != t.len {
                return Err(CheckpointError::Format(format!("inconsistent entry for {}", t.name)));
            }
            expected += t.len;
        }
        if expected != data.len() {
            return Err(CheckpointError::Format(format!("{} values for {expected} declared", data.len())));
        }
        Ok(Self { manifest, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.manifest.vocabulary
    }

    pub fn config(&self) -> &ModelConfig {
        &self.manifest.model_config
    }

    fn tensor(&self, e: &TensorEntry, dtype: DType) -> Result<Tensor> {
        let slice = &self.data[e.offset..e.offset + e.len];
        Ok(Tensor::from_slice(slice, e.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }

    fn prefixed(&self, prefix: &str, dtype: DType) -> Result<Vec<(String, Tensor)>> {
        self.manifest
            .tensors
            .iter()
            .filter(|e| {
                let plain = ![OPT_M, OPT_V, EMA].iter().any(|p| e.name.starts_with(p));
                if prefix.is_empty() {
                    plain
                } else {
                    e.name.starts_with(prefix)
                }
            })
            .map(|e| Ok((e.name[prefix.len()..].to_string(), self.tensor(e, dtype)?)))
            .collect()
    }

    pub fn model(&self, dtype: DType) -> Result<FlowFieldNet> {
        Ok(FlowFieldNet::from_tensors(self.config().clone(), self.prefixed("", dtype)?, dtype)?)
    }

    /// The shadow weights as a model, when present.
    pub fn ema_model(&self, dtype: DType) -> Result<Option<FlowFieldNet>> {
        let t = self.prefixed(EMA, dtype)?;
        if t.is_empty() {
            return Ok(None);
        }
        Ok(Some(FlowFieldNet::from_tensors(self.config().clone(), t, dtype)?))
    }

    pub fn optimizer(&self, dtype: DType) -> Result<Option<AdamState>> {
        let m = self.prefixed(OPT_M, dtype)?;
        let v = self.prefixed(OPT_V, dtype)?;
        if m.is_empty() {
            return Ok(None);
        }
        Ok(Some(AdamState {
            step: self.manifest.train_step,
            m: m.into_iter().map(|(_, t)| t).collect(),
            v: v.into_iter().map(|(_, t)| t).collect(),
        }))
    }

    pub fn ema(&self, dtype: DType, decay: f64) -> Result<Option<EmaState>> {
        let s = self.prefixed(EMA, dtype)?;
        if s.is_empty() {
            return Ok(None);
        }
        Ok(Some(EmaState { decay, shadow: s.into_iter().map(|(_, t)| t).collect() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TrainConfig;

    fn small() -> FlowFieldNet {
        let cfg = ModelConfig { d: 8, layers: 1, heads: 2, vocab_size: 260, max_seq_len: 8, ..ModelConfig::default() };
        FlowFieldNet::new(cfg, 4, DType::F32).unwrap()
    }

    #[test]
    fn byte_identical_round_trip() {
        let m = small();
        let mut opt = AdamState::new(m.params().entries()).unwrap();
        opt.step = 17;
        let ema = EmaState::new(m.params().entries(), TrainConfig::default().ema_decay).unwrap();
        let vocab = Vocabulary::train_bpe(b"aaabbbaaabbb", 3);
        let ck = Checkpoint::from_model(&m, &vocab, Some(&opt), Some(&ema)).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let m2 = back.model(DType::F32).unwrap();
        let again = Checkpoint::from_model(&m2, back.vocabulary(), back.optimizer(DType::F32).unwrap().as_ref(), back.ema(DType::F32, 0.9999).unwrap().as_ref()).unwrap();
        assert_eq!(again.to_bytes().unwrap(), bytes);
        assert_eq!(back.optimizer(DType::F32).unwrap().unwrap().step, 17);
    }

    #[test]
    fn rejects_corruption() {
        let m = small();
        let bytes = Checkpoint::from_model(&m, &Vocabulary::byte(), None, None).unwrap().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes).unwrap().ema_model(DType::F32).unwrap().is_none());
    }
}
