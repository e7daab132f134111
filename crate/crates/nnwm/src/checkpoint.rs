//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "NNWMCKPT"
//! version  u32
//! length   u64      byte length of the JSON header
//! header   JSON     architecture and training metadata
//! tensors  f64...   weight then bias of every parameterized layer, in order
//! ```

use std::fs;
use std::path::Path;

use nnwm_core::{FeatureShape, HostModel, LayerSpec, Params, Situation, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"NNWMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: FeatureShape,
    pub layers: Vec<LayerSpec>,
    pub embed_layer: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub situation: Option<Situation>,
    pub final_task_loss: Option<f64>,
    pub final_embedding_loss: Option<f64>,
    pub final_test_error: Option<f64>,
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: Architecture,
    metadata: TrainingMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: HostModel,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(model: HostModel, meta: TrainingMeta) -> Self {
        Checkpoint { model, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            architecture: Architecture {
                input: self.model.input_shape(),
                layers: self.model.specs(),
                embed_layer: self.model.embed_layer(),
                seed: self.model.seed(),
            },
            metadata: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("plain data serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.model.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            for v in p.weight.data().iter().chain(p.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| CliError::format(path, msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(len))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let arch = header.architecture;
        let mut offset = 20 + len;
        let mut params = Vec::new();
        for spec in &arch.layers {
            let Some((wshape, bias_len, _)) = spec.param_shape() else {
                continue;
            };
            let mut take = |shape: Vec<usize>| -> Result<Tensor> {
                let n: usize = shape.iter().product();
                let end = offset + 8 * n;
                let raw = bytes
                    .get(offset..end)
                    .ok_or_else(|| bad(format!("tensor data truncated at byte {offset}")))?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                offset = end;
                Ok(Tensor::from_vec(shape, data)?)
            };
            let weight = take(wshape)?;
            let bias = take(vec![bias_len])?;
            params.push(Params { weight, bias });
        }
        if offset != bytes.len() {
            return Err(bad(format!(
                "{} unexpected trailing bytes",
                bytes.len() - offset
            )));
        }
        let model =
            HostModel::from_parts(arch.input, arch.layers, params, arch.embed_layer, arch.seed)?;
        Ok(Checkpoint {
            model,
            meta: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
