//! Named-tensor checkpoint container.
//!
//! ```text
//! magic "ABCK" | version u16 = 1 | reserved u16 = 0
//! config_len u32 | config JSON (UTF-8)
//! tensor_count u32 | per tensor: name_len u16 | name (UTF-8) | tensor record
//! ```
//! Tensor records use the standalone tensor file layout. Tensors are stored
//! in name order, so saving a loaded checkpoint reproduces its bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{decode_tensor_from, encode_tensor_into, Dtype, Reader};
use crate::error::{Error, Result};
use crate::fleet::{FleetModel, ModelConfig, V2XConfig};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ABCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u16,
    pub model: ModelConfig,
    pub v2x: V2XConfig,
    pub train: TrainConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    model: ModelConfig,
    v2x: V2XConfig,
    train: TrainConfig,
}

impl Checkpoint {
    pub fn from_model(model: &FleetModel, train: &TrainConfig) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: model.config.clone(),
            v2x: model.v2x.clone(),
            train: TrainConfig {
                v2x: model.v2x.clone(),
                ..train.clone()
            },
            tensors: model.store.to_named(),
        }
    }

    /// Rebuild the model. `v2x` must be the configuration it was trained for.
    pub fn into_model(&self, v2x: &V2XConfig) -> Result<FleetModel> {
        if *v2x != self.v2x {
            return Err(Error::Compatibility(format!(
                "checkpoint was trained for agents {:?}, requested {:?}",
                self.v2x.roles().collect::<Vec<_>>(),
                v2x.roles().collect::<Vec<_>>()
            )));
        }
        let mut model = FleetModel::init(&self.model, &self.v2x, 0)?;
        model.store.load_named(&self.tensors)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&ConfigBlock {
            model: self.model.clone(),
            v2x: self.v2x.clone(),
            train: self.train.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        let len = u32::try_from(config.len()).map_err(|_| Error::DimOverflow("config block".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&config);
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::DimOverflow("tensor count".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let n = u16::try_from(name.len()).map_err(|_| Error::DimOverflow(format!("name `{name}`")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor_into(&mut out, t, Dtype::F64)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let _reserved = r.u16()?;
        let len = r.u32()? as usize;
        let cfg: ConfigBlock = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Malformed(format!("config block: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let t = decode_tensor_from(&mut r)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Malformed(format!("duplicate tensor `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            format_version: version,
            model: cfg.model,
            train: TrainConfig {
                v2x: cfg.v2x.clone(),
                ..cfg.train
            },
            v2x: cfg.v2x,
            tensors,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
