//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! "CDNT"                      4 bytes
//! version                     u32
//! metadata length             u32
//! metadata                    UTF-8 JSON (config, epoch, losses, seed)
//! tensor count                u32
//! per tensor:
//!   name length               u16
//!   name                      UTF-8
//!   rank                      u8
//!   extents                   u32 x rank
//!   data                      f32 x product(extents)
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::{CardioNet, CardioNetConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CDNT";
pub const FORMAT_VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMetadata {
    pub config: CardioNetConfig,
    /// 1-based epoch the weights come from; 0 for untrained weights.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub valid_loss: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub metadata: CheckpointMetadata,
    pub params: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_model(
        model: &CardioNet<f32>,
        epoch: usize,
        train_loss: Option<f64>,
        valid_loss: Option<f64>,
        seed: u64,
    ) -> Self {
        Self {
            version: FORMAT_VERSION,
            metadata: CheckpointMetadata {
                config: model.config().clone(),
                epoch,
                train_loss,
                valid_loss,
                seed,
            },
            params: model
                .params()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<CardioNet<f32>> {
        CardioNet::from_named_params(
            self.metadata.config.clone(),
            self.params.iter().map(|(n, t)| (n.as_str(), t)),
        )
        .map_err(|e| Error::Compatibility(format!("checkpoint does not match its config: {e}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&len_u32(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.params.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.params {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Input(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Input(format!("tensor {name} has rank {}", t.rank())))?;
            out.push(rank);
            for &e in t.shape() {
                out.extend_from_slice(&len_u32(e, "extent")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic bytes")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic }.into());
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnknownVersion(version).into());
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let metadata: CheckpointMetadata =
            serde_json::from_slice(meta_bytes).map_err(|e| FormatError::Malformed {
                what: "metadata".into(),
                detail: e.to_string(),
            })?;
        let count = r.u32("tensor count")?;
        let mut params = IndexMap::new();
        for i in 0..count {
            let name_len = r.u16(&format!("name length of tensor {i}"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("name of tensor {i}"))?)
                .map_err(|e| FormatError::Malformed {
                    what: format!("name of tensor {i}"),
                    detail: e.to_string(),
                })?
                .to_string();
            let rank = r.take(1, &format!("rank of {name}"))?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&format!("extents of {name}"))? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| FormatError::Malformed {
                    what: format!("shape of {name}"),
                    detail: format!("{shape:?} overflows"),
                })?;
            let byte_len = numel.checked_mul(4).ok_or_else(|| FormatError::Malformed {
                what: format!("shape of {name}"),
                detail: format!("{shape:?} overflows"),
            })?;
            let raw = r.take(byte_len, &format!("data of {name}"))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| FormatError::Malformed {
                what: format!("tensor {name}"),
                detail: e.to_string(),
            })?;
            if params.insert(name.clone(), tensor).is_some() {
                return Err(FormatError::Malformed {
                    what: "tensor table".into(),
                    detail: format!("duplicate tensor {name}"),
                }
                .into());
            }
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos).into());
        }
        Ok(Self {
            version,
            metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Input(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                what: what.to_string(),
                needed: n,
                available,
            }
            .into());
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }
}
