//! Checkpoint layout (little-endian):
//!
//! ```text
//! "MILC" | version u16 = 1 | header_len u32 | header JSON (header_len bytes)
//! every tensor of MilParams as f32, in ParamTensors order:
//!   bn_gain, bn_bias, w1, b1, wt, bt, ws, bs,
//!   per class c: attn{c}.proj, attn{c}.proj_bias, attn{c}.score, attn{c}.score_bias,
//!   cls_w, cls_b
//! ```
//!
//! Matrices are row-major. Weights are narrowed to f32 on write, so a
//! round trip is exact for parameters that are already f32-representable.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, MilParams};
use crate::error::{Error, Result};
use crate::optim::{Hyperparams, ParamTensors};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MILC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub hyperparams: Option<Hyperparams>,
    pub epoch: u32,
    pub val_balanced_accuracy: Option<f64>,
    pub val_auroc: Option<f64>,
    #[serde(default)]
    pub member_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: MilParams,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.header.arch != self.params.arch {
            return Err(Error::invalid("checkpoint header and parameters disagree on architecture"));
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        let json = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(10 + json.len() + 4 * self.params.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for &v in t {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated(format!("{} bytes, header needs 10", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
        }
        if bytes.len() < 10 {
            return Err(Error::Truncated(format!("{} bytes, header needs 10", bytes.len())));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let json_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let json_end = 10usize.checked_add(json_len).filter(|&e| e <= bytes.len()).ok_or_else(|| {
            Error::Truncated(format!("header JSON of {json_len} bytes exceeds file of {} bytes", bytes.len()))
        })?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[10..json_end])?;
        header.arch.validate()?;
        let expected = header.arch.param_count() * 4;
        let payload = &bytes[json_end..];
        if payload.len() < expected {
            return Err(Error::Truncated(format!("{} payload bytes, parameters need {expected}", payload.len())));
        }
        if payload.len() > expected {
            return Err(Error::TrailingBytes(payload.len() - expected));
        }
        let mut params = MilParams::zeros(&header.arch);
        let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let names = params.tensor_names();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            for v in t.iter_mut() {
                let x = values.next().expect("length checked");
                if !x.is_finite() {
                    return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
                }
                *v = x as f64;
            }
        }
        Ok(Self { header, params })
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = ckpt.encode()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    Checkpoint::decode(&bytes).map_err(|e| Error::at_path(path, e))
}
