//! Binary model checkpoints.
//!
//! ```text
//! "RFCK" | version u32 = 1 | config_len u32 | config (JSON, UTF-8)
//! count u32 | count × ( name_len u32 | name | ndim u32 | ndim × u64 | f64 data )
//! ```
//!
//! All integers and floats are little-endian. The ordered-mask temperature is
//! stored as the one-element blob `state.tau`.

use std::path::Path;

use super::{EncoderModel, ModelConfig};
use crate::autodiff::{Array, RngStream};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const TAU_BLOB: &str = "state.tau";

fn put_blob(out: &mut Vec<u8>, name: &str, value: &Array) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
    for &d in value.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in value.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_bytes(model: &EncoderModel) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params.len() as u32 + 1).to_le_bytes());
    for (_, p) in model.params.iter() {
        put_blob(&mut out, &p.name, &p.value);
    }
    put_blob(&mut out, TAU_BLOB, &Array::scalar(model.tau()));
    Ok(out)
}

pub fn save_checkpoint(model: &EncoderModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: "truncated checkpoint".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn err(&self, reason: String) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason,
        }
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<EncoderModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)?;
    let mut model = EncoderModel::new(config, &mut RngStream::new(0))?;
    let count = r.u32()? as usize;
    let mut seen = vec![false; model.params.len()];
    let mut tau = None;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.err("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(r.err(format!("{name}: {ndim} dimensions")));
        }
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.err(format!("{name}: shape overflow")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| r.err("size overflow".into()))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if name == TAU_BLOB {
            tau = data.first().copied();
            continue;
        }
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| r.err(format!("unknown parameter {name}")))?;
        if model.params.get(id).shape() != shape.as_slice() {
            return Err(r.err(format!(
                "{name}: shape {shape:?}, expected {:?}",
                model.params.get(id).shape()
            )));
        }
        *model.params.get_mut(id) = Array::new(shape, data)?;
        seen[id.index()] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let name = &model.params.iter().nth(missing).expect("index in range").1.name;
        return Err(r.err(format!("missing parameter {name}")));
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes".into()));
    }
    if let Some(t) = tau {
        model.set_tau(t)?;
    }
    Ok(model)
}
