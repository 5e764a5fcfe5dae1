//! Binary container for named f32 tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"FDT2"
//! version u16
//! count   u32
//! then per tensor:
//!   name_len u16, UTF-8 name bytes
//!   rank     u8,  extents u32 × rank
//!   data     f32 × product(extents), row-major
//! ```
//!
//! Round trips are bit-exact. Loading validates magic, version, and that
//! the byte length matches the declared contents exactly.

use std::path::Path;

use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::{CoreError, Result};

pub const MAGIC: [u8; 4] = *b"FDT2";
pub const VERSION: u16 = 1;

/// Serializes named tensors in the given order.
pub fn save(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let count = u32::try_from(tensors.len())
        .map_err(|_| CoreError::Checkpoint("too many tensors for a u32 count".into()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len()).map_err(|_| {
            CoreError::Checkpoint(format!("tensor name longer than u16: {name:?}"))
        })?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| CoreError::Checkpoint(format!("rank of {name:?} exceeds u8")))?;
        buf.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| {
                CoreError::Checkpoint(format!("extent of {name:?} exceeds u32"))
            })?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.off.checked_add(n).ok_or_else(|| {
            CoreError::Checkpoint(format!("length overflow reading {what}"))
        })?;
        if end > self.data.len() {
            return Err(CoreError::Checkpoint(format!(
                "truncated file: needed {n} bytes for {what} at offset {}",
                self.off
            )));
        }
        let s = &self.data[self.off..end];
        self.off = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Loads every named tensor, in file order.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let data = std::fs::read(path)
        .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = Reader { data: &data, off: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CoreError::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CoreError::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let e = r.u32("extent")? as usize;
            len = len.checked_mul(e).ok_or_else(|| {
                CoreError::Checkpoint(format!("tensor {name:?}: extent product overflows"))
            })?;
            shape.push(e);
        }
        let bytes = r.take(len * 4, "tensor data")?;
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, vals).map_err(|e| {
            CoreError::Checkpoint(format!("tensor {name:?}: {e}"))
        })?;
        out.push((name, t));
    }
    if r.off != data.len() {
        return Err(CoreError::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            data.len() - r.off
        )));
    }
    Ok(out)
}

/// Saves a model's parameters under their canonical names.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    save(path, &model.params.named())
}

/// Loads parameters for a known configuration, requiring exactly the
/// canonical name set with matching shapes.
pub fn load_params(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    let loaded = load(path)?;
    let mut params = ModelParams::init(cfg, &mut crate::tensor::Rng::new(0));
    let expected = params.named().len();
    if loaded.len() != expected {
        return Err(CoreError::Checkpoint(format!(
            "checkpoint has {} tensors, configuration needs {expected}",
            loaded.len()
        )));
    }
    for (name, tensor) in loaded {
        let slot = params.get_mut(&name).ok_or_else(|| {
            CoreError::Checkpoint(format!("unexpected tensor {name:?} in checkpoint"))
        })?;
        if slot.shape() != tensor.shape() {
            return Err(CoreError::Checkpoint(format!(
                "tensor {name:?} has shape {:?}, configuration needs {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    params.validate_shapes(cfg)?;
    Ok(params)
}

/// Loads a full model: configuration supplied, parameters from disk.
pub fn load_model(path: &Path, cfg: ModelConfig) -> Result<Model> {
    let params = load_params(path, &cfg)?;
    Model::new(cfg, params)
}
