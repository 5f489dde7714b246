//! Checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "FRCKPT\0\0"
//! version    u32      1
//! header_len u32
//! header     JSON     {"arch": {...}, "tensors": [{"name", "shape"}, ...]}
//! anchor     f64      year normalization
//! scale      f64
//! log_var    3 x f64  year, structure, ptype
//! params     f32 x N  tensors in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Layout, MultiTaskModel, TensorSpec, UncertaintyWeights, YearNorm};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FRCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: Architecture,
    tensors: Vec<TensorSpec>,
}

pub fn to_bytes(model: &MultiTaskModel) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        arch: model.arch.clone(),
        tensors: model.layout.specs.clone(),
    })
    .expect("plain data");
    let mut out = Vec::with_capacity(8 + 8 + header.len() + 40 + 4 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&model.year_norm.anchor.to_le_bytes());
    out.extend_from_slice(&model.year_norm.scale.to_le_bytes());
    for s in model.uncertainty.log_var {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<MultiTaskModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.arch.validate()?;
    let layout = Layout::new(&header.arch);
    if layout.specs != header.tensors {
        return Err(Error::Checkpoint("tensor table does not match architecture".into()));
    }
    let year_norm = YearNorm {
        anchor: r.f64()?,
        scale: r.f64()?,
    };
    let log_var = [r.f64()?, r.f64()?, r.f64()?];
    let raw = r.take(4 * layout.total)?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let params = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(MultiTaskModel {
        arch: header.arch,
        year_norm,
        uncertainty: UncertaintyWeights { log_var },
        params,
        layout,
    })
}

pub fn save(model: &MultiTaskModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<MultiTaskModel> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MultiTaskModel {
        let mut m = MultiTaskModel::new(
            Architecture {
                image_size: 16,
                in_channels: 3,
                channels: vec![2, 3],
            },
            YearNorm {
                anchor: 1980.5,
                scale: 40.0,
            },
            11,
        )
        .unwrap();
        m.uncertainty.log_var = [0.1, -0.7, f64::MIN_POSITIVE];
        m.params[0] = -0.0;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.arch, m.arch);
        assert_eq!(back.year_norm, m.year_norm);
        assert_eq!(back.uncertainty.log_var.map(f64::to_bits), m.uncertainty.log_var.map(f64::to_bits));
        let a: Vec<u32> = m.params.iter().map(|p| p.to_bits()).collect();
        let b: Vec<u32> = back.params.iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = to_bytes(&model());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut ver = bytes;
        ver[8] = 2;
        assert!(from_bytes(&ver).is_err());
        assert!(from_bytes(&[]).is_err());
    }
}
