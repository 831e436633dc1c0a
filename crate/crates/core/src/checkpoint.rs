//! Model checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "CARM"  version:u8  n_tensors
//! n_tensors × ( ndim  dim_0 … dim_{ndim-1} )      shape table
//! n_tensors × ( f32 × product(dims) )              weights, declaration order
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CARM";
pub const VERSION: u8 = 1;

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let params = model.params();
    let mut out = Vec::with_capacity(16 + model.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.ndim() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for p in params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| malformed("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "checkpoint",
        reason: reason.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let mut shapes = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let ndim = r.u32()?;
        if ndim > 8 {
            return Err(malformed(format!("tensor rank {ndim} too large")));
        }
        shapes.push((0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
    }
    let mut params = Vec::with_capacity(n);
    for shape in shapes {
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| malformed("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(malformed("trailing bytes"));
    }
    Model::from_params(params)
}

pub fn save(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_and_corruption() {
        let model = Model::<f32>::build(ModelConfig {
            channels: vec![3, 4],
            head_kernel: 3,
            n_class: 2,
            feature_dim: 4,
            seed: 9,
        })
        .unwrap();
        let bytes = encode(&model);
        assert_eq!(&bytes[..4], b"CARM");
        assert_eq!(bytes[4], VERSION);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.params(), model.params());

        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
