//! Parameter checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FVCK" | version: u32 | layer_count: u32
//!   per layer: kind_tag: u8 | param_count: u8
//!     per param: ndim: u8 | dims: u32 x ndim | data: f32 x numel
//! crc32: u32   (over everything after the magic, excluding the crc itself)
//! ```
//!
//! Parameters are stored as f32 regardless of the in-memory precision.

use std::fs;
use std::path::Path;

use super::{Network, Scalar, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<S: Scalar>(net: &Network<S>, path: &Path) -> Result<()> {
    let mut body = Vec::new();
    body.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    body.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for (layer, params) in net.layers().iter().zip(net.params().iter()) {
        body.push(layer.kind_tag());
        body.push(params.len() as u8);
        for p in params {
            body.push(p.shape().len() as u8);
            for &d in p.shape() {
                body.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.data() {
                body.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&body);
    let mut file = Vec::with_capacity(4 + body.len() + 4);
    file.extend_from_slice(&CHECKPOINT_MAGIC);
    file.extend_from_slice(&body);
    file.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, file)?;
    Ok(())
}

/// Loads parameters into an existing network, checking layer kinds and
/// parameter shapes against the file.
pub fn load_checkpoint<S: Scalar>(net: &mut Network<S>, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, path);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CHECKPOINT_MAGIC,
        });
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed: 8,
            available: bytes.len(),
        });
    }
    let body = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }

    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let layer_count = r.u32()? as usize;
    if layer_count != net.layers().len() {
        return Err(r.malformed(format!(
            "layer count {layer_count} does not match network ({})",
            net.layers().len()
        )));
    }
    for idx in 0..layer_count {
        let kind = r.u8()?;
        let expected_kind = net.layers()[idx].kind_tag();
        if kind != expected_kind {
            return Err(r.malformed(format!(
                "layer {idx}: kind tag {kind} does not match network ({expected_kind})"
            )));
        }
        let param_count = r.u8()? as usize;
        if param_count != net.params()[idx].len() {
            return Err(r.malformed(format!(
                "layer {idx}: parameter count {param_count} does not match network"
            )));
        }
        for pi in 0..param_count {
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            if dims != net.params()[idx][pi].shape() {
                return Err(r.malformed(format!(
                    "layer {idx} param {pi}: shape {dims:?} does not match network {:?}",
                    net.params()[idx][pi].shape()
                )));
            }
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(S::from_f64(r.f32()? as f64));
            }
            net.params_mut()[idx][pi] = Tensor::from_vec(&dims, data)?;
        }
    }
    // only the crc trailer may remain
    if r.remaining() != 4 {
        return Err(r.malformed(format!(
            "{} trailing bytes",
            r.remaining().saturating_sub(4)
        )));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader {
            bytes,
            offset: 0,
            path,
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                offset: self.offset,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn malformed(&self, message: String) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            offset: self.offset,
            message,
        }
    }
}
