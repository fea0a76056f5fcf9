//! Binary parameter container.
//!
//! Layout (little endian):
//! `magic "HTCKPT01"`, `u32 version`, `u64 meta_len`, `meta_len` bytes of
//! UTF-8 metadata (JSON by convention), `u64 count`, then per tensor:
//! `u32 name_len`, name bytes, `u32 ndim`, `ndim x u64` dims,
//! `prod(dims) x f64` row-major values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HTCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamSet, meta: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Decodes a checkpoint into its metadata string and parameters.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, ParamSet)> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let meta = String::from_utf8(take(&mut r, meta_len)?.to_vec())
        .map_err(|_| TensorError::Checkpoint("metadata is not UTF-8".into()))?;
    let count = read_u64(&mut r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
            .map_err(|_| TensorError::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = take(&mut r, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(name, Tensor::new(shape, data)?)?;
    }
    if !r.is_empty() {
        return Err(TensorError::Checkpoint("trailing bytes".into()));
    }
    Ok((meta, params))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(params, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(String, ParamSet)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(TensorError::Checkpoint("truncated file".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().unwrap()))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().unwrap()))
}
