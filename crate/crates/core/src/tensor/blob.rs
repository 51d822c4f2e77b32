//! `TFW1` weight blobs.
//!
//! Layout (little-endian): magic `TFW1`, `u32` tensor count, then per tensor
//! a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32` extents and
//! the row-major `f32` payload.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{Real, Tensor};

pub const BLOB_MAGIC: &[u8; 4] = b"TFW1";

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("stream: {0}")]
    Stream(#[from] io::Error),
    #[error("bad magic {0:?}, expected TFW1")]
    Magic([u8; 4]),
    #[error("tensor name is {0} bytes, limit is 65535")]
    NameTooLong(usize),
    #[error("tensor `{name}` has rank {rank}, limit is 255")]
    RankTooLarge { name: String, rank: usize },
    #[error("tensor name is not UTF-8")]
    Utf8,
    #[error("tensor `{0}` has an invalid shape")]
    Shape(String),
}

pub fn write_blob<T: Real, W: Write>(
    mut out: W,
    tensors: &[(String, Tensor<T>)],
) -> Result<(), BlobError> {
    out.write_all(BLOB_MAGIC)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(BlobError::NameTooLong(bytes.len()));
        }
        if t.rank() > u8::MAX as usize {
            return Err(BlobError::RankTooLarge {
                name: name.clone(),
                rank: t.rank(),
            });
        }
        out.write_all(&(bytes.len() as u16).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&payload)?;
    }
    Ok(())
}

pub fn read_blob<T: Real, R: Read>(mut input: R) -> Result<Vec<(String, Tensor<T>)>, BlobError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(BlobError::Magic(magic));
    }
    let count = read_u32(&mut input)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut len = [0u8; 2];
        input.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| BlobError::Utf8)?;
        let mut rank = [0u8; 1];
        input.read_exact(&mut rank)?;
        let shape = (0..rank[0])
            .map(|_| read_u32(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        input.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|_| BlobError::Shape(name.clone()))?;
        out.push((name, t));
    }
    Ok(out)
}

fn read_u32<R: Read>(input: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_blob_file<T: Real>(
    path: &Path,
    tensors: &[(String, Tensor<T>)],
) -> Result<(), BlobError> {
    let mut buf = Vec::new();
    write_blob(&mut buf, tensors)?;
    fs::write(path, buf).map_err(|source| BlobError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_blob_file<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>, BlobError> {
    let bytes = fs::read(path).map_err(|source| BlobError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_blob(bytes.as_slice())
}
