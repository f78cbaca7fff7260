//! Minimal binary tensor container.
//!
//! ```text
//! "MLAF" | version u16 | dtype u8 | ndim u8 | dims u64 × ndim | payload
//! ```
//! Little-endian throughout, payload row-major. Matrices are written with
//! `ndim = 2`; one-dimensional files load as a single row.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"MLAF";
pub const VERSION: u16 = 1;

pub fn encode<T: Scalar>(m: &Matrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + m.data().len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(2);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &v in m.data() {
        v.write_le(&mut out);
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Decodes a tensor, converting the stored dtype to `T`.
pub fn decode<T: Scalar>(mut bytes: &[u8]) -> Result<Matrix<T>> {
    let b = &mut bytes;
    if take(b, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes(take(b, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let code = take(b, 1, "dtype")?[0];
    let dtype = Dtype::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    let ndim = take(b, 1, "ndim")?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = u64::from_le_bytes(take(b, 8, "dims")?.try_into().unwrap());
        dims.push(usize::try_from(raw).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let (rows, cols) = match dims[..] {
        [n] => (1, n),
        [r, c] => (r, c),
        _ => return Err(Error::Format(format!("unsupported rank {ndim}"))),
    };
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let size = dtype.size();
    let payload_len = count
        .checked_mul(size)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let payload = take(b, payload_len, "payload")?;
    if !b.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", b.len())));
    }
    let data = payload
        .chunks_exact(size)
        .map(|c| match dtype {
            Dtype::F32 => T::lit(f32::read_le(c) as f64),
            Dtype::F64 => T::lit(f64::read_le(c)),
        })
        .collect();
    Matrix::new(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, m: &Matrix<T>) -> Result<()> {
    fs::write(path, encode(m))?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Matrix<T>> {
    decode(&fs::read(path)?)
}
