//! `MAT1` binary matrix files: the 8-byte magic `SARAMAT1`, rows and cols as
//! little-endian `u64`, then `rows * cols` little-endian IEEE-754 doubles in
//! row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::matrix::DenseMatrix;
use crate::error::{Result, SaraError};

pub const MAGIC: &[u8; 8] = b"SARAMAT1";
const HEADER_LEN: usize = 24;

pub fn encode(mat: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * mat.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(mat.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(mat.cols() as u64).to_le_bytes());
    for x in mat.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(SaraError::Format(format!(
            "{} bytes is shorter than the 24-byte header",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(SaraError::Format("bad magic".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| SaraError::Format(format!("{rows}x{cols} overflows")))?;
    let body = &bytes[HEADER_LEN..];
    if Some(body.len()) != count.checked_mul(8) {
        return Err(SaraError::Format(format!(
            "expected {count} values for {rows}x{cols}, found {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseMatrix::new(rows as usize, cols as usize, data)
}

pub fn write_to(mut w: impl Write, mat: &DenseMatrix) -> Result<()> {
    w.write_all(&encode(mat))?;
    Ok(())
}

pub fn read_from(mut r: impl Read) -> Result<DenseMatrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save(path: impl AsRef<Path>, mat: &DenseMatrix) -> Result<()> {
    fs::write(path, encode(mat))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    decode(&fs::read(path)?)
}
