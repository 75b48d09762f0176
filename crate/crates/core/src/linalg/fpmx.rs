//! FPMX matrix files: magic `FPMX`, `u32` rows, `u32` cols (little endian),
//! then `rows * cols` little-endian IEEE-754 doubles in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use super::DenseMatrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FPMX";

pub fn write_to(m: &DenseMatrix, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn to_bytes(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * m.data().len());
    write_to(m, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "{rows}x{cols} payload needs {expected} bytes, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseMatrix::new(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_from(mut r: impl Read) -> Result<DenseMatrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Format(e.to_string()))?;
    from_bytes(&bytes)
}

pub fn save(m: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
