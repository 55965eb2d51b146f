//! Raw little-endian float32 tensor files shared by the assembly and
//! activation formats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::Matrix;

/// Serialises a matrix row-major as little-endian f32.
pub fn matrix_to_f32_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols() * 4);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes());
        }
    }
    out
}

/// Parses a row-major little-endian f32 block of exactly `rows * cols` values.
pub fn matrix_from_f32_bytes(bytes: &[u8], rows: usize, cols: usize) -> Result<Matrix> {
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "expected {} bytes for a {}x{} f32 tensor, found {}",
            expected,
            rows,
            cols,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    Ok(Matrix::from_row_iterator(rows, cols, values))
}

pub fn write_f32_matrix(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, matrix_to_f32_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    matrix_from_f32_bytes(&bytes, rows, cols).map_err(|e| match e {
        Error::Integrity(msg) => Error::Integrity(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes a flat f32 vector (e.g. per-voxel scores).
pub fn write_f32_vector(path: &Path, v: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = v.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_vector(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Integrity(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Rounds every entry to the nearest f32, so a value survives a save/load
/// cycle unchanged.
pub fn round_to_f32(m: &mut Matrix) {
    m.iter_mut().for_each(|x| *x = *x as f32 as f64);
}
