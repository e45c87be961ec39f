//! Compact mirror of an expression matrix: `CDYN1`, rows and cols as
//! little-endian u64, then row-major little-endian f64 values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const MAGIC: &[u8; 5] = b"CDYN1";

pub fn write_matrix_binary(m: &Matrix<f64>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(21 + 8 * m.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_binary(path: &Path) -> Result<Matrix<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 21 || &bytes[..5] != MAGIC {
        return Err(Error::format(path, "not a CDYN1 matrix file"));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[k..k + 8].try_into().unwrap()) as usize;
    let (rows, cols) = (word(5), word(13));
    let expect = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(21))
        .ok_or_else(|| Error::format(path, "dimension header overflows"))?;
    if bytes.len() != expect {
        return Err(Error::format(
            path,
            format!("{rows}×{cols} header but {} payload bytes", bytes.len() - 21),
        ));
    }
    let data = bytes[21..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let m = Matrix::from_rows(&[vec![1.5, -0.0, f64::MIN_POSITIVE], vec![3.0, 1e308, -7.25]]).unwrap();
        write_matrix_binary(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..5], b"CDYN1");
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[13..21].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[21..29].try_into().unwrap()), 1.5);
        let back = read_matrix_binary(&p).unwrap();
        let bits = |m: &Matrix<f64>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_matrix_binary(&Matrix::zeros(2, 2), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_matrix_binary(&p), Err(Error::Format { .. })));
        std::fs::write(&p, b"CDYN2xxxxxxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(read_matrix_binary(&p), Err(Error::Format { .. })));
    }
}
