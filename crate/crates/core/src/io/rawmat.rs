//! Headered raw float matrices.
//!
//! Layout: 4-byte magic, then `version`, `rows`, `cols` as little-endian
//! `u32`, followed by `rows * cols` little-endian `f32` values in row-major
//! order. The same layout is used for visual streams (`AVSV`), feature caches
//! (`AVSF`), gate dumps (`AVSG`) and masks (`AVSM`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Magic {
    Visual,
    Feature,
    Gate,
    Mask,
}

impl Magic {
    pub fn bytes(self) -> [u8; 4] {
        match self {
            Magic::Visual => *b"AVSV",
            Magic::Feature => *b"AVSF",
            Magic::Gate => *b"AVSG",
            Magic::Mask => *b"AVSM",
        }
    }
}

pub fn encode(magic: Magic, m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(&magic.bytes());
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(magic: Magic, bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if bytes[0..4] != magic.bytes() {
        return Err(Error::format(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[0..4]),
                String::from_utf8_lossy(&magic.bytes())
            ),
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload has {} bytes, header says {rows}x{cols}",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn write(path: &Path, magic: Magic, m: &Matrix) -> Result<()> {
    super::write_atomic(path, &encode(magic, m))
}

pub fn read(path: &Path, magic: Magic) -> Result<Matrix> {
    let bytes = std::fs::read(path)?;
    decode(magic, &bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = encode(Magic::Visual, &m);
        assert_eq!(&b[0..4], b"AVSV");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &3u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 16 + 24);
    }

    #[test]
    fn wrong_magic_rejected() {
        let m = Matrix::zeros(1, 1);
        let b = encode(Magic::Gate, &m);
        assert!(decode(Magic::Mask, &b, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6)
                .collect();
            let m = Matrix::from_vec(rows, cols, data);
            let back = decode(Magic::Feature, &encode(Magic::Feature, &m), Path::new("x")).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
