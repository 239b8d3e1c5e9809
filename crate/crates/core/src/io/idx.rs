//! IDX files: big-endian magic, dimension sizes, then raw unsigned bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded IDX payload: dimension sizes and row-major bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or(Error::UnexpectedEof)?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<IdxArray> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected_magic {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: expected_magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let len: usize = dims.iter().product();
    let data = bytes.get(start..start + len).ok_or(Error::UnexpectedEof)?;
    Ok(IdxArray {
        dims,
        data: data.to_vec(),
    })
}

pub fn read_idx(path: &Path, expected_magic: u32) -> Result<IdxArray> {
    parse_idx(&fs::read(path)?, expected_magic, path)
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&(0x0800u32 | dims.len() as u32).to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

pub fn write_idx(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_idx(dims, data))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let bytes = encode_idx(&[2, 2, 3], &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let a = parse_idx(&bytes, IMAGES_MAGIC, Path::new("x")).unwrap();
        assert_eq!(a.dims, vec![2, 2, 3]);
        assert_eq!(a.data[11], 12);
    }

    #[test]
    fn truncated_and_wrong_magic() {
        let bytes = encode_idx(&[3], &[1, 2, 3]);
        assert!(matches!(
            parse_idx(&bytes[..6], LABELS_MAGIC, Path::new("x")),
            Err(Error::UnexpectedEof)
        ));
        assert!(matches!(
            parse_idx(&bytes[..9], LABELS_MAGIC, Path::new("x")),
            Err(Error::UnexpectedEof)
        ));
        assert!(matches!(
            parse_idx(&bytes, IMAGES_MAGIC, Path::new("x")),
            Err(Error::IdxMagic { .. })
        ));
    }
}
