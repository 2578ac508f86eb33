//! The `.ditm` matrix blob.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size        | field                            |
//! |--------|-------------|----------------------------------|
//! | 0      | 4           | magic `b"DITM"`                  |
//! | 4      | 4           | format version (`u32`, currently 1) |
//! | 8      | 4           | rows (`u32`)                     |
//! | 12     | 4           | cols (`u32`)                     |
//! | 16     | 8*rows*cols | entries as IEEE-754 `f64`, row-major |

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lowrank::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"DITM";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

pub fn encode(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<DenseMatrix> {
    let corrupt = |reason: String| Error::CorruptBlob {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = HEADER_LEN + 8 * rows * cols;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "{rows}x{cols} needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseMatrix::from_vec(rows, cols, data).map_err(|e| corrupt(e.to_string()))
}

/// Reads a blob and checks it against an expected content hash.
pub fn read_verified(path: &Path, expected_hash: u64) -> Result<DenseMatrix> {
    let bytes = fs::read(path)?;
    let actual = fnv1a64(&bytes);
    if actual != expected_hash {
        return Err(Error::CorruptBlob {
            path: path.to_path_buf(),
            reason: format!("content hash {actual:016x} != recorded {expected_hash:016x}"),
        });
    }
    decode(&bytes, path)
}

pub fn read(path: &Path) -> Result<DenseMatrix> {
    decode(&fs::read(path)?, path)
}

/// Writes `bytes` to `<path>.tmp` and fsyncs it. The caller renames.
pub(crate) fn write_temp(path: &Path, bytes: &[u8]) -> Result<std::path::PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("ditm.tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(tmp)
}

/// Writes a standalone blob with temp-then-rename.
pub fn write_atomic(path: &Path, m: &DenseMatrix) -> Result<u64> {
    let bytes = encode(m);
    let tmp = write_temp(path, &bytes)?;
    fs::rename(tmp, path)?;
    Ok(fnv1a64(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn header_layout_is_fixed() {
        let m = DenseMatrix::from_rows(&[&[1.0, -2.5]]).unwrap();
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"DITM");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[24..32], &(-2.5f64).to_le_bytes());
        assert_eq!(decode(&bytes, Path::new("x")).unwrap(), m);
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0]]).unwrap();
        let bytes = encode(&m);
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3], Path::new("x")),
            Err(Error::CorruptBlob { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, Path::new("x")).is_err());
    }
}
