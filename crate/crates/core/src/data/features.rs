//! Binary feature container: one file per video per modality.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AVSF"
//! 4       4     u32 format version (1)
//! 8       4     u32 frame count T
//! 12      4     u32 feature width D
//! 16      4     f32 frames per second
//! 20      4·T·D f32 values, row-major (frame by frame)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"AVSF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_features(frames: &Matrix, frame_rate: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * frames.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(frame_rate as f32).to_le_bytes());
    for &v in frames.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<(Matrix, f64)> {
    let bad = |reason: &str| Error::FeatureFormat {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(bad(&format!("unsupported version {}", word(4))));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let frame_rate = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
    if bytes.len() != HEADER_LEN + 4 * rows * cols {
        return Err(bad(&format!(
            "expected {} value bytes for {rows}x{cols}, found {}",
            4 * rows * cols,
            bytes.len() - HEADER_LEN
        )));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((Matrix::from_vec(rows, cols, data), frame_rate))
}

pub fn read_features(path: &Path) -> Result<(Matrix, f64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn write_features(path: &Path, frames: &Matrix, frame_rate: f64) -> Result<()> {
    fs::write(path, encode_features(frames, frame_rate)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_stable() {
        let m = Matrix::from_vec(1, 2, vec![1.0, -2.5]);
        let bytes = encode_features(&m, 2.0);
        assert_eq!(&bytes[..4], b"AVSF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        let (back, rate) = decode_features(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, m);
        assert_eq!(rate, 2.0);
    }

    #[test]
    fn rejects_truncated_payload() {
        let m = Matrix::zeros(2, 2);
        let mut bytes = encode_features(&m, 1.0);
        bytes.pop();
        assert!(matches!(
            decode_features(&bytes, Path::new("x")),
            Err(Error::FeatureFormat { .. })
        ));
    }
}
