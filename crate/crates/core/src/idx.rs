//! Reader for the big-endian IDX format used by MNIST-style datasets.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated file: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

/// Decoded images: each row is `rows * cols` pixels scaled to `[0, 1]`
/// followed by a constant-1 bias feature.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

impl IdxImages {
    /// Feature width including the appended bias feature.
    pub fn feature_dim(&self) -> usize {
        self.rows * self.cols + 1
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            need: at + 4,
            have: bytes.len(),
        })
}

fn expect_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { found, expected });
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    expect_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = rows * cols;
    let need = 16 + count * pixels;
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    let data = bytes[16..need]
        .chunks_exact(pixels.max(1))
        .take(count)
        .map(|img| {
            let mut row: Vec<f64> = img.iter().map(|&p| f64::from(p) / 255.0).collect();
            row.push(1.0);
            row
        })
        .collect();
    Ok(IdxImages { rows, cols, data })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    expect_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    Ok(bytes[8..need].to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a matching image/label file pair.
pub fn load_pair(images: &Path, labels: &Path) -> Result<(IdxImages, Vec<u8>), IdxError> {
    let imgs = parse_images(&read_file(images)?)?;
    let lbls = parse_labels(&read_file(labels)?)?;
    if imgs.data.len() != lbls.len() {
        return Err(IdxError::CountMismatch {
            images: imgs.data.len(),
            labels: lbls.len(),
        });
    }
    Ok((imgs, lbls))
}

/// Encodes images in IDX form. Used to produce fixtures.
pub fn encode_images(rows: usize, cols: usize, pixels: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in pixels {
        assert_eq!(img.len(), rows * cols);
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_scaled_with_bias() {
        let bytes = encode_images(1, 2, &[vec![0, 255], vec![51, 102]]);
        let imgs = parse_images(&bytes).unwrap();
        assert_eq!(imgs.feature_dim(), 3);
        assert_eq!(imgs.data[0], vec![0.0, 1.0, 1.0]);
        assert_eq!(imgs.data[1], vec![0.2, 0.4, 1.0]);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let labels = encode_labels(&[1, 2]);
        assert!(matches!(parse_images(&labels), Err(IdxError::BadMagic { .. })));
        let imgs = encode_images(1, 1, &[vec![3]]);
        assert!(matches!(parse_labels(&imgs), Err(IdxError::BadMagic { .. })));
    }

    #[test]
    fn truncation_is_rejected() {
        let mut bytes = encode_images(2, 2, &[vec![1, 2, 3, 4]]);
        bytes.pop();
        assert!(matches!(parse_images(&bytes), Err(IdxError::Truncated { .. })));
        assert!(matches!(parse_labels(&[0, 0]), Err(IdxError::Truncated { .. })));
    }
}
