//! IDX (MNIST-family) reader with transparent gzip support.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array2;

use crate::error::{IngestError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Header<'a> {
    dims: Vec<usize>,
    body: &'a [u8],
}

fn parse_header<'a>(bytes: &'a [u8], path: &Path, magic: u32, ndims: usize) -> Result<Header<'a>> {
    let name = path.display().to_string();
    let header_len = 4 * (1 + ndims);
    if bytes.len() < 4 {
        return Err(IngestError::Truncated { path: name, needed: 4, available: bytes.len() }.into());
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let found = word(0);
    if found != magic {
        return Err(IngestError::BadMagic { path: name, expected: magic, found }.into());
    }
    if bytes.len() < header_len {
        return Err(IngestError::Truncated { path: name, needed: header_len, available: bytes.len() }.into());
    }
    let dims: Vec<usize> = (1..=ndims).map(|i| word(i) as usize).collect();
    let needed = header_len + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(IngestError::Truncated { path: name, needed, available: bytes.len() }.into());
    }
    Ok(Header { dims, body: &bytes[header_len..needed] })
}

/// Images as an `n × (rows·cols)` matrix, pixels scaled to `[0, 1]`.
pub fn read_images(path: &Path) -> Result<Array2<f64>> {
    let bytes = read_maybe_gzip(path)?;
    let h = parse_header(&bytes, path, IMAGES_MAGIC, 3)?;
    let (n, d) = (h.dims[0], h.dims[1] * h.dims[2]);
    Ok(Array2::from_shape_vec((n, d), h.body.iter().map(|&b| b as f64 / 255.0).collect()).unwrap())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_maybe_gzip(path)?;
    let h = parse_header(&bytes, path, LABELS_MAGIC, 1)?;
    Ok(h.body.iter().map(|&b| b as usize).collect())
}

/// Encodes images (row-major `rows × cols` bytes each) as an IDX document.
pub fn encode_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for w in [IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
