//! Reader for the IDX format used by MNIST and EMNIST (optionally gzipped).

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{DataError, Result};

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        return Ok(out);
    }
    Ok(raw)
}

fn bad(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Format { path: path.display().to_string(), reason: reason.into() }
}

fn parse(path: &Path, bytes: &[u8], ndim: u8) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad(path, "bad magic"));
    }
    if bytes[2] != 0x08 {
        return Err(bad(path, format!("element type {:#x} is not unsigned byte", bytes[2])));
    }
    if bytes[3] != ndim {
        return Err(bad(path, format!("expected {ndim} dimensions, found {}", bytes[3])));
    }
    let head = 4 + 4 * ndim as usize;
    if bytes.len() < head {
        return Err(bad(path, "truncated header"));
    }
    let dims: Vec<usize> =
        bytes[4..head].chunks_exact(4).map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize).collect();
    let n: usize = dims.iter().product();
    let body = &bytes[head..];
    if body.len() != n {
        return Err(bad(path, format!("expected {n} data bytes, found {}", body.len())));
    }
    Ok((dims, body.to_vec()))
}

/// Returns `(count, rows, cols, pixels)` with pixels in row-major order.
pub fn read_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (dims, data) = parse(path, &read_all(path)?, 3)?;
    Ok((dims[0], dims[1], dims[2], data))
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    Ok(parse(path, &read_all(path)?, 1)?.1)
}

pub fn write_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols);
    let mut out = vec![0, 0, 8, 3];
    for d in [n, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = vec![0, 0, 8, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}
