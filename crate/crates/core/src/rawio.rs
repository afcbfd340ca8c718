//! Raw grid files and PNG export.
//!
//! A raw grid file is one UTF-8 JSON header line followed by a little-endian
//! `f32` payload:
//!
//! ```text
//! {"dims":[D,H,W],"spacing":[sx,sy,sz],"origin":[ox,oy,oz],"dtype":"f32le"}\n
//! <D*H*W little-endian f32, D-major then row-major>
//! ```
//!
//! Volumes, DRRs (`dims = [1,H,W]`) and exported slices share this layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: String,
}

impl RawHeader {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        RawHeader {
            dims,
            spacing,
            origin,
            dtype: DTYPE_F32LE.to_string(),
        }
    }

    /// Header for a single 2D image of `rows x cols` unit-spaced pixels.
    pub fn image(rows: usize, cols: usize) -> Self {
        Self::new([1, rows, cols], [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn encode(header: &RawHeader, data: &[f32]) -> Result<Vec<u8>> {
    if header.len() != data.len() {
        return Err(Error::param(format!(
            "header describes {} values but {} were supplied",
            header.len(),
            data.len()
        )));
    }
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(RawHeader, Vec<f32>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header: RawHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.dtype != DTYPE_F32LE {
        return Err(Error::Format(format!("unsupported dtype `{}`", header.dtype)));
    }
    let payload = &bytes[nl + 1..];
    let expected = header.len() * 4;
    if payload.len() != expected {
        return Err(Error::PayloadSize {
            expected,
            actual: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value at element {i}")));
    }
    Ok((header, data))
}

pub fn write_raw(path: &Path, header: &RawHeader, data: &[f32]) -> Result<()> {
    let bytes = encode(header, data)?;
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn read_raw(path: &Path) -> Result<(RawHeader, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}

/// Min-max scales `data` to 8 bits. A constant image maps to black.
pub fn to_gray8(data: &[f32]) -> Vec<u8> {
    let (lo, hi) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    data.iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn write_png(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    if rows * cols != data.len() {
        return Err(Error::param("image size does not match data length"));
    }
    let img = image::GrayImage::from_raw(cols as u32, rows as u32, to_gray8(data))
        .ok_or_else(|| Error::param("image buffer too small"))?;
    img.save(path)?;
    Ok(())
}

/// Writes panels side by side, each min-max scaled on its own.
pub fn write_png_panels(path: &Path, rows: usize, cols: usize, panels: &[&[f32]]) -> Result<()> {
    let total = cols * panels.len();
    let mut buf = vec![0u8; rows * total];
    for (p, panel) in panels.iter().enumerate() {
        if panel.len() != rows * cols {
            return Err(Error::param("panel size does not match"));
        }
        let g = to_gray8(panel);
        for r in 0..rows {
            buf[r * total + p * cols..r * total + (p + 1) * cols]
                .copy_from_slice(&g[r * cols..(r + 1) * cols]);
        }
    }
    let img = image::GrayImage::from_raw(total as u32, rows as u32, buf)
        .ok_or_else(|| Error::param("image buffer too small"))?;
    img.save(path)?;
    Ok(())
}
