//! Binary PPM (P6) and PGM (P5) export of normalized image rows.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Maps a `[0, 1]` intensity to a byte, clamping out-of-range values.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes one de-normalized CHW row as a binary PNM image.
pub fn encode_pnm(row: &[f64], channels: usize, height: usize, width: usize) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::format("channels", format!("PNM export needs 1 or 3 channels, got {c}"))),
    };
    let plane = height * width;
    if row.len() != channels * plane {
        return Err(Error::format(
            "shape",
            format!("row of {} values is not {channels}x{height}x{width}", row.len()),
        ));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.reserve(row.len());
    for p in 0..plane {
        for c in 0..channels {
            out.push(quantize(row[c * plane + p]));
        }
    }
    Ok(out)
}

/// Writes each row of normalized `x` as `{index:05}.ppm` (or `.pgm`) under
/// `dir` and returns the paths in row order.
pub fn export_images<T: Real>(x: &Tensor<T>, norm: &Normalization, dir: &Path) -> Result<Vec<PathBuf>> {
    let shape = norm.shape;
    if !(shape.channels == 1 || shape.channels == 3) {
        return Err(Error::format(
            "channels",
            format!("PNM export needs 1 or 3 channels, got {}", shape.channels),
        ));
    }
    let raw = norm.invert(x)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = if shape.channels == 1 { "pgm" } else { "ppm" };
    (0..raw.rows())
        .map(|i| {
            let row: Vec<f64> = raw.row(i).iter().map(|v| v.to_f64()).collect();
            let bytes = encode_pnm(&row, shape.channels, shape.height, shape.width)?;
            let path = dir.join(format!("{i:05}.{ext}"));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
