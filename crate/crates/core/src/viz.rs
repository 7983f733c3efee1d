//! Grayscale PGM output for attention maps and image channels.

use std::io::Write;

use crate::error::{arg_err, Result};

/// Binary PGM (`P5`) bytes for a `height × width` row-major map, min-max
/// scaled to `0..=255`. A constant map becomes all zeros.
pub fn pgm_bytes(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width || values.is_empty() {
        return Err(arg_err("pgm_bytes", "map size does not match dimensions"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(arg_err("pgm_bytes", "map contains non-finite values"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm<W: Write>(mut w: W, values: &[f64], height: usize, width: usize) -> Result<()> {
    w.write_all(&pgm_bytes(values, height, width)?)?;
    Ok(())
}

/// Nearest-neighbour upscale by an integer factor.
pub fn upscale(values: &[f64], height: usize, width: usize, factor: usize) -> Vec<f64> {
    let f = factor.max(1);
    let mut out = Vec::with_capacity(values.len() * f * f);
    for y in 0..height * f {
        for x in 0..width * f {
            out.push(values[(y / f) * width + x / f]);
        }
    }
    out
}
