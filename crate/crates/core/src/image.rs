//! Binary PGM (P5, maxval 255) output for weight maps and digits.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image, one byte per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Pixel intensities in `[0, 1]` (clamped), scaled to `0..=255`.
    pub fn from_unit(values: &[f64], width: usize, height: usize) -> Result<Self> {
        check_dims(values.len(), width, height)?;
        Ok(GrayImage {
            width,
            height,
            pixels: values.iter().map(|&v| to_byte(v)).collect(),
        })
    }

    /// Min–max normalized rendering; a constant input maps to mid-gray.
    pub fn min_max(values: &[f64], width: usize, height: usize) -> Result<Self> {
        check_dims(values.len(), width, height)?;
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let pixels = values
            .iter()
            .map(|&v| to_byte(if span > 0.0 { (v - lo) / span } else { 0.5 }))
            .collect();
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_pgm(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

fn check_dims(len: usize, width: usize, height: usize) -> Result<()> {
    if width * height != len || len == 0 {
        return Err(Error::shape("GrayImage", (height, width), (len, 1)));
    }
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
