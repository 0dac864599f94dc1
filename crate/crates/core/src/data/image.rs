use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grayscale 2-d patch with intensities in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    rows: usize,
    cols: usize,
    pixels: Vec<f32>,
    pub spacing_mm: (f64, f64),
}

impl ImagePatch {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f32>, spacing_mm: (f64, f64)) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape("image patch must be non-empty".into()));
        }
        if pixels.len() != rows * cols {
            return Err(Error::Shape(format!("{} pixels for {rows}x{cols}", pixels.len())));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Domain(format!("pixel value {v} outside [-1, 1]")));
        }
        if spacing_mm.0 <= 0.0 || spacing_mm.1 <= 0.0 {
            return Err(Error::Domain("pixel spacing must be positive".into()));
        }
        Ok(Self { rows, cols, pixels, spacing_mm })
    }

    /// Clamps into `[-1, 1]` instead of rejecting out-of-range values.
    pub fn from_clamped(rows: usize, cols: usize, pixels: Vec<f32>, spacing_mm: (f64, f64)) -> Result<Self> {
        let pixels = pixels.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }).collect();
        Self::new(rows, cols, pixels, spacing_mm)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.cols + c]
    }
}

/// Binary mask on the same grid as its image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
}

impl SegMask {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != rows * cols {
            return Err(Error::Shape(format!("{} mask pixels for {rows}x{cols}", pixels.len())));
        }
        if pixels.iter().any(|&v| v > 1) {
            return Err(Error::Domain("mask values must be 0 or 1".into()));
        }
        Ok(Self { rows, cols, pixels })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, pixels: vec![0; rows * cols] }
    }

    /// Thresholds a soft mask: values `>= threshold` become 1.
    pub fn from_soft(rows: usize, cols: usize, soft: &[f32], threshold: f32) -> Result<Self> {
        Self::new(rows, cols, soft.iter().map(|&v| u8::from(v >= threshold)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().map(|&v| v as usize).sum()
    }

    pub fn same_grid(&self, image: &ImagePatch) -> bool {
        self.rows == image.rows && self.cols == image.cols
    }
}

/// Linear intensity window mapped onto `[-1, 1]` with clamping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub low: f64,
    pub high: f64,
}

impl Default for Window {
    /// Lung CT window in Hounsfield units.
    fn default() -> Self {
        Self { low: -1000.0, high: 400.0 }
    }
}

impl Window {
    pub fn apply(&self, v: f64) -> f32 {
        let t = (v - self.low) / (self.high - self.low);
        (2.0 * t.clamp(0.0, 1.0) - 1.0) as f32
    }
}

/// Bilinear resample of a row-major grid onto `out_rows x out_cols`, aligning
/// the outer pixel edges of both grids.
pub fn resample_bilinear(src: &[f32], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f32> {
    let sy = rows as f64 / out_rows as f64;
    let sx = cols as f64 / out_cols as f64;
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for r in 0..out_rows {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (rows - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let fy = (y - y0 as f64) as f32;
        for c in 0..out_cols {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (cols - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(cols - 1);
            let fx = (x - x0 as f64) as f32;
            let top = src[y0 * cols + x0] * (1.0 - fx) + src[y0 * cols + x1] * fx;
            let bot = src[y1 * cols + x0] * (1.0 - fx) + src[y1 * cols + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Nearest-neighbour resample for label grids.
pub fn resample_nearest<V: Copy>(src: &[V], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<V> {
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for r in 0..out_rows {
        let y = (((r as f64 + 0.5) * rows as f64 / out_rows as f64) as usize).min(rows - 1);
        for c in 0..out_cols {
            let x = (((c as f64 + 0.5) * cols as f64 / out_cols as f64) as usize).min(cols - 1);
            out.push(src[y * cols + x]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_maps_endpoints_and_clamps() {
        let w = Window::default();
        assert_eq!(w.apply(-1000.0), -1.0);
        assert_eq!(w.apply(400.0), 1.0);
        assert_eq!(w.apply(-300.0), 0.0);
        assert_eq!(w.apply(-3000.0), -1.0);
        assert_eq!(w.apply(3000.0), 1.0);
    }

    #[test]
    fn patch_rejects_out_of_range() {
        assert!(ImagePatch::new(1, 2, vec![0.0, 1.5], (1.0, 1.0)).is_err());
        let p = ImagePatch::from_clamped(1, 2, vec![0.0, 1.5], (1.0, 1.0)).unwrap();
        assert_eq!(p.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn resample_identity_and_constant() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(resample_bilinear(&src, 3, 4, 3, 4), src);
        assert_eq!(resample_nearest(&src, 3, 4, 3, 4), src);
        let c = vec![0.25f32; 20];
        assert!(resample_bilinear(&c, 4, 5, 7, 3).iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn soft_mask_threshold() {
        let m = SegMask::from_soft(1, 3, &[0.2, 0.5, 0.9], 0.5).unwrap();
        assert_eq!(m.pixels(), &[0, 1, 1]);
        assert_eq!(m.area(), 2);
    }
}
