//! Background region for the reconstruction term.

use radiogan_tensor::{Real, Tensor};

use crate::distance::squared_edt;
use crate::error::{Error, Result};

/// Binary erosion of `1 - (mask >= threshold)` with a disk of `radius_px`.
///
/// A pixel survives iff no nodule pixel lies within Euclidean distance
/// `radius_px`. Everything beyond the image border counts as background.
pub fn erode_background(mask: &[f32], rows: usize, cols: usize, radius_px: u32, threshold: f32) -> Result<Vec<u8>> {
    if mask.len() != rows * cols {
        return Err(Error::Shape(format!("{} mask pixels for {rows}x{cols}", mask.len())));
    }
    let nodule: Vec<bool> = mask.iter().map(|&v| v >= threshold).collect();
    if radius_px == 0 {
        return Ok(nodule.iter().map(|&n| u8::from(!n)).collect());
    }
    let d2 = squared_edt(&nodule, &[rows, cols], &[1.0, 1.0]);
    let r2 = (radius_px as f64).powi(2);
    Ok(d2.iter().map(|&d| u8::from(d > r2)).collect())
}

/// Eroded background regions for a `(N, 1, H, W)` soft-mask batch, as a
/// tensor of 0/1 values of the same shape.
pub fn erode_background_batch<T: Real>(masks: &Tensor<T>, radius_px: u32, threshold: f32) -> Result<Tensor<T>> {
    let (n, c, h, w) = masks.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("mask batch has {c} channels")));
    }
    let mut out = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let m: Vec<f32> = masks.data()[i * h * w..(i + 1) * h * w].iter().map(|v| v.as_f64() as f32).collect();
        out.extend(erode_background(&m, h, w, radius_px, threshold)?.into_iter().map(|b| T::lit(b as f64)));
    }
    Ok(Tensor::new(masks.shape(), out)?)
}
