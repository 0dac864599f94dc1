//! Background center selection by distance to the lung-mask boundary.

use rand::Rng;

use super::image::ImagePatch;
use super::volume::Mask3;
use crate::distance::distance_to_boundary;
use crate::error::{Error, Result};

/// Nodule-free background patch and how deep inside the lung its center sits.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundPatch {
    pub image: ImagePatch,
    pub center_distance_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundCenter {
    /// Voxel index `(z, y, x)`.
    pub index: [usize; 3],
    pub distance_mm: f64,
}

impl BackgroundCenter {
    pub fn position_mm(&self, spacing_mm: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.index[a] as f64 * spacing_mm[a])
    }
}

/// Draws `n` distinct voxels, uniformly among those whose distance to the
/// boundary of `lung \ nodule` lies in `[d_min_mm, d_max_mm]`.
pub fn sample_background_centers<R: Rng + ?Sized>(
    lung_mask: &Mask3,
    nodule_mask: Option<&Mask3>,
    d_min_mm: f64,
    d_max_mm: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<BackgroundCenter>> {
    if d_min_mm > d_max_mm {
        return Err(Error::Config(format!("d_min {d_min_mm} exceeds d_max {d_max_mm}")));
    }
    if let Some(nm) = nodule_mask {
        if !nm.same_geometry(lung_mask) {
            return Err(Error::Shape("nodule mask geometry differs from lung mask".into()));
        }
    }
    let eligible: Vec<bool> = lung_mask
        .data
        .iter()
        .enumerate()
        .map(|(i, &l)| l > 0 && nodule_mask.map_or(true, |m| m.data[i] == 0))
        .collect();
    if !eligible.iter().any(|&v| v) {
        return Err(Error::Sampling("lung mask is empty after excluding nodules".into()));
    }
    let dist = distance_to_boundary(&eligible, &lung_mask.dims, &lung_mask.spacing_mm);
    let candidates: Vec<usize> = dist
        .iter()
        .enumerate()
        .filter(|(i, &d)| eligible[*i] && d >= d_min_mm && d <= d_max_mm)
        .map(|(i, _)| i)
        .collect();
    if candidates.len() < n {
        let max = dist.iter().copied().fold(0.0, f64::max);
        return Err(Error::Sampling(format!(
            "need {n} centers at {d_min_mm}-{d_max_mm} mm from the mask boundary, only {} voxels qualify (max distance {max:.2} mm)",
            candidates.len()
        )));
    }
    let [_, ny, nx] = lung_mask.dims;
    let picks = rand::seq::index::sample(rng, candidates.len(), n);
    Ok(picks
        .iter()
        .map(|k| {
            let lin = candidates[k];
            BackgroundCenter { index: [lin / (ny * nx), (lin / nx) % ny, lin % nx], distance_mm: dist[lin] }
        })
        .collect())
}
