//! 3-d grids, volume-of-interest cropping and nodule slice selection.
//!
//! Axes are `(z, y, x)`, slices are axial (`z`). Physical position of voxel
//! `i` along an axis is `i * spacing`.

use super::image::{ImagePatch, SegMask};
use crate::error::{Error, Result};

/// Dense 3-d grid with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<V> {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub data: Vec<V>,
}

pub type Volume = Grid3<f32>;
pub type Mask3 = Grid3<u8>;

impl<V: Copy> Grid3<V> {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<V>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} voxels for dims {dims:?}", data.len())));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Domain(format!("spacing {spacing_mm:?} must be positive")));
        }
        Ok(Self { dims, spacing_mm, data })
    }

    pub fn filled(dims: [usize; 3], spacing_mm: [f64; 3], value: V) -> Self {
        Self { dims, spacing_mm, data: vec![value; dims.iter().product()] }
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> V {
        self.data[self.index(z, y, x)]
    }

    pub fn slice(&self, z: usize) -> &[V] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[z * plane..(z + 1) * plane]
    }

    pub fn same_geometry<W>(&self, other: &Grid3<W>) -> bool {
        self.dims == other.dims && self.spacing_mm == other.spacing_mm
    }

    /// Copies the box starting at `start` with extent `size` (voxels).
    pub fn crop(&self, start: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if start[a] + size[a] > self.dims[a] {
                return Err(Error::Bounds(format!(
                    "crop {start:?}+{size:?} exceeds volume {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in start[0]..start[0] + size[0] {
            for y in start[1]..start[1] + size[1] {
                let i = self.index(z, y, start[2]);
                data.extend_from_slice(&self.data[i..i + size[2]]);
            }
        }
        Ok(Self { dims: size, spacing_mm: self.spacing_mm, data })
    }
}

/// Where a VOI of `size_mm` around `center_mm` lands in voxel space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoiPlacement {
    pub start: [usize; 3],
    pub size: [usize; 3],
}

/// Resolves the voxel box of a cubic VOI. With `clamp`, a box overhanging the
/// volume is shifted inside; otherwise that is a bounds error. A center
/// outside the volume is always an error.
pub fn place_voi(dims: [usize; 3], spacing_mm: [f64; 3], center_mm: [f64; 3], size_mm: f64, clamp: bool) -> Result<VoiPlacement> {
    if !(size_mm > 0.0) {
        return Err(Error::Domain(format!("VOI size {size_mm} must be positive")));
    }
    let mut start = [0usize; 3];
    let mut size = [0usize; 3];
    for a in 0..3 {
        let extent = dims[a] as f64 * spacing_mm[a];
        let c = center_mm[a];
        if !(0.0..extent).contains(&c) {
            return Err(Error::Bounds(format!("center {center_mm:?} mm outside volume extent on axis {a}")));
        }
        let n = ((size_mm / spacing_mm[a]).round() as usize).max(1);
        if n > dims[a] {
            return Err(Error::Bounds(format!(
                "VOI of {size_mm} mm needs {n} voxels on axis {a}, volume has {}",
                dims[a]
            )));
        }
        let s = (c / spacing_mm[a] - n as f64 / 2.0).round() as i64;
        let s = if s < 0 || s as usize + n > dims[a] {
            if !clamp {
                return Err(Error::Bounds(format!(
                    "VOI around {center_mm:?} mm overhangs the volume on axis {a}"
                )));
            }
            s.clamp(0, (dims[a] - n) as i64)
        } else {
            s
        };
        start[a] = s as usize;
        size[a] = n;
    }
    Ok(VoiPlacement { start, size })
}

/// Crops a cubic `size_mm` VOI around `center_mm` at native resolution.
pub fn extract_voi<V: Copy>(volume: &Grid3<V>, center_mm: [f64; 3], size_mm: f64, clamp: bool) -> Result<Grid3<V>> {
    let p = place_voi(volume.dims, volume.spacing_mm, center_mm, size_mm, clamp)?;
    volume.crop(p.start, p.size)
}

/// Axial slices that contain at least one nodule voxel, as aligned
/// image/mask pairs together with their slice index. `voi` must already be
/// intensity-normalized to `[-1, 1]`.
pub fn sample_nodule_slices(voi: &Volume, mask: &Mask3) -> Result<Vec<(usize, ImagePatch, SegMask)>> {
    if voi.dims != mask.dims {
        return Err(Error::Shape(format!("mask dims {:?} differ from VOI {:?}", mask.dims, voi.dims)));
    }
    let [nz, ny, nx] = voi.dims;
    let spacing = (voi.spacing_mm[1], voi.spacing_mm[2]);
    let mut out = Vec::new();
    for z in 0..nz {
        let m = mask.slice(z);
        if m.iter().all(|&v| v == 0) {
            continue;
        }
        let img = ImagePatch::new(ny, nx, voi.slice(z).to_vec(), spacing)?;
        let seg = SegMask::new(ny, nx, m.iter().map(|&v| u8::from(v > 0)).collect())?;
        out.push((z, img, seg));
    }
    Ok(out)
}
