//! Convolution lowering kernels (im2col / col2im) and small helpers.

use crate::real::Real;

/// Geometry of a square-kernel 2-d convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the lowered matrix: `in_channels * kernel * kernel`.
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Lowers one CHW image into a `(C*k*k) x (Ho*Wo)` matrix.
pub fn im2col<T: Real>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    debug_assert_eq!(col.len(), g.col_rows() * ho * wo);
    let (h, w) = (g.height as isize, g.width as isize);
    let (s, p) = (g.stride as isize, g.pad as isize);
    for c in 0..g.in_channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - p;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    if s == 1 {
                        // contiguous interior run
                        let x0 = kx as isize - p;
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize + x0;
                            *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a lowered matrix back, accumulating into `img`.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let (h, w) = (g.height as isize, g.width as isize);
    let (s, p) = (g.stride as isize, g.pad as isize);
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom { in_channels: 2, height: 5, width: 4, kernel: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn output_geometry() {
        let g = ConvGeom { in_channels: 1, height: 64, width: 64, kernel: 3, stride: 2, pad: 1 };
        assert_eq!((g.out_height(), g.out_width()), (32, 32));
        let g = ConvGeom { stride: 1, ..g };
        assert_eq!((g.out_height(), g.out_width()), (64, 64));
    }
}
