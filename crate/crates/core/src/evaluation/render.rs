//! Lossless PNG figures.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// One grid cell: row-major pixels on the `[-1, 1]` display scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
}

impl Tile {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != rows * cols {
            return Err(Error::Shape(format!("{} pixels for a {rows}x{cols} tile", pixels.len())));
        }
        Ok(Self { rows, cols, pixels })
    }

    /// Maps `[0, 1]` values (masks, weight maps) onto the display scale.
    pub fn unit(rows: usize, cols: usize, values: &[f32]) -> Result<Self> {
        Self::new(rows, cols, values.iter().map(|v| v * 2.0 - 1.0).collect())
    }
}

fn save_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Row-major tiling with 1-px white separators. All tiles share one size;
/// values outside `[-1, 1]` are clamped with a warning. Returns
/// `(height, width)` of the canvas.
pub fn render_grid(rows: &[Vec<Tile>], path: &Path) -> Result<(u32, u32)> {
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| Error::EmptyTable("image grid is empty".into()))?;
    let (th, tw) = (first.rows, first.cols);
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let height = rows.len() * th + rows.len() - 1;
    let width = ncols * tw + ncols - 1;
    let mut canvas = GrayImage::from_pixel(width as u32, height as u32, Luma([255]));
    let mut clamped = 0usize;
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if tile.rows != th || tile.cols != tw {
                return Err(Error::Shape(format!("tile {r},{c} is {}x{}, grid uses {th}x{tw}", tile.rows, tile.cols)));
            }
            let (y0, x0) = (r * (th + 1), c * (tw + 1));
            for y in 0..th {
                for x in 0..tw {
                    let v = tile.pixels[y * tw + x];
                    if !(-1.0..=1.0).contains(&v) {
                        clamped += 1;
                    }
                    let g = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                    canvas.put_pixel((x0 + x) as u32, (y0 + y) as u32, Luma([g]));
                }
            }
        }
    }
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} pixel values to [-1, 1]", path.display());
    }
    canvas.save(path).map_err(|e| save_err(path, e))?;
    Ok((height as u32, width as u32))
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// Scatter plot of 2-D coordinates, coloured by label.
pub fn render_scatter(coords: &[[f64; 2]], labels: Option<&[usize]>, side: u32, path: &Path) -> Result<()> {
    if coords.is_empty() {
        return Err(Error::EmptyTable("no points to plot".into()));
    }
    let mut img = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in coords {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let margin = 8.0;
    let span = side as f64 - 2.0 * margin;
    for (i, p) in coords.iter().enumerate() {
        let pos = |a: usize| margin + if hi[a] > lo[a] { (p[a] - lo[a]) / (hi[a] - lo[a]) * span } else { span / 2.0 };
        let (cx, cy) = (pos(0) as i64, (side as f64 - pos(1)) as i64);
        let colour = Rgb(PALETTE[labels.map_or(0, |l| l[i]) % PALETTE.len()]);
        for dy in -2..=2 {
            for dx in -2..=2 {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as u32) < side && (y as u32) < side {
                    img.put_pixel(x as u32, y as u32, colour);
                }
            }
        }
    }
    img.save(path).map_err(|e| save_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_three_canvas() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tile::new(64, 64, vec![0.0; 64 * 64]).unwrap();
        let rows = vec![vec![t.clone(), t.clone(), t.clone()], vec![t.clone(), t.clone(), t]];
        let path = dir.path().join("g.png");
        assert_eq!(render_grid(&rows, &path).unwrap(), (129, 194));
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (194, 129));
        assert_eq!(img.get_pixel(64, 10).0, [255]);
        assert_eq!(img.get_pixel(10, 10).0, [128]);
    }

    #[test]
    fn empty_grid_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(render_grid(&[], &dir.path().join("e.png")).is_err());
    }

    #[test]
    fn out_of_range_values_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        render_grid(&[vec![Tile::new(1, 2, vec![-3.0, 5.0]).unwrap()]], &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!((img.get_pixel(0, 0).0, img.get_pixel(1, 0).0), ([0], [255]));
    }
}
