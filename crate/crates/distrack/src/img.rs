//! In-memory image type and PNG round-trips.
//!
//! Frames are stored as `(H, W, 3)` u8 arrays; the compositor and the
//! network convert to `f64` in `[0, 1]` at the point of use.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// An RGB frame, row-major `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub data: Array3<u8>,
}

impl Image {
    pub fn new(data: Array3<u8>) -> Self {
        Image { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Per-channel mean in `[0, 1]`.
    pub fn channel_means(&self) -> [f64; 3] {
        let (h, w, _) = self.data.dim();
        let n = (h * w) as f64;
        let mut sums = [0.0f64; 3];
        for row in 0..h {
            for col in 0..w {
                for ch in 0..3 {
                    sums[ch] += self.data[[row, col, ch]] as f64;
                }
            }
        }
        sums.map(|s| s / (n * 255.0))
    }

    /// Quantize a `[0, 1]` float image to u8, clamping out-of-range values.
    pub fn from_float(float: &Array3<f64>) -> Self {
        let data = float.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        Image { data }
    }

    pub fn to_float(&self) -> Array3<f64> {
        self.data.mapv(|v| v as f64 / 255.0)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, _) = self.data.dim();
        let mut img = RgbImage::new(w as u32, h as u32);
        for row in 0..h {
            for col in 0..w {
                let px = [
                    self.data[[row, col, 0]],
                    self.data[[row, col, 1]],
                    self.data[[row, col, 2]],
                ];
                img.put_pixel(col as u32, row as u32, image::Rgb(px));
            }
        }
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for ch in 0..3 {
                data[[y as usize, x as usize, ch]] = px.0[ch];
            }
        }
        Ok(Image { data })
    }

    /// Bilinear resize to `(height, width)`.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let float = self.to_float();
        let (sh, sw, _) = float.dim();
        let mut out = Array3::zeros((height, width, 3));
        for row in 0..height {
            for col in 0..width {
                // Map destination pixel center into source pixel-center space.
                let sy = (row as f64 + 0.5) * sh as f64 / height as f64 - 0.5;
                let sx = (col as f64 + 0.5) * sw as f64 / width as f64 - 0.5;
                let sample = bilinear_sample(&float, sy, sx);
                for ch in 0..3 {
                    out[[row, col, ch]] = sample[ch];
                }
            }
        }
        Image::from_float(&out)
    }
}

/// Sample a float image at continuous pixel-center coordinates,
/// clamping to the border.
pub fn bilinear_sample(img: &Array3<f64>, y: f64, x: f64) -> [f64; 3] {
    let (h, w, _) = img.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let clamp = |v: f64, hi: usize| -> usize { (v.max(0.0) as usize).min(hi - 1) };
    let xi0 = clamp(x0, w);
    let xi1 = clamp(x0 + 1.0, w);
    let yi0 = clamp(y0, h);
    let yi1 = clamp(y0 + 1.0, h);
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let v00 = img[[yi0, xi0, ch]];
        let v01 = img[[yi0, xi1, ch]];
        let v10 = img[[yi1, xi0, ch]];
        let v11 = img[[yi1, xi1, ch]];
        out[ch] = v00 * (1.0 - fx) * (1.0 - fy)
            + v01 * fx * (1.0 - fy)
            + v10 * (1.0 - fx) * fy
            + v11 * fx * fy;
    }
    out
}

/// Save a 0/1 mask as a 0/255 grayscale PNG.
pub fn save_mask_png(grid: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = grid.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let v = if grid[[row, col]] > 0 { 255 } else { 0 };
            img.put_pixel(col as u32, row as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Load a 0/255 mask PNG back to a 0/1 grid.
pub fn load_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut grid = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        grid[[y as usize, x as usize]] = if px.0[0] >= 128 { 1 } else { 0 };
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip() {
        let mut f = Array3::zeros((4, 5, 3));
        f[[0, 0, 0]] = 1.0;
        f[[3, 4, 2]] = 0.5;
        f[[1, 1, 1]] = -0.3; // clamps to 0
        let img = Image::from_float(&f);
        assert_eq!(img.data[[0, 0, 0]], 255);
        assert_eq!(img.data[[3, 4, 2]], 128);
        assert_eq!(img.data[[1, 1, 1]], 0);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.png");
        let mut img = Image::zeros(6, 7);
        img.data[[2, 3, 0]] = 200;
        img.data[[5, 6, 2]] = 13;
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mut grid = Array2::zeros((5, 4));
        grid[[1, 2]] = 1;
        grid[[4, 0]] = 1;
        save_mask_png(&grid, &path).unwrap();
        let back = load_mask_png(&path).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn channel_means_uniform() {
        let mut img = Image::zeros(2, 2);
        img.data.fill(51); // 0.2 of 255
        let means = img.channel_means();
        for m in means {
            assert!((m - 0.2).abs() < 1e-9);
        }
    }
}
