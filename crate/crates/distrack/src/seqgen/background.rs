//! Background imagery for composited sequences: either a procedural
//! animated color field or a directory of user-provided images.

use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::img::Image;

#[derive(Debug, Clone)]
pub enum BackgroundSource {
    /// Deterministic animated color field; no assets required.
    Procedural,
    /// A directory whose entries are images (one static background each)
    /// or subdirectories of per-frame images.
    Directory(PathBuf),
}

impl BackgroundSource {
    /// Background frame `frame_index` for stream `background_id`, sized
    /// `(height, width)`, as a `[0, 1]` float image.
    pub fn frame(
        &self,
        background_id: u32,
        frame_index: u32,
        height: usize,
        width: usize,
    ) -> Result<Array3<f64>> {
        match self {
            BackgroundSource::Procedural => {
                Ok(procedural_frame(background_id, frame_index, height, width))
            }
            BackgroundSource::Directory(dir) => {
                directory_frame(dir, background_id, frame_index, height, width)
            }
        }
    }
}

/// Smooth multi-sine color field, drifting slowly over time. Values stay in
/// `[0.1, 0.9]` so composited highlights cannot saturate the whole frame.
fn procedural_frame(id: u32, frame_index: u32, height: usize, width: usize) -> Array3<f64> {
    let mut out = Array3::zeros((height, width, 3));
    let t = frame_index as f64;
    // Per-id wave parameters from a small integer hash.
    let h = |k: u32| -> f64 {
        let mut v = id.wrapping_mul(0x9E37_79B9).wrapping_add(k.wrapping_mul(0x85EB_CA6B));
        v ^= v >> 13;
        v = v.wrapping_mul(0xC2B2_AE35);
        (v % 10_000) as f64 / 10_000.0
    };
    let fx = [0.02 + 0.05 * h(1), 0.015 + 0.04 * h(2), 0.01 + 0.03 * h(3)];
    let fy = [0.02 + 0.05 * h(4), 0.015 + 0.04 * h(5), 0.01 + 0.03 * h(6)];
    let phase = [
        h(7) * std::f64::consts::TAU,
        h(8) * std::f64::consts::TAU,
        h(9) * std::f64::consts::TAU,
    ];
    let drift = 0.02 + 0.03 * h(10);
    for r in 0..height {
        for c in 0..width {
            for ch in 0..3 {
                let v = (fx[ch] * c as f64 + fy[ch] * r as f64 + phase[ch] + drift * t).sin();
                out[[r, c, ch]] = 0.5 + 0.4 * v;
            }
        }
    }
    out
}

fn directory_frame(
    dir: &Path,
    background_id: u32,
    frame_index: u32,
    height: usize,
    width: usize,
) -> Result<Array3<f64>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() || is_image(p))
        .collect();
    if entries.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "background directory contains no images",
            ),
        ));
    }
    entries.sort();
    let entry = &entries[background_id as usize % entries.len()];
    let path = if entry.is_dir() {
        let mut frames: Vec<PathBuf> = std::fs::read_dir(entry)
            .map_err(|e| Error::io(entry, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image(p))
            .collect();
        if frames.is_empty() {
            return Err(Error::io(
                entry,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no frame images"),
            ));
        }
        frames.sort();
        frames[frame_index as usize % frames.len()].clone()
    } else {
        entry.clone()
    };
    let img = Image::load_png(&path)?;
    let resized = if img.height() == height && img.width() == width {
        img
    } else {
        img.resize(height, width)
    };
    Ok(resized.to_float())
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()),
        Some("png") | Some("jpg") | Some("jpeg") | Some("bmp")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_is_deterministic_and_in_range() {
        let a = procedural_frame(3, 10, 24, 32);
        let b = procedural_frame(3, 10, 24, 32);
        assert_eq!(a, b);
        for v in a.iter() {
            assert!((0.05..=0.95).contains(v));
        }
        let c = procedural_frame(4, 10, 24, 32);
        assert_ne!(a, c);
    }

    #[test]
    fn missing_directory_is_io_error() {
        let src = BackgroundSource::Directory(PathBuf::from("/nonexistent/bg"));
        assert!(src.frame(0, 0, 16, 16).is_err());
    }

    #[test]
    fn directory_with_static_image() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::zeros(8, 8);
        img.data.fill(77);
        img.save_png(&dir.path().join("bg0.png")).unwrap();
        let src = BackgroundSource::Directory(dir.path().to_path_buf());
        let f = src.frame(5, 2, 8, 8).unwrap();
        assert!((f[[0, 0, 0]] - 77.0 / 255.0).abs() < 1e-9);
    }
}
