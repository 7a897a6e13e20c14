//! Box and mask geometry: overlap measures, loss primitives, rasterization
//! and the crop/resize machinery shared by training, tracking and evaluation.
//!
//! Conventions: continuous coordinates with the origin at the top-left,
//! row-major grids, and pixel centers at integer + 0.5.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{bilinear_sample, Image};

/// Axis-aligned box `(x, y, w, h)` in pixels, `(x, y)` the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Rejects non-finite fields and non-positive extents.
    pub fn validate(&self) -> Result<()> {
        let fields = [self.x, self.y, self.w, self.h];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::domain(format!("non-positive box extent {self:?}")));
        }
        Ok(())
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BoundingBox::new(x1, y1, x2 - x1, y2 - y1)
    }

    /// True if the pixel-center point `(px, py)` lies inside the box
    /// (half-open on the right/bottom edges).
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    /// Clamp the box to `[0, width] x [0, height]`, keeping at least 1 px
    /// of extent.
    pub fn clamp_to(&self, width: f64, height: f64) -> BoundingBox {
        let x1 = self.x.clamp(0.0, width - 1.0);
        let y1 = self.y.clamp(0.0, height - 1.0);
        let x2 = self.right().clamp(x1 + 1.0, width);
        let y2 = self.bottom().clamp(y1 + 1.0, height);
        BoundingBox {
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
        }
    }
}

fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    iw * ih
}

/// Intersection over union, in `[0, 1]`; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Generalized IoU, in `[-1, 1]`: IoU minus the empty fraction of the
/// smallest enclosing box.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let hull_w = a.right().max(b.right()) - a.x.min(b.x);
    let hull_h = a.bottom().max(b.bottom()) - a.y.min(b.y);
    let hull = hull_w * hull_h;
    Ok(inter / union - (hull - union) / hull)
}

/// GIoU loss `1 - giou`, in `[0, 2]`; 0 exactly for identical boxes.
pub fn giou_loss(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    Ok(1.0 - giou(a, b)?)
}

/// Mean absolute difference of the four box coordinates, with x/w
/// normalized by the image width and y/h by the image height.
pub fn l1_box_loss(a: &BoundingBox, b: &BoundingBox, norm: (f64, f64)) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let (w_im, h_im) = norm;
    if w_im <= 0.0 || h_im <= 0.0 || !w_im.is_finite() || !h_im.is_finite() {
        return Err(Error::domain(format!(
            "invalid normalization dimensions ({w_im}, {h_im})"
        )));
    }
    Ok(((a.x - b.x).abs() / w_im
        + (a.y - b.y).abs() / h_im
        + (a.w - b.w).abs() / w_im
        + (a.h - b.h).abs() / h_im)
        / 4.0)
}

/// Euclidean distance between box centers, in pixels.
pub fn center_error(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    Ok(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt())
}

/// A dense 0/1 grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    grid: Array2<u8>,
}

impl BinaryMask {
    pub fn new(grid: Array2<u8>) -> Result<Self> {
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::domain("mask values must be 0 or 1".to_string()));
        }
        Ok(BinaryMask { grid })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            grid: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.grid.dim().0
    }

    pub fn width(&self) -> usize {
        self.grid.dim().1
    }

    pub fn grid(&self) -> &Array2<u8> {
        &self.grid
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.grid[[row, col]]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.grid[[row, col]] = if value > 0 { 1 } else { 0 };
    }

    pub fn count_ones(&self) -> usize {
        self.grid.iter().filter(|&&v| v > 0).count()
    }

    /// Tight axis-aligned hull of the nonzero pixels; `None` for an empty
    /// mask. Pixel `(r, c)` occupies the unit square `[c, c+1) x [r, r+1)`.
    pub fn tight_hull(&self) -> Option<BoundingBox> {
        let mut min_r = usize::MAX;
        let mut min_c = usize::MAX;
        let mut max_r = 0usize;
        let mut max_c = 0usize;
        let mut any = false;
        for ((r, c), &v) in self.grid.indexed_iter() {
            if v > 0 {
                any = true;
                min_r = min_r.min(r);
                min_c = min_c.min(c);
                max_r = max_r.max(r);
                max_c = max_c.max(c);
            }
        }
        if !any {
            return None;
        }
        Some(BoundingBox {
            x: min_c as f64,
            y: min_r as f64,
            w: (max_c - min_c + 1) as f64,
            h: (max_r - min_r + 1) as f64,
        })
    }
}

/// Rasterize a box on an `height x width` grid: pixel `(r, c)` is 1 iff its
/// center `(c + 0.5, r + 0.5)` lies inside the box. A box entirely outside
/// the grid yields an all-zero mask.
pub fn rasterize_box(b: &BoundingBox, height: usize, width: usize) -> Result<BinaryMask> {
    b.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::domain("rasterize grid must be non-empty".to_string()));
    }
    let mut mask = BinaryMask::zeros(height, width);
    // Only the row/col range that can contain hits.
    let r0 = (b.y - 0.5).ceil().max(0.0) as usize;
    let r1 = ((b.bottom() - 0.5).floor().min(height as f64 - 1.0)).max(-1.0);
    let c0 = (b.x - 0.5).ceil().max(0.0) as usize;
    let c1 = ((b.right() - 0.5).floor().min(width as f64 - 1.0)).max(-1.0);
    if r1 < 0.0 || c1 < 0.0 {
        return Ok(mask);
    }
    for r in r0..=(r1 as usize).min(height - 1) {
        for c in c0..=(c1 as usize).min(width - 1) {
            if b.contains_point(c as f64 + 0.5, r as f64 + 0.5) {
                mask.set(r, c, 1);
            }
        }
    }
    Ok(mask)
}

/// Affine record mapping patch coordinates back to image coordinates:
/// `x_img = tx + x_patch * scale`, `y_img = ty + y_patch * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl CropTransform {
    pub fn patch_to_image(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x: self.tx + b.x * self.scale,
            y: self.ty + b.y * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    pub fn image_to_patch(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x: (b.x - self.tx) / self.scale,
            y: (b.y - self.ty) / self.scale,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }
}

/// Crop a square region of side `context * sqrt(w * h)` centered on the box
/// center and bilinearly resample it to `out x out`. Out-of-frame samples
/// are filled with the image channel mean. Returns the `[0, 1]` float patch
/// and the patch-to-image transform.
pub fn crop_resize(
    image: &Image,
    bbox: &BoundingBox,
    context: f64,
    out: usize,
) -> Result<(Array3<f64>, CropTransform)> {
    bbox.validate()?;
    if context < 1.0 || !context.is_finite() {
        return Err(Error::domain(format!("context factor {context} must be >= 1")));
    }
    if out == 0 {
        return Err(Error::domain("output size must be positive".to_string()));
    }
    let side = context * (bbox.w * bbox.h).sqrt();
    if side <= 0.0 || !side.is_finite() {
        return Err(Error::domain(format!("degenerate crop side {side}")));
    }
    let (cx, cy) = bbox.center();
    let scale = side / out as f64;
    let tx = cx - side / 2.0;
    let ty = cy - side / 2.0;
    let float = image.to_float();
    let means = image.channel_means();
    let h = image.height() as f64;
    let w = image.width() as f64;
    let mut patch = Array3::zeros((out, out, 3));
    for row in 0..out {
        for col in 0..out {
            // Patch pixel center in image coordinates.
            let x_img = tx + (col as f64 + 0.5) * scale;
            let y_img = ty + (row as f64 + 0.5) * scale;
            if x_img < 0.0 || x_img >= w || y_img < 0.0 || y_img >= h {
                for ch in 0..3 {
                    patch[[row, col, ch]] = means[ch];
                }
            } else {
                // Convert to source pixel-center space for interpolation.
                let sample = bilinear_sample(&float, y_img - 0.5, x_img - 0.5);
                for ch in 0..3 {
                    patch[[row, col, ch]] = sample[ch];
                }
            }
        }
    }
    Ok((patch, CropTransform { scale, tx, ty }))
}

/// Serialize boxes one per line as `x,y,w,h` ('.' decimal separator).
pub fn format_box_lines(boxes: &[BoundingBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        let _ = writeln!(out, "{},{},{},{}", b.x, b.y, b.w, b.h);
    }
    out
}

/// Parse the `x,y,w,h` per-line format produced by [`format_box_lines`].
pub fn parse_box_lines(text: &str, origin: &Path) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::parse(
                origin,
                format!("line {}: expected 4 comma-separated fields", idx + 1),
            ));
        }
        let mut vals = [0.0f64; 4];
        for (i, p) in parts.iter().enumerate() {
            vals[i] = p.trim().parse::<f64>().map_err(|e| {
                Error::parse(origin, format!("line {}: bad number {p:?}: {e}", idx + 1))
            })?;
        }
        boxes.push(BoundingBox {
            x: vals[0],
            y: vals[1],
            w: vals[2],
            h: vals[3],
        });
    }
    Ok(boxes)
}

pub fn write_box_file(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    std::fs::write(path, format_box_lines(boxes)).map_err(|e| Error::io(path, e))
}

pub fn read_box_file(path: &Path) -> Result<Vec<BoundingBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_box_lines(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    /// Pixel-counting overlap oracle: supersample the joint hull of the two
    /// boxes on a `res x res` grid and count point-in-box hits. Independent
    /// of the analytic intersection arithmetic.
    pub(crate) fn rasterized_iou_oracle(a: &BoundingBox, b: &BoundingBox, res: usize) -> f64 {
        let x0 = a.x.min(b.x);
        let y0 = a.y.min(b.y);
        let x1 = a.right().max(b.right());
        let y1 = a.bottom().max(b.bottom());
        let dx = (x1 - x0) / res as f64;
        let dy = (y1 - y0) / res as f64;
        let mut inter = 0usize;
        let mut union = 0usize;
        for r in 0..res {
            let py = y0 + (r as f64 + 0.5) * dy;
            for c in 0..res {
                let px = x0 + (c as f64 + 0.5) * dx;
                let in_a = a.contains_point(px, py);
                let in_b = b.contains_point(px, py);
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bb(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = bb(5.0, 5.0, 1.0, 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_overlap_matches_pixel_oracle() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        let b = bb(1.0, 1.0, 2.0, 2.0);
        let analytic = iou(&a, &b).unwrap();
        assert!((analytic - 1.0 / 7.0).abs() < 1e-12);
        let oracle = rasterized_iou_oracle(&a, &b, 1000);
        assert!(
            (analytic - oracle).abs() < 1e-2,
            "analytic {analytic} vs oracle {oracle}"
        );
    }

    #[test]
    fn iou_rejects_non_finite() {
        let a = BoundingBox {
            x: f64::NAN,
            y: 0.0,
            w: 1.0,
            h: 1.0,
        };
        let b = bb(0.0, 0.0, 1.0, 1.0);
        assert!(iou(&a, &b).is_err());
    }

    #[test]
    fn giou_hand_cases() {
        let a = bb(0.0, 0.0, 1.0, 1.0);
        assert!((giou(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        // Disjoint with a 1-wide gap: hull 3, union 2, IoU 0.
        let b = bb(2.0, 0.0, 1.0, 1.0);
        assert!((giou(&a, &b).unwrap() + 1.0 / 3.0).abs() < 1e-9);
        // Overlapping: IoU 1/7, hull 9, union 7.
        let c = bb(0.0, 0.0, 2.0, 2.0);
        let d = bb(1.0, 1.0, 2.0, 2.0);
        assert!((giou(&c, &d).unwrap() - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-9);
    }

    #[test]
    fn giou_loss_cases() {
        let a = bb(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);
        let b = bb(2.0, 0.0, 1.0, 1.0);
        assert!((giou_loss(&a, &b).unwrap() - 4.0 / 3.0).abs() < 1e-9);
        // Nested: hull == outer box, union == 16, IoU == 1/4.
        let outer = bb(0.0, 0.0, 4.0, 4.0);
        let inner = bb(1.0, 1.0, 2.0, 2.0);
        assert!((giou_loss(&outer, &inner).unwrap() - 0.75).abs() < 1e-9);
    }

    #[test]
    fn l1_loss_cases() {
        let a = bb(0.0, 0.0, 160.0, 160.0);
        assert_eq!(l1_box_loss(&a, &a, (320.0, 320.0)).unwrap(), 0.0);
        let b = bb(32.0, 0.0, 160.0, 160.0);
        assert!((l1_box_loss(&a, &b, (320.0, 320.0)).unwrap() - 0.025).abs() < 1e-12);
        assert!(l1_box_loss(&a, &b, (0.0, 320.0)).is_err());
    }

    #[test]
    fn center_error_cases() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(center_error(&a, &a).unwrap(), 0.0);
        let b = bb(3.0, 4.0, 2.0, 2.0);
        assert!((center_error(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn rasterize_cases() {
        // Whole grid covered.
        let full = bb(0.0, 0.0, 4.0, 4.0);
        let m = rasterize_box(&full, 4, 4).unwrap();
        assert_eq!(m.count_ones(), 16);
        // Interior 2x2 box.
        let b = bb(1.0, 1.0, 2.0, 2.0);
        let m = rasterize_box(&b, 4, 4).unwrap();
        assert_eq!(m.count_ones(), 4);
        for r in 1..3 {
            for c in 1..3 {
                assert_eq!(m.get(r, c), 1);
            }
        }
        // Entirely outside: all zeros, not an error.
        let out = bb(10.0, 10.0, 2.0, 2.0);
        assert_eq!(rasterize_box(&out, 4, 4).unwrap().count_ones(), 0);
    }

    #[test]
    fn rasterize_count_matches_clipped_area() {
        let b = bb(2.0, 1.0, 3.0, 5.0); // clips at height 4: 3 wide x 3 tall
        let m = rasterize_box(&b, 4, 8).unwrap();
        assert_eq!(m.count_ones(), 9);
    }

    #[test]
    fn tight_hull_round_trip() {
        let b = bb(2.0, 1.0, 3.0, 2.0);
        let m = rasterize_box(&b, 8, 8).unwrap();
        assert_eq!(m.tight_hull().unwrap(), b);
        assert!(BinaryMask::zeros(3, 3).tight_hull().is_none());
    }

    #[test]
    fn crop_resize_square_box_equals_subimage() {
        // 8x8 image with a gradient; box exactly the 4x4 top-left block.
        let mut img = Image::zeros(8, 8);
        for r in 0..8 {
            for c in 0..8 {
                img.data[[r, c, 0]] = (r * 8 + c) as u8 * 3;
            }
        }
        let b = bb(0.0, 0.0, 4.0, 4.0);
        let (patch, _) = crop_resize(&img, &b, 1.0, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expected = img.data[[r, c, 0]] as f64 / 255.0;
                assert!(
                    (patch[[r, c, 0]] - expected).abs() < 1e-12,
                    "pixel ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn crop_resize_corner_fill_is_channel_mean() {
        let mut img = Image::zeros(16, 16);
        img.data.fill(100);
        let means = img.channel_means();
        let b = bb(0.0, 0.0, 8.0, 8.0);
        let (patch, _) = crop_resize(&img, &b, 2.0, 16).unwrap();
        // Top-left patch corner maps outside the image.
        for ch in 0..3 {
            assert_eq!(patch[[0, 0, ch]], means[ch]);
        }
    }

    #[test]
    fn crop_resize_degenerate_box_rejected() {
        let img = Image::zeros(8, 8);
        let b = BoundingBox {
            x: 0.0,
            y: 0.0,
            w: 0.0,
            h: 2.0,
        };
        assert!(crop_resize(&img, &b, 2.0, 8).is_err());
    }

    #[test]
    fn box_file_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.txt");
        let boxes = vec![bb(1.0, 2.0, 3.0, 4.0), bb(0.125, 7.25, 31.0, 17.5)];
        write_box_file(&path, &boxes).unwrap();
        let back = read_box_file(&path).unwrap();
        assert_eq!(boxes, back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("1,2,3,4\n"));
    }

    proptest! {
        #[test]
        fn iou_giou_symmetry_and_order(
            ax in -50.0..50.0f64, ay in -50.0..50.0f64,
            aw in 0.5..40.0f64, ah in 0.5..40.0f64,
            bx in -50.0..50.0f64, by in -50.0..50.0f64,
            bw in 0.5..40.0f64, bh in 0.5..40.0f64,
        ) {
            let a = bb(ax, ay, aw, ah);
            let b = bb(bx, by, bw, bh);
            let i_ab = iou(&a, &b).unwrap();
            let g_ab = giou(&a, &b).unwrap();
            prop_assert!((i_ab - iou(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((g_ab - giou(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(g_ab <= i_ab + 1e-12);
            let gl = giou_loss(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&gl));
            prop_assert!((l1_box_loss(&a, &b, (100.0, 100.0)).unwrap()
                - l1_box_loss(&b, &a, (100.0, 100.0)).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn giou_equals_iou_when_nested(
            x in -20.0..20.0f64, y in -20.0..20.0f64,
            w in 4.0..30.0f64, h in 4.0..30.0f64,
            fx in 0.1..0.6f64, fy in 0.1..0.6f64,
            fw in 0.2..0.39f64, fh in 0.2..0.39f64,
        ) {
            let outer = bb(x, y, w, h);
            let inner = bb(x + fx * w, y + fy * h, fw * w, fh * h);
            // hull == outer == union's hull, so giou == iou.
            prop_assert!((giou(&outer, &inner).unwrap() - iou(&outer, &inner).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn center_error_translation_invariant(
            ax in -20.0..20.0f64, ay in -20.0..20.0f64,
            bx in -20.0..20.0f64, by in -20.0..20.0f64,
            t in -30.0..30.0f64,
        ) {
            let a = bb(ax, ay, 2.0, 3.0);
            let b = bb(bx, by, 4.0, 1.0);
            let a2 = bb(ax + t, ay + t, 2.0, 3.0);
            let b2 = bb(bx + t, by + t, 4.0, 1.0);
            prop_assert!((center_error(&a, &b).unwrap() - center_error(&a2, &b2).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn crop_transform_round_trip(
            x in 5.0..200.0f64, y in 5.0..150.0f64,
            w in 4.0..60.0f64, h in 4.0..60.0f64,
        ) {
            let img = Image::zeros(240, 320);
            let b = bb(x, y, w, h);
            let (_, t) = crop_resize(&img, &b, 4.0, 64).unwrap();
            let there = t.image_to_patch(&b);
            let back = t.patch_to_image(&there);
            prop_assert!((back.x - b.x).abs() < 0.5);
            prop_assert!((back.y - b.y).abs() < 0.5);
            prop_assert!((back.w - b.w).abs() < 0.5);
            prop_assert!((back.h - b.h).abs() < 0.5);
        }
    }
}
