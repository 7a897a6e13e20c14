//! Procedural glass-like sprites, alpha compositing, motion blur and the
//! striped occlusion overlay.
//!
//! Sprites are analytic silhouettes rasterized with 2x2 supersampling, so
//! rotation is exact resampling rather than pixel shuffling. Compositing
//! follows `out = (1 - alpha * cov) * bg + alpha * cov * color` plus an
//! additive specular rim along the silhouette, clamped to `[0, 1]`.

use ndarray::{Array2, Array3};

use crate::geom::BinaryMask;

/// Number of distinct shape identifiers the generator draws from.
pub const SHAPE_ID_COUNT: u32 = 12;

/// Peak additive rim-highlight intensity; bounds the compositing deviation
/// from the background at `alpha * 1.0 + RIM_STRENGTH`.
pub const RIM_STRENGTH: f64 = 0.35;

/// Opaque stripe width in pixels.
pub const STRIPE_WIDTH: usize = 12;

/// Horizontal stripe speed in pixels per frame.
pub const STRIPE_SPEED: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Goblet,
    Bottle,
}

/// An analytic silhouette in unit coordinates (`[-1, 1]^2`, y down).
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Horizontal squeeze in (0, 1]; varies silhouette proportions per id.
    pub squeeze: f64,
}

impl Shape {
    pub fn from_id(id: u32) -> Shape {
        let kind = match id % 3 {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Goblet,
            _ => ShapeKind::Bottle,
        };
        // Four squeeze variants per kind.
        let squeeze = 1.0 - 0.09 * ((id / 3) % 4) as f64;
        Shape { kind, squeeze }
    }

    pub fn kind_index(id: u32) -> u32 {
        id % 3
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let x = x / self.squeeze;
        match self.kind {
            ShapeKind::Ellipse => ellipse(x, y, 0.0, 0.0, 0.9, 0.72),
            ShapeKind::Goblet => {
                ellipse(x, y, 0.0, -0.45, 0.58, 0.46)
                    || rect(x, y, -0.08, -0.1, 0.08, 0.72)
                    || ellipse(x, y, 0.0, 0.8, 0.45, 0.13)
            }
            ShapeKind::Bottle => {
                rect(x, y, -0.42, -0.15, 0.42, 0.93)
                    || ellipse(x, y, 0.0, -0.15, 0.42, 0.26)
                    || rect(x, y, -0.14, -0.82, 0.14, -0.15)
                    || rect(x, y, -0.19, -0.95, 0.19, -0.82)
            }
        }
    }
}

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

fn rect(x: f64, y: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
    x >= x0 && x <= x1 && y >= y0 && y <= y1
}

/// A sized, tinted sprite ready for compositing.
#[derive(Debug, Clone, Copy)]
pub struct Sprite {
    pub shape: Shape,
    /// Half the side of the unit box in pixels.
    pub radius_px: f64,
    /// Glass tint in `[0, 1]` per channel.
    pub color: [f64; 3],
}

impl Sprite {
    pub fn from_shape_id(id: u32, radius_px: f64) -> Sprite {
        // Mild per-kind tints; glass reads as mostly background anyway.
        let color = match Shape::kind_index(id) {
            0 => [0.72, 0.82, 0.88],
            1 => [0.80, 0.86, 0.78],
            _ => [0.84, 0.78, 0.74],
        };
        Sprite {
            shape: Shape::from_id(id),
            radius_px,
            color,
        }
    }

    /// Nominal object width in pixels (used for trailing-gap units).
    pub fn width_px(&self) -> f64 {
        2.0 * self.radius_px
    }
}

/// A rasterized sprite positioned in frame coordinates.
#[derive(Debug, Clone)]
pub struct SpriteLayer {
    pub coverage: Array2<f64>,
    pub rim: Array2<f64>,
    pub color: [f64; 3],
    /// Frame coordinates of the layer's top-left pixel (may be negative).
    pub x0: i64,
    pub y0: i64,
}

/// Rasterize a sprite rotated by `angle_deg` around `center` (frame
/// pixels). The layer carries margin for later blurring.
pub fn render_sprite(sprite: &Sprite, center: [f64; 2], angle_deg: f64) -> SpriteLayer {
    let reach = sprite.radius_px * std::f64::consts::SQRT_2 + 2.0;
    let x0 = (center[0] - reach).floor() as i64;
    let y0 = (center[1] - reach).floor() as i64;
    let side = (2.0 * reach).ceil() as usize + 1;
    let mut coverage = Array2::zeros((side, side));
    let mut rim = Array2::zeros((side, side));
    let rad = angle_deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    // 2x2 supersampling offsets within the pixel.
    const SUB: [f64; 2] = [-0.25, 0.25];
    for r in 0..side {
        for c in 0..side {
            let mut hits = 0u32;
            for oy in SUB {
                for ox in SUB {
                    let px = (x0 + c as i64) as f64 + 0.5 + ox;
                    let py = (y0 + r as i64) as f64 + 0.5 + oy;
                    // Rotate the offset back into sprite space.
                    let dx = px - center[0];
                    let dy = py - center[1];
                    let ux = (cos * dx + sin * dy) / sprite.radius_px;
                    let uy = (-sin * dx + cos * dy) / sprite.radius_px;
                    if ux.abs() <= 1.0 && uy.abs() <= 1.0 && sprite.shape.contains(ux, uy) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / 4.0;
            coverage[[r, c]] = cov;
            // Peaks at partially covered (silhouette) pixels.
            rim[[r, c]] = 4.0 * cov * (1.0 - cov);
        }
    }
    SpriteLayer {
        coverage,
        rim,
        color: sprite.color,
        x0,
        y0,
    }
}

/// Blur kernel length in pixels for blur level 1..=3.
pub fn blur_kernel_length(level: u8) -> usize {
    match level {
        1 => 3,
        2 => 9,
        _ => 21,
    }
}

/// Convolve the layer's coverage and rim with a normalized box kernel of
/// `length` taps along `dir`. Length 1 is the identity. The layer grows so
/// no mass is lost at the borders.
pub fn apply_linear_blur(layer: &SpriteLayer, length: usize, dir: [f64; 2]) -> SpriteLayer {
    if length <= 1 {
        return layer.clone();
    }
    let half = (length as f64 - 1.0) / 2.0;
    let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    let (dx, dy) = if norm < 1e-12 {
        (1.0, 0.0)
    } else {
        (dir[0] / norm, dir[1] / norm)
    };
    let pad = (half * dx.abs().max(dy.abs()).max(1.0)).ceil() as usize + 1;
    let (h, w) = layer.coverage.dim();
    let nh = h + 2 * pad;
    let nw = w + 2 * pad;
    let mut coverage = Array2::zeros((nh, nw));
    let mut rim = Array2::zeros((nh, nw));
    let weight = 1.0 / length as f64;
    for r in 0..nh {
        for c in 0..nw {
            let mut cov_acc = 0.0;
            let mut rim_acc = 0.0;
            for k in 0..length {
                let t = k as f64 - half;
                // Source position in the original layer grid.
                let sx = c as f64 - pad as f64 - t * dx;
                let sy = r as f64 - pad as f64 - t * dy;
                cov_acc += sample_zero(&layer.coverage, sy, sx);
                rim_acc += sample_zero(&layer.rim, sy, sx);
            }
            coverage[[r, c]] = cov_acc * weight;
            rim[[r, c]] = rim_acc * weight;
        }
    }
    SpriteLayer {
        coverage,
        rim,
        color: layer.color,
        x0: layer.x0 - pad as i64,
        y0: layer.y0 - pad as i64,
    }
}

/// Bilinear sample with zero outside the grid.
fn sample_zero(grid: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = grid.dim();
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut acc = 0.0;
    for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
        if yy < 0 || yy >= h as i64 {
            continue;
        }
        for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
            if xx < 0 || xx >= w as i64 {
                continue;
            }
            acc += grid[[yy as usize, xx as usize]] * wy * wx;
        }
    }
    acc
}

/// Alpha-composite a layer over a float frame in place and return the
/// object's binary mask (`coverage > 0.5`, clipped to the frame).
pub fn composite_layer(frame: &mut Array3<f64>, layer: &SpriteLayer, alpha: f64) -> BinaryMask {
    let (fh, fw, _) = frame.dim();
    let (lh, lw) = layer.coverage.dim();
    let mut mask = BinaryMask::zeros(fh, fw);
    for r in 0..lh {
        let fy = layer.y0 + r as i64;
        if fy < 0 || fy >= fh as i64 {
            continue;
        }
        for c in 0..lw {
            let fx = layer.x0 + c as i64;
            if fx < 0 || fx >= fw as i64 {
                continue;
            }
            let cov = layer.coverage[[r, c]];
            if cov <= 0.0 {
                continue;
            }
            let (fy, fx) = (fy as usize, fx as usize);
            let blend = alpha * cov;
            let rim = RIM_STRENGTH * layer.rim[[r, c]];
            for ch in 0..3 {
                let bg = frame[[fy, fx, ch]];
                let v = (1.0 - blend) * bg + blend * layer.color[ch] + rim;
                frame[[fy, fx, ch]] = v.clamp(0.0, 1.0);
            }
            if cov > 0.5 {
                mask.set(fy, fx, 1);
            }
        }
    }
    mask
}

/// Render one sprite over a background: returns the composited frame and
/// the object mask. A center outside the frame clips the object.
pub fn composite_target(
    background: &Array3<f64>,
    sprite: &Sprite,
    alpha: f64,
    angle_deg: f64,
    center: [f64; 2],
) -> (Array3<f64>, BinaryMask) {
    let mut frame = background.clone();
    let layer = render_sprite(sprite, center, angle_deg);
    let mask = composite_layer(&mut frame, &layer, alpha);
    (frame, mask)
}

const STRIPE_PALETTE: [[f64; 3]; 5] = [
    [0.82, 0.29, 0.25],
    [0.25, 0.52, 0.77],
    [0.89, 0.73, 0.26],
    [0.33, 0.66, 0.38],
    [0.58, 0.39, 0.67],
];

/// Draw `stripes` opaque vertical stripes of fixed width, evenly spaced and
/// translated by [`STRIPE_SPEED`] px/frame with wraparound, over everything.
/// `stripes == 0` is the identity.
pub fn render_occlusion(frame: &mut Array3<f64>, stripes: u32, frame_index: u32) {
    if stripes == 0 {
        return;
    }
    let (h, w, _) = frame.dim();
    let offset = (STRIPE_SPEED * frame_index as usize) % w;
    for k in 0..stripes as usize {
        let base = k * w / stripes as usize;
        let color = STRIPE_PALETTE[k % STRIPE_PALETTE.len()];
        for dx in 0..STRIPE_WIDTH {
            let col = (base + offset + dx) % w;
            for row in 0..h {
                for ch in 0..3 {
                    frame[[row, col, ch]] = color[ch];
                }
            }
        }
    }
}

/// Fraction of frame pixels covered by the stripe pattern.
pub fn occluded_fraction(stripes: u32, width: usize) -> f64 {
    if stripes == 0 {
        return 0.0;
    }
    let mut covered = vec![false; width];
    for k in 0..stripes as usize {
        let base = k * width / stripes as usize;
        for dx in 0..STRIPE_WIDTH {
            covered[(base + dx) % width] = true;
        }
    }
    covered.iter().filter(|&&c| c).count() as f64 / width as f64
}
