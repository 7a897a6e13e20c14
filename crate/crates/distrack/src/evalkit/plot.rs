//! A tiny deterministic line-plot renderer. No font or plotting backend:
//! axes, gridlines, a 3x5 digit face for tick labels, and polylines, so
//! re-rendering the same data is byte-identical.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const MARGIN_L: u32 = 56;
const MARGIN_R: u32 = 16;
const MARGIN_T: u32 = 16;
const MARGIN_B: u32 = 40;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);
pub const SERIES_COLORS: [Rgb<u8>; 4] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
];

/// One curve: points ordered by x.
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: Rgb<u8>,
}

/// Render curves over `[x0, x1] x [y0, y1]` with gridlines and numeric
/// tick labels, and write a PNG.
pub fn line_plot(
    path: &Path,
    series: &[Series],
    x_range: (f64, f64),
    y_range: (f64, f64),
    x_ticks: &[f64],
    y_ticks: &[f64],
) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);
    let plot_w = (WIDTH - MARGIN_L - MARGIN_R) as f64;
    let plot_h = (HEIGHT - MARGIN_T - MARGIN_B) as f64;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let fx = (x - x_range.0) / (x_range.1 - x_range.0);
        let fy = (y - y_range.0) / (y_range.1 - y_range.0);
        (
            MARGIN_L as i64 + (fx * plot_w).round() as i64,
            (HEIGHT - MARGIN_B) as i64 - (fy * plot_h).round() as i64,
        )
    };

    for &t in x_ticks {
        let (px, _) = to_px(t, y_range.0);
        draw_line(&mut img, px, MARGIN_T as i64, px, (HEIGHT - MARGIN_B) as i64, GRID);
        draw_number(&mut img, t, px - 8, (HEIGHT - MARGIN_B + 8) as i64, AXIS);
    }
    for &t in y_ticks {
        let (_, py) = to_px(x_range.0, t);
        draw_line(&mut img, MARGIN_L as i64, py, (WIDTH - MARGIN_R) as i64, py, GRID);
        draw_number(&mut img, t, 16, py - 2, AXIS);
    }
    // Axes over the grid.
    draw_line(
        &mut img,
        MARGIN_L as i64,
        MARGIN_T as i64,
        MARGIN_L as i64,
        (HEIGHT - MARGIN_B) as i64,
        AXIS,
    );
    draw_line(
        &mut img,
        MARGIN_L as i64,
        (HEIGHT - MARGIN_B) as i64,
        (WIDTH - MARGIN_R) as i64,
        (HEIGHT - MARGIN_B) as i64,
        AXIS,
    );

    for s in series {
        let mut last: Option<(i64, i64)> = None;
        for &(x, y) in &s.points {
            let p = to_px(x, y);
            if let Some(prev) = last {
                draw_line(&mut img, prev.0, prev.1, p.0, p.1, s.color);
            }
            last = Some(p);
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Bresenham segment.
fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        put(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

// 3x5 glyphs for '0'-'9' and '.', row-major bits.
const GLYPHS: [(char, [u8; 5]); 11] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
];

fn draw_glyph(img: &mut RgbImage, ch: char, x: i64, y: i64, color: Rgb<u8>) {
    if let Some((_, rows)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..3 {
                if bits & (1 << (2 - c)) != 0 {
                    put(img, x + c as i64, y + r as i64, color);
                }
            }
        }
    }
}

fn draw_number(img: &mut RgbImage, value: f64, x: i64, y: i64, color: Rgb<u8>) {
    // Short fixed format: up to 2 decimals, trailing zeros trimmed.
    let mut text = format!("{value:.2}");
    while text.contains('.') && (text.ends_with('0') || text.ends_with('.')) {
        text.pop();
    }
    let mut cx = x;
    for ch in text.chars() {
        draw_glyph(img, ch, cx, y, color);
        cx += 4;
    }
}
