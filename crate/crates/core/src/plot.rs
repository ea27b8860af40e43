//! Minimal line charts rendered straight to PNG: axes, light grid and one
//! coloured polyline per series. No text; series colours follow
//! [`PALETTE`] in order.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: i64 = 30;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thick: bool) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if thick {
            put(img, x + 1, y, c);
            put(img, x, y + 1, c);
        }
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

/// Draws `series` (lists of `(x, y)` points) over the given axis ranges and
/// writes a PNG.
pub fn line_chart(
    series: &[Vec<(f64, f64)>],
    x_range: (f64, f64),
    y_range: (f64, f64),
    path: &Path,
) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (w, h) = (WIDTH as i64, HEIGHT as i64);
    let span = |r: (f64, f64)| if r.1 > r.0 { r.1 - r.0 } else { 1.0 };
    let to_px = |(x, y): (f64, f64)| {
        let px = MARGIN + ((x - x_range.0) / span(x_range) * (w - 2 * MARGIN) as f64).round() as i64;
        let py = h - MARGIN - ((y - y_range.0) / span(y_range) * (h - 2 * MARGIN) as f64).round() as i64;
        (px, py)
    };
    let grid = Rgb([225, 225, 225]);
    for k in 1..=4 {
        let y = h - MARGIN - k * (h - 2 * MARGIN) / 4;
        line(&mut img, (MARGIN, y), (w - MARGIN, y), grid, false);
    }
    let axis = Rgb([60, 60, 60]);
    line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), axis, false);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), axis, false);
    for (i, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        for pair in s.windows(2) {
            line(&mut img, to_px(pair[0]), to_px(pair[1]), c, true);
        }
        if let [only] = s.as_slice() {
            let (x, y) = to_px(*only);
            for d in -2..=2 {
                put(&mut img, x + d, y, c);
                put(&mut img, x, y + d, c);
            }
        }
    }
    img.save(path)?;
    Ok(())
}
