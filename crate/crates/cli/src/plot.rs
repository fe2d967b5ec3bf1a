//! Minimal PNG line plots for the evaluation report: axes box, tick
//! labels are omitted, one polyline per series with a small legend strip.

use image::{Rgb, RgbImage};

pub const WIDTH: u32 = 800;
pub const HEIGHT: u32 = 500;
const MARGIN: u32 = 40;

pub const PALETTE: [Rgb<u8>; 4] = [
    Rgb([214, 69, 65]),
    Rgb([31, 119, 180]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
];

pub struct Series {
    pub points: Vec<(f64, f64)>,
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    // Bresenham; clipped to the image bounds.
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Renders series into a PNG. Axis ranges come from the data, padded 5%.
pub fn line_plot(path: &std::path::Path, series: &[Series]) -> std::io::Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let pad_y = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad_y, y1 + pad_y);

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let w = (WIDTH - 2 * MARGIN) as f64;
        let h = (HEIGHT - 2 * MARGIN) as f64;
        (
            (MARGIN as f64 + (x - x0) / (x1 - x0) * w) as i64,
            (MARGIN as f64 + (1.0 - (y - y0) / (y1 - y0)) * h) as i64,
        )
    };

    // Axes box.
    let frame = Rgb([0, 0, 0]);
    let tl = (MARGIN as i64, MARGIN as i64);
    let br = ((WIDTH - MARGIN) as i64, (HEIGHT - MARGIN) as i64);
    draw_line(&mut img, tl, (br.0, tl.1), frame);
    draw_line(&mut img, tl, (tl.0, br.1), frame);
    draw_line(&mut img, (tl.0, br.1), br, frame);
    draw_line(&mut img, (br.0, tl.1), br, frame);

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for pair in s.points.windows(2) {
            let a = to_px(pair[0].0, pair[0].1);
            let b = to_px(pair[1].0, pair[1].1);
            draw_line(&mut img, a, b, color);
        }
        // Legend: a short color bar per series in the top margin.
        let ly = 10 + 8 * i as i64;
        draw_line(&mut img, (MARGIN as i64, ly), (MARGIN as i64 + 30, ly), color);
    }

    img.save(path)
        .map_err(std::io::Error::other)
}
