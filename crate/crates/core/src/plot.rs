//! Static PNG line charts for sweep results. Axis extents are written as
//! small bitmap numerals; series labels go in the companion table.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 48;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

// 3x5 glyphs, one row per u8 (low three bits, MSB on the left)
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'e' => [0, 7, 7, 4, 7],
        '+' => [0, 2, 7, 2, 0],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: Rgb<u8>) {
    const SCALE: u32 = 2;
    let mut cx = x;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..3 {
                    if bits & (4 >> rx) != 0 {
                        for dy in 0..SCALE {
                            for dx in 0..SCALE {
                                put(img, cx + rx * SCALE + dx, y + ry as u32 * SCALE + dy, color);
                            }
                        }
                    }
                }
            }
        }
        cx += 4 * SCALE;
    }
}

fn put(img: &mut RgbImage, x: u32, y: u32, color: Rgb<u8>) {
    if x < img.width() && y < img.height() {
        img.put_pixel(x, y, color);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 + t * (x1 - x0);
        let y = y0 + t * (y1 - y0);
        for d in 0..2 {
            put(img, x.round() as u32 + d, y.round() as u32, color);
            put(img, x.round() as u32, y.round() as u32 + d, color);
        }
    }
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Draws every series on shared axes and writes a PNG to `path`.
pub fn line_chart(path: &Path, series: &[Series]) -> Result<()> {
    let points: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if points.is_empty() {
        return Err(Error::Image("no finite points to plot".into()));
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if xmax == xmin {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if ymax == ymin {
        ymin -= 0.5;
        ymax += 0.5;
    }

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let (left, right) = (MARGIN as f64, (WIDTH - MARGIN / 2) as f64);
    let (top, bottom) = ((MARGIN / 2) as f64, (HEIGHT - MARGIN) as f64);
    line(&mut img, (left, bottom), (right, bottom), black);
    line(&mut img, (left, top), (left, bottom), black);
    let px = |x: f64| left + (x - xmin) / (xmax - xmin) * (right - left);
    let py = |y: f64| bottom - (y - ymin) / (ymax - ymin) * (bottom - top);

    draw_text(&mut img, MARGIN, HEIGHT - MARGIN + 8, &label(xmin), black);
    let xl = label(xmax);
    draw_text(
        &mut img,
        WIDTH - MARGIN / 2 - 8 * xl.len() as u32,
        HEIGHT - MARGIN + 8,
        &xl,
        black,
    );
    draw_text(&mut img, 2, HEIGHT - MARGIN - 10, &label(ymin), black);
    draw_text(&mut img, 2, MARGIN / 2, &label(ymax), black);

    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (px(x), py(y)))
            .collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], color);
        }
        for &(x, y) in &pts {
            for dx in 0..5 {
                for dy in 0..5 {
                    put(
                        &mut img,
                        (x as u32 + dx).saturating_sub(2),
                        (y as u32 + dy).saturating_sub(2),
                        color,
                    );
                }
            }
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.png");
        let series = [
            Series {
                label: "a".into(),
                points: vec![(0.0, 1.0), (0.5, 2.0), (1.0, 1.5)],
            },
            Series {
                label: "b".into(),
                points: vec![(0.0, 0.2), (1.0, 0.1)],
            },
        ];
        line_chart(&path, &series).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
    }

    #[test]
    fn rejects_empty_input() {
        let dir = tempfile::tempdir().unwrap();
        assert!(line_chart(&dir.path().join("x.png"), &[]).is_err());
    }
}
