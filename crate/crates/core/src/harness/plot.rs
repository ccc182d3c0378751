//! Minimal grouped bar charts rendered straight to PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 4] = [[70, 110, 190], [235, 140, 50], [90, 170, 90], [200, 70, 70]];

// 3x5 glyphs for digits and '.', one row per u8 (low three bits).
const GLYPHS: [[u8; 5]; 11] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
    [0, 0, 0, 0, 2],
];

fn fill(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, c: [u8; 3]) {
    for y in y0.max(0)..(y0 + h).min(img.height() as i64) {
        for x in x0.max(0)..(x0 + w).min(img.width() as i64) {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}

fn text(img: &mut RgbImage, s: &str, x: i64, y: i64, scale: i64) {
    let mut cx = x;
    for ch in s.chars() {
        let g = match ch {
            '0'..='9' => GLYPHS[ch as usize - '0' as usize],
            '.' => GLYPHS[10],
            _ => {
                cx += 2 * scale;
                continue;
            }
        };
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    fill(img, cx + col * scale, y + row as i64 * scale, scale, scale, [30, 30, 30]);
                }
            }
        }
        cx += 4 * scale;
    }
}

fn label(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Draws `groups.len()` clusters of bars, one bar per series, each
/// labelled with its value.
pub fn bar_chart(path: &Path, series: &[Vec<f64>]) -> Result<()> {
    let groups = series.first().map_or(0, |s| s.len());
    if groups == 0 || series.iter().any(|s| s.len() != groups) {
        return Err(Error::Shape("bar chart needs equally long, non-empty series".into()));
    }
    let (bar, gap, margin, height) = (28i64, 24i64, 30i64, 260i64);
    let group_w = bar * series.len() as i64 + gap;
    let width = 2 * margin + group_w * groups as i64;
    let mut img = RgbImage::from_pixel(width as u32, (height + 2 * margin) as u32, Rgb([255, 255, 255]));
    let max = series
        .iter()
        .flatten()
        .cloned()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
        .max(1e-12);
    let base = margin + height;
    fill(&mut img, margin - 2, base, width - 2 * margin + 4, 2, [0, 0, 0]);
    for g in 0..groups {
        for (s, values) in series.iter().enumerate() {
            let v = if values[g].is_finite() { values[g].max(0.0) } else { 0.0 };
            let h = ((v / max) * (height - 20) as f64).round() as i64;
            let x = margin + gap / 2 + g as i64 * group_w + s as i64 * bar;
            fill(&mut img, x + 2, base - h, bar - 4, h, PALETTE[s % PALETTE.len()]);
            text(&mut img, &label(v), x + 2, base - h - 12, 1);
        }
        fill(&mut img, margin + gap / 2 + g as i64 * group_w, base + 4, 2, 6, [0, 0, 0]);
    }
    img.save(path)?;
    Ok(())
}
