//! Static PNG plots: spectrogram heatmaps, line charts, and bar charts.
//!
//! Deliberately minimal raster drawing — enough to eyeball training curves
//! and ablation summaries without pulling in a plotting stack.

use image::{Rgb, RgbImage};
use ndarray::Array2;
use std::path::Path;

use crate::error::{Result, RevdiffError};

const W: u32 = 640;
const H: u32 = 420;
const MARGIN: u32 = 48;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const FG: Rgb<u8> = Rgb([40, 40, 40]);
const SERIES_COLORS: [Rgb<u8>; 4] =
    [Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44]), Rgb([214, 39, 40])];

fn save(img: RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| RevdiffError::InvalidArgument(format!("png write: {e}")))
}

/// Map a normalized mel grid (rows = mel bins, cols = frames, values in
/// [-1, 1]) to a heatmap with low frequencies at the bottom.
pub fn mel_png(grid: &Array2<f64>, path: &Path) -> Result<()> {
    let (rows, cols) = grid.dim();
    let mut img = RgbImage::new(cols as u32, rows as u32);
    for i in 0..rows {
        for j in 0..cols {
            let t = ((grid[[i, j]] + 1.0) / 2.0).clamp(0.0, 1.0);
            // Dark blue → teal → yellow ramp.
            let r = (t * t * 255.0) as u8;
            let g = (t * 220.0) as u8;
            let b = ((1.0 - t) * 180.0 + 40.0) as u8;
            img.put_pixel(j as u32, (rows - 1 - i) as u32, Rgb([r, g, b]));
        }
    }
    save(img, path)
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + (x1 - x0) * t).round() as i64;
        let y = (y0 + (y1 - y0) * t).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn frame(img: &mut RgbImage) {
    let (w, h) = (W as f64, H as f64);
    let m = MARGIN as f64;
    draw_line(img, m, h - m, w - m, h - m, FG);
    draw_line(img, m, m, m, h - m, FG);
}

/// Multi-series line chart; each series is (label, points sorted by x).
pub fn line_chart(series: &[(&str, Vec<(f64, f64)>)], _title: &str, path: &Path) -> Result<()> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if pts.is_empty() {
        return Err(RevdiffError::InvalidArgument("line_chart: no points".into()));
    }
    let (xmin, xmax) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let (xs, ys) = ((xmax - xmin).max(1e-12), (ymax - ymin).max(1e-12));
    let mut img = RgbImage::from_pixel(W, H, BG);
    frame(&mut img);
    let m = MARGIN as f64;
    let px = |x: f64| m + (x - xmin) / xs * (W as f64 - 2.0 * m);
    let py = |y: f64| (H as f64 - m) - (y - ymin) / ys * (H as f64 - 2.0 * m);
    for (k, (_, p)) in series.iter().enumerate() {
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        for w in p.windows(2) {
            draw_line(&mut img, px(w[0].0), py(w[0].1), px(w[1].0), py(w[1].1), color);
        }
        for &(x, y) in p {
            draw_line(&mut img, px(x) - 2.0, py(y), px(x) + 2.0, py(y), color);
            draw_line(&mut img, px(x), py(y) - 2.0, px(x), py(y) + 2.0, color);
        }
    }
    save(img, path)
}

/// Vertical bar chart with one bar per label.
pub fn bar_chart(labels: &[String], values: &[f64], _title: &str, path: &Path) -> Result<()> {
    if labels.len() != values.len() || values.is_empty() {
        return Err(RevdiffError::InvalidArgument("bar_chart: bad inputs".into()));
    }
    let vmax = values.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
    let mut img = RgbImage::from_pixel(W, H, BG);
    frame(&mut img);
    let m = MARGIN as f64;
    let span = W as f64 - 2.0 * m;
    let slot = span / values.len() as f64;
    for (i, &v) in values.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let x0 = m + i as f64 * slot + slot * 0.15;
        let x1 = m + (i + 1) as f64 * slot - slot * 0.15;
        let top = (H as f64 - m) - (v.max(0.0) / vmax) * (H as f64 - 2.0 * m);
        let mut x = x0;
        while x <= x1 {
            draw_line(&mut img, x, H as f64 - m - 1.0, x, top, color);
            x += 1.0;
        }
    }
    save(img, path)
}
