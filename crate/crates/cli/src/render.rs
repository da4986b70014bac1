//! PNG output. Unlabelled; method order matches the comparison CSV.

use std::path::Path;

use anyhow::Context;
use image::{GrayImage, Luma, Rgb, RgbImage};
use motionprior::eval::{quantile, Summary};
use ndarray::Array2;

const BOX_WIDTH: u32 = 60;
const SLOT: u32 = 100;
const MARGIN: u32 = 40;
const HEIGHT: u32 = 400;
const GRID_STEP: f64 = 0.05;
const COLORS: [[u8; 3]; 6] = [
    [160, 160, 160],
    [76, 114, 176],
    [221, 132, 82],
    [85, 168, 104],
    [196, 78, 82],
    [129, 114, 179],
];

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: [u8; 3]) {
    let (x1, y1) = (x1.min(img.width() - 1), y1.min(img.height() - 1));
    for y in y0.min(y1)..=y1.max(y0) {
        for x in x0.min(x1)..=x1.max(x0) {
            img.put_pixel(x, y, Rgb(c));
        }
    }
}

/// Tukey box plot of SSIM distributions: box at the quartiles, whiskers to
/// the last point within 1.5 IQR, points beyond drawn individually.
pub fn boxplot(series: &[Vec<f64>], path: &Path) -> anyhow::Result<()> {
    let all = series.iter().flatten().copied();
    let lo = all.clone().fold(f64::INFINITY, f64::min);
    let hi = all.fold(f64::NEG_INFINITY, f64::max);
    let lo = (lo / GRID_STEP).floor() * GRID_STEP;
    let hi = ((hi / GRID_STEP).ceil() * GRID_STEP).max(lo + GRID_STEP);
    let width = 2 * MARGIN + SLOT * series.len() as u32;
    let mut img = RgbImage::from_pixel(width, HEIGHT, Rgb([255, 255, 255]));
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let y_of = |v: f64| MARGIN + ((hi - v) / (hi - lo) * plot_h).round().clamp(0.0, plot_h) as u32;

    let mut g = lo;
    while g <= hi + 1e-9 {
        fill(&mut img, MARGIN, y_of(g), width - MARGIN, y_of(g), [225, 225, 225]);
        g += GRID_STEP;
    }
    fill(&mut img, MARGIN, MARGIN, MARGIN, HEIGHT - MARGIN, [0, 0, 0]);

    for (i, values) in series.iter().enumerate() {
        if values.is_empty() {
            continue;
        }
        let s = Summary::of(values)?;
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let iqr = s.q3 - s.q1;
        let (wlo, whi) = (s.q1 - 1.5 * iqr, s.q3 + 1.5 * iqr);
        let low = sorted.iter().copied().find(|&v| v >= wlo).unwrap_or(s.min);
        let high = sorted.iter().rev().copied().find(|&v| v <= whi).unwrap_or(s.max);
        let cx = MARGIN + SLOT * i as u32 + SLOT / 2;
        let (bx0, bx1) = (cx - BOX_WIDTH / 2, cx + BOX_WIDTH / 2);
        let color = COLORS[i % COLORS.len()];

        fill(&mut img, cx, y_of(high), cx, y_of(s.q3), [0, 0, 0]);
        fill(&mut img, cx, y_of(s.q1), cx, y_of(low), [0, 0, 0]);
        fill(
            &mut img,
            cx - BOX_WIDTH / 4,
            y_of(high),
            cx + BOX_WIDTH / 4,
            y_of(high),
            [0, 0, 0],
        );
        fill(
            &mut img,
            cx - BOX_WIDTH / 4,
            y_of(low),
            cx + BOX_WIDTH / 4,
            y_of(low),
            [0, 0, 0],
        );
        fill(&mut img, bx0, y_of(s.q3), bx1, y_of(s.q1), color);
        let m = y_of(quantile(&sorted, 0.5));
        fill(&mut img, bx0, m.saturating_sub(1), bx1, m + 1, [0, 0, 0]);
        for &v in sorted.iter().filter(|&&v| v < wlo || v > whi) {
            let y = y_of(v);
            fill(&mut img, cx - 2, y.saturating_sub(2), cx + 2, y + 2, color);
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

const TILE_SCALE: u32 = 3;
const GAP: u32 = 4;

/// Tiles side by side, intensities clamped to [0, 1].
pub fn panel(tiles: &[Array2<f32>], path: &Path) -> anyhow::Result<()> {
    let (h, w) = tiles.first().map_or((0, 0), |t| t.dim());
    let (tw, th) = (w as u32 * TILE_SCALE, h as u32 * TILE_SCALE);
    let n = tiles.len() as u32;
    let mut img = GrayImage::from_pixel((n * (tw + GAP)).saturating_sub(GAP).max(1), th.max(1), Luma([255]));
    for (k, t) in tiles.iter().enumerate() {
        let x0 = k as u32 * (tw + GAP);
        for ((r, c), &v) in t.indexed_iter() {
            let px = Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]);
            for dy in 0..TILE_SCALE {
                for dx in 0..TILE_SCALE {
                    // rows run down the image
                    img.put_pixel(x0 + c as u32 * TILE_SCALE + dx, r as u32 * TILE_SCALE + dy, px);
                }
            }
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
