//! Minimal raster plots: heatmaps of sCF slices and a log-scale loss curve.

use std::path::Path;

use anyhow::{Context, Result};
use image::{ImageFormat, Rgb, RgbImage};

use lpwtnet::tensor::Tensor;
use lpwtnet::training::LossRecord;

use crate::commands::partial;

const CELL_PX: u32 = 12;
const GAP_PX: u32 = 8;

/// Viridis-like ramp through five anchor colours.
fn colormap(v: f32) -> Rgb<u8> {
    const STOPS: [[f32; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if v.is_finite() { v.clamp(0.0, 1.0) * 4.0 } else { 0.0 };
    let i = (t.floor() as usize).min(3);
    let f = t - i as f32;
    let mix = |c: usize| (STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f).round() as u8;
    Rgb([mix(0), mix(1), mix(2)])
}

/// Single-channel slices side by side on a shared colour scale.
pub fn heatmaps(panels: &[Tensor<f32>]) -> RgbImage {
    let (h, w) = (panels[0].height() as u32, panels[0].width() as u32);
    let lo = panels.iter().map(|p| p.min_value()).fold(f32::INFINITY, f32::min);
    let hi = panels.iter().map(|p| p.max_value()).fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = panels.len() as u32;
    let mut img = RgbImage::from_pixel(n * w * CELL_PX + (n - 1) * GAP_PX, h * CELL_PX, Rgb([255, 255, 255]));
    for (k, p) in panels.iter().enumerate() {
        let x0 = k as u32 * (w * CELL_PX + GAP_PX);
        for y in 0..h {
            for x in 0..w {
                let c = colormap((p.at(y as usize, x as usize, 0) - lo) / span);
                for dy in 0..CELL_PX {
                    for dx in 0..CELL_PX {
                        img.put_pixel(x0 + x * CELL_PX + dx, y * CELL_PX + dy, c);
                    }
                }
            }
        }
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// log10(loss) against iteration, with a grey line per decade.
pub fn loss_curve(trace: &[LossRecord]) -> RgbImage {
    let (width, height, margin) = (800i64, 480i64, 40i64);
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));
    let logs: Vec<f64> = trace.iter().map(|r| r.loss.max(1e-30).log10()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil().max(lo + 1.0);
    let (first, last) = (trace[0].iteration as f64, trace[trace.len() - 1].iteration as f64);
    let xspan = (last - first).max(1.0);
    let px = |it: f64| margin + ((it - first) / xspan * (width - 2 * margin) as f64) as i64;
    let py = |v: f64| height - margin - ((v - lo) / (hi - lo) * (height - 2 * margin) as f64) as i64;

    let grey = Rgb([210, 210, 210]);
    let mut decade = lo;
    while decade <= hi {
        line(&mut img, (margin, py(decade)), (width - margin, py(decade)), grey);
        decade += 1.0;
    }
    let black = Rgb([0, 0, 0]);
    line(&mut img, (margin, height - margin), (width - margin, height - margin), black);
    line(&mut img, (margin, margin), (margin, height - margin), black);

    let blue = Rgb([31, 119, 180]);
    let pts: Vec<(i64, i64)> = trace.iter().zip(&logs).map(|(r, &v)| (px(r.iteration as f64), py(v))).collect();
    for w in pts.windows(2) {
        line(&mut img, w[0], w[1], blue);
    }
    img
}

pub fn save_png(img: &RgbImage, out: &Path) -> Result<()> {
    let tmp = partial(out);
    img.save_with_format(&tmp, ImageFormat::Png).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, out).with_context(|| format!("renaming {}", tmp.display()))
}
