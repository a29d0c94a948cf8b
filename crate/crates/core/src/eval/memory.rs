//! Memory analysis: persistence of activations under occlusion and L2-norm heatmaps.

use image::{GrayImage, Luma};

use crate::detector::BBox;
use crate::nnkit::{Real, Tensor};

/// Start of the longest run of `true` (earliest on ties); `None` if there is none.
pub fn occlusion_onset(occluded: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    let mut t = 0;
    while t < occluded.len() {
        if occluded[t] {
            let start = t;
            while t < occluded.len() && occluded[t] {
                t += 1;
            }
            if best.is_none_or(|(_, len)| t - start > len) {
                best = Some((start, t - start));
            }
        } else {
            t += 1;
        }
    }
    best.map(|(s, _)| s)
}

/// Mean channel L2 norm of `memory` (batch item 0) over the cells whose centres fall inside
/// `bbox` scaled by `1 / stride`. A box too small to contain a centre uses the cell holding its
/// centre.
pub fn region_norm<T: Real>(memory: &Tensor<T>, bbox: &BBox, stride: f64) -> f64 {
    let norm = memory.item(0).channel_norm();
    let (h, w) = norm.hw();
    let cells = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
        let a = (lo / stride - 0.5).ceil().max(0.0) as usize;
        let b = ((hi / stride - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
        (a.min(n), b)
    };
    let (x0, x1) = cells(bbox.x1, bbox.x2, w);
    let (y0, y1) = cells(bbox.y1, bbox.y2, h);
    let value = |y: usize, x: usize| norm.at(0, 0, y, x).to_f64().unwrap_or(f64::NAN);
    if x0 < x1 && y0 < y1 {
        let mut sum = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                sum += value(y, x);
            }
        }
        sum / ((y1 - y0) * (x1 - x0)) as f64
    } else {
        let (cx, cy) = bbox.center();
        let x = ((cx / stride) as usize).min(w.saturating_sub(1));
        let y = ((cy / stride) as usize).min(h.saturating_sub(1));
        value(y, x)
    }
}

/// Memory strength inside the object's box at every frame, divided by its value at `onset`.
/// The curve is all zeros when the onset value is zero. Values are ratios and may exceed 1
/// when the memory inside the box grows after onset.
pub fn memory_persistence<T: Real>(trace: &[Tensor<T>], boxes: &[BBox], stride: f64, onset: usize) -> Vec<f64> {
    let raw: Vec<f64> = trace.iter().zip(boxes).map(|(m, b)| region_norm(m, b, stride)).collect();
    let base = raw.get(onset).copied().unwrap_or(0.0);
    if base > 0.0 {
        raw.iter().map(|v| v / base).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

/// Per-cell channel L2 norm of `memory` (batch item 0), min-max scaled to 0..=255 and upscaled
/// by nearest neighbour to `width x height`. A constant memory maps to an all-zero image.
pub fn memory_heatmap<T: Real>(memory: &Tensor<T>, width: u32, height: u32) -> GrayImage {
    let norm = memory.item(0).channel_norm();
    let (h, w) = norm.hw();
    let vals: Vec<f64> = norm.data().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    GrayImage::from_fn(width, height, |x, y| {
        if !(range > 0.0) {
            return Luma([0]);
        }
        let sx = (x as usize * w / width as usize).min(w - 1);
        let sy = (y as usize * h / height as usize).min(h - 1);
        Luma([((vals[sy * w + sx] - lo) / range * 255.0).round() as u8])
    })
}
