use crate::detector::boxes::{BBox, BoxSet};

/// One anchor per (cell, scale, ratio), ordered cell-major (row, then column), then scale,
/// then ratio. Anchor `a` of cell `(y, x)` is therefore at index `(y * width + x) * A + a`.
///
/// Anchors are centred on the image-space cell centre `((x + 0.5) * stride, (y + 0.5) * stride)`.
/// A ratio `r` is height / width at constant area `scale^2`: `w = scale / sqrt(r)`,
/// `h = scale * sqrt(r)`. No rounding is applied.
pub fn generate_anchors(
    feat_h: usize,
    feat_w: usize,
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
) -> BoxSet {
    let shapes: Vec<(f64, f64)> = scales
        .iter()
        .flat_map(|&s| ratios.iter().map(move |&r| (s / r.sqrt(), s * r.sqrt())))
        .collect();
    let mut out = Vec::with_capacity(feat_h * feat_w * shapes.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            for &(w, h) in &shapes {
                out.push(BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h));
            }
        }
    }
    out
}
