use std::cmp::Ordering;

use crate::detector::boxes::{iou, BBox, BoxSet};

/// Greedy non-maximum suppression. Boxes are visited in descending score order (stable for
/// ties); a box is kept unless it overlaps an already kept box of the same label by more than
/// `iou_threshold`. Output is in descending score order.
pub fn nms(boxes: &[BBox], iou_threshold: f64) -> BoxSet {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .score
            .partial_cmp(&boxes[a].score)
            .unwrap_or(Ordering::Equal)
    });
    let mut kept: BoxSet = Vec::new();
    for i in order {
        let b = &boxes[i];
        if kept
            .iter()
            .all(|k| k.label != b.label || iou(k, b) <= iou_threshold)
        {
            kept.push(*b);
        }
    }
    kept
}
