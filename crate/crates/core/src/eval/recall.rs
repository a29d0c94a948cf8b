//! Recall split by occlusion state.

use crate::detector::{iou, BBox};
use crate::eval::{by_score_desc, GtBox};

/// Matched and total ground truth, split into occluded and visible boxes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecallSplit {
    pub occluded_hits: usize,
    pub occluded_total: usize,
    pub visible_hits: usize,
    pub visible_total: usize,
}

impl RecallSplit {
    /// Recall over occluded ground truth; `None` when there is none.
    pub fn occluded(&self) -> Option<f64> {
        ratio(self.occluded_hits, self.occluded_total)
    }

    pub fn visible(&self) -> Option<f64> {
        ratio(self.visible_hits, self.visible_total)
    }

    pub fn merge(&mut self, other: RecallSplit) {
        self.occluded_hits += other.occluded_hits;
        self.occluded_total += other.occluded_total;
        self.visible_hits += other.visible_hits;
        self.visible_total += other.visible_total;
    }
}

fn ratio(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Counts ground truth recovered by detections scoring at least `score_thr`. Within each frame,
/// detections are visited by descending score and each claims the unmatched same-class ground
/// truth with the highest IoU of at least `iou_thr`.
pub fn recall_by_visibility(dets: &[Vec<BBox>], gts: &[Vec<GtBox>], iou_thr: f64, score_thr: f64) -> RecallSplit {
    let mut out = RecallSplit::default();
    for (f, frame_gts) in gts.iter().enumerate() {
        let mut ranked: Vec<&BBox> = dets
            .get(f)
            .map(|d| d.iter().filter(|d| d.score >= score_thr).collect())
            .unwrap_or_default();
        ranked.sort_by(|a, b| by_score_desc(a.score, b.score));
        let mut hit = vec![false; frame_gts.len()];
        for d in ranked {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in frame_gts.iter().enumerate() {
                if hit[j] || g.bbox.label != d.label {
                    continue;
                }
                let o = iou(d, &g.bbox);
                if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                hit[j] = true;
            }
        }
        for (g, h) in frame_gts.iter().zip(hit) {
            if g.occluded {
                out.occluded_total += 1;
                out.occluded_hits += h as usize;
            } else {
                out.visible_total += 1;
                out.visible_hits += h as usize;
            }
        }
    }
    out
}
