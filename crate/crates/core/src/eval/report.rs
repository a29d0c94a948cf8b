//! Aggregate evaluation over a split of sequences.

use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::eval::ap::{mean_average_precision, ClassAp};
use crate::eval::recall::{recall_by_visibility, RecallSplit};
use crate::eval::GtBox;

/// Persistence curve of the tracked object of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceCurve {
    pub sequence: usize,
    pub onset: usize,
    pub values: Vec<f64>,
}

impl PersistenceCurve {
    /// Value `offset` frames after onset, if the sequence is long enough.
    pub fn after_onset(&self, offset: usize) -> Option<f64> {
        self.values.get(self.onset + offset).copied()
    }
}

/// Model outputs and ground truth of one sequence.
#[derive(Debug, Clone, Default)]
pub struct SequenceResult {
    pub detections: Vec<Vec<BBox>>,
    pub ground_truth: Vec<Vec<GtBox>>,
    pub persistence: Option<PersistenceCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub num_sequences: usize,
    pub num_frames: usize,
    pub per_class_ap: Vec<ClassAp>,
    pub map: Option<f64>,
    /// Recall over occluded ground truth; absent when the split has none.
    pub occluded_recall: Option<f64>,
    pub visible_recall: Option<f64>,
    pub persistence: Vec<PersistenceCurve>,
}

impl EvalReport {
    /// Mean persistence `offset` frames after onset over the sequences long enough to have it.
    pub fn mean_persistence_at(&self, offset: usize) -> Option<f64> {
        let vals: Vec<f64> = self.persistence.iter().filter_map(|c| c.after_onset(offset)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Whether AP, mAP and recall values all lie in [0, 1].
    pub fn metrics_in_unit_range(&self) -> bool {
        let unit = |v: Option<f64>| v.is_none_or(|v| (0.0..=1.0).contains(&v));
        self.per_class_ap.iter().all(|c| unit(c.ap))
            && unit(self.map)
            && unit(self.occluded_recall)
            && unit(self.visible_recall)
    }
}

/// AP is pooled over every frame of every sequence; recall uses detections scoring at least
/// `score_threshold`.
pub fn evaluate(results: &[SequenceResult], iou_threshold: f64, score_threshold: f64) -> EvalReport {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut recall = RecallSplit::default();
    for r in results {
        let n = r.ground_truth.len();
        let mut d = r.detections.clone();
        d.resize(n, Vec::new());
        recall.merge(recall_by_visibility(&d, &r.ground_truth, iou_threshold, score_threshold));
        dets.extend(d);
        gts.extend(r.ground_truth.iter().cloned());
    }
    let (per_class_ap, map) = mean_average_precision(&dets, &gts, iou_threshold);
    EvalReport {
        iou_threshold,
        score_threshold,
        num_sequences: results.len(),
        num_frames: gts.len(),
        per_class_ap,
        map,
        occluded_recall: recall.occluded(),
        visible_recall: recall.visible(),
        persistence: results.iter().filter_map(|r| r.persistence.clone()).collect(),
    }
}
