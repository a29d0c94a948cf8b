//! Detection metrics, memory analysis and a greedy track linker.

pub mod ap;
pub mod memory;
pub mod recall;
pub mod report;
pub mod track;

pub use ap::{average_precision, mean_average_precision, ClassAp};
pub use memory::{memory_heatmap, memory_persistence, occlusion_onset, region_norm};
pub use recall::{recall_by_visibility, RecallSplit};
pub use report::{evaluate, EvalReport, PersistenceCurve, SequenceResult};
pub use track::{link_tracks, Track};

use crate::detector::BBox;
use crate::synth::FrameAnnotation;

/// A ground-truth box; `bbox.label` is the class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub occluded: bool,
}

/// Ground truth of one annotated frame.
pub fn frame_gts(ann: &FrameAnnotation) -> Vec<GtBox> {
    ann.objects
        .iter()
        .map(|o| GtBox {
            bbox: BBox::from_coords(o.bbox).with_label(o.class),
            occluded: o.occluded,
        })
        .collect()
}

/// Descending score order, stable for ties.
pub(crate) fn by_score_desc(a: f64, b: f64) -> std::cmp::Ordering {
    b.partial_cmp(&a).unwrap_or(std::cmp::Ordering::Equal)
}
