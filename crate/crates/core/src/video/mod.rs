//! Video-level detector: a memory cell between the shared backbone and the detection heads.

pub mod model;
pub mod train;

pub use model::{
    annotation_boxes, bidirectional_merge, image_tensor, Carry, Direction, ModelConfig, Unrolled, VideoBound,
    VideoDetector, VideoOutput,
};
pub use train::{evaluate_loss, flip_tensor, train, window_loss, LogEntry, Progress, TrainConfig, TrainState, WindowLoss};

use crate::error::Result;
use crate::eval::{evaluate, frame_gts, memory_persistence, occlusion_onset, EvalReport, PersistenceCurve, SequenceResult};
use crate::nnkit::Real;
use crate::synth::SequenceSample;

/// Runs `model` over every sequence and scores the detections. The persistence curve of a
/// sequence follows its first annotated object from the start of its longest occlusion.
pub fn evaluate_model<T: Real>(
    model: &VideoDetector<T>,
    samples: &[SequenceSample],
    iou_threshold: f64,
    score_threshold: f64,
) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let out = model.detect_sequence(&s.frames)?;
        results.push(SequenceResult {
            detections: out.detections,
            ground_truth: s.annotations.iter().map(frame_gts).collect(),
            persistence: persistence_curve(i, s, &out.memory.iter().map(|m| m.memory.clone()).collect::<Vec<_>>(), model.frame.config.stride()),
        });
    }
    Ok(evaluate(&results, iou_threshold, score_threshold))
}

/// Persistence of the first object of `sample`, or `None` if it is never occluded or missing
/// from some frame.
pub fn persistence_curve<T: Real>(
    index: usize,
    sample: &SequenceSample,
    trace: &[crate::nnkit::Tensor<T>],
    stride: f64,
) -> Option<PersistenceCurve> {
    let track: Option<Vec<_>> = sample.annotations.iter().map(|a| a.objects.first()).collect();
    let track = track?;
    let onset = occlusion_onset(&track.iter().map(|o| o.occluded).collect::<Vec<_>>())?;
    let boxes: Vec<_> = track.iter().map(|o| crate::detector::BBox::from_coords(o.bbox)).collect();
    Some(PersistenceCurve {
        sequence: index,
        onset,
        values: memory_persistence(trace, &boxes, stride, onset),
    })
}
