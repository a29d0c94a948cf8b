//! Frame-level region-based detector: backbone, anchors, RPN, ROI head, losses and NMS.

pub mod anchors;
pub mod boxes;
pub mod config;
pub mod frame;
pub mod loss;
pub mod nms;

pub use anchors::generate_anchors;
pub use boxes::{iou, BBox, BoxSet, Deltas};
pub use config::{DetectorConfig, FEATURE_STRIDE};
pub use frame::{rpn_propose, FrameDetector, HeadOutput, ProposalLimits, RpnOutput};
pub use loss::{LossBundle, LossTargets};
pub use nms::nms;
