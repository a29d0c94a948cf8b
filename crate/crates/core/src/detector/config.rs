use serde::{Deserialize, Serialize};

/// Architecture and inference hyperparameters of the region-based detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Foreground classes; label 0 is background.
    pub num_classes: usize,
    /// Output channels of the four backbone conv blocks; the last one is the feature width C.
    pub backbone_channels: [usize; 4],
    pub rpn_channels: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub roi_size: usize,
    pub head_hidden: usize,

    pub rpn_pre_nms_train: usize,
    pub rpn_post_nms_train: usize,
    pub rpn_pre_nms_test: usize,
    pub rpn_post_nms_test: usize,
    pub rpn_nms_threshold: f64,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,

    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    pub roi_foreground_iou: f64,

    pub nms_threshold: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
}

/// Backbone output stride: three 2x2 poolings.
pub const FEATURE_STRIDE: usize = 8;

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: 1,
            backbone_channels: [16, 32, 64, 64],
            rpn_channels: 64,
            anchor_scales: vec![20.0, 32.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            roi_size: 7,
            head_hidden: 128,
            rpn_pre_nms_train: 600,
            rpn_post_nms_train: 64,
            rpn_pre_nms_test: 300,
            rpn_post_nms_test: 32,
            rpn_nms_threshold: 0.7,
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            rpn_batch: 64,
            rpn_positive_fraction: 0.5,
            roi_batch: 32,
            roi_positive_fraction: 0.25,
            roi_foreground_iou: 0.5,
            nms_threshold: 0.3,
            score_threshold: 0.05,
            max_detections: 20,
        }
    }
}

impl DetectorConfig {
    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[3]
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn stride(&self) -> f64 {
        FEATURE_STRIDE as f64
    }

    /// Feature-map extent for an image: ceil-halving three times.
    pub fn feature_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let f = |n: usize| n.div_ceil(2).div_ceil(2).div_ceil(2);
        (f(height), f(width))
    }
}
