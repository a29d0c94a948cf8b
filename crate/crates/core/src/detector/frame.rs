use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::anchors::generate_anchors;
use crate::detector::boxes::{BBox, BoxSet};
use crate::detector::config::DetectorConfig;
use crate::detector::nms::nms;
use crate::error::{Error, Result};
use crate::nnkit::ops::sigmoid_scalar;
use crate::nnkit::params::{bias, he_conv, normal};
use crate::nnkit::tape::softmax_rows;
use crate::nnkit::{Bound, ParamStore, Real, Tape, Tensor, Var};

/// Tape handles of the RPN outputs: objectness logits (1, A, H, W) and deltas (1, 4A, H, W).
#[derive(Debug, Clone, Copy)]
pub struct RpnOutput {
    pub objectness: Var,
    pub deltas: Var,
}

/// Tape handles of the ROI head outputs: class logits (R, K+1) and class-specific deltas
/// (R, 4(K+1)), both stored as (R, n, 1, 1).
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub class_logits: Var,
    pub box_deltas: Var,
}

/// Proposal budget for one call of [`rpn_propose`].
#[derive(Debug, Clone, Copy)]
pub struct ProposalLimits {
    pub pre_nms: usize,
    pub post_nms: usize,
    pub nms_threshold: f64,
}

/// The frame-level detector: backbone, region proposal network and ROI head.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetector<T: Real> {
    pub config: DetectorConfig,
    pub params: ParamStore<T>,
}

const BACKBONE: [&str; 4] = ["backbone.conv1", "backbone.conv2", "backbone.conv3", "backbone.conv4"];

impl<T: Real> FrameDetector<T> {
    pub fn new(config: DetectorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut cin = 3;
        for (name, &cout) in BACKBONE.iter().zip(&config.backbone_channels) {
            p.insert(format!("{name}.w"), he_conv(&mut rng, cout, cin, 3));
            p.insert(format!("{name}.b"), bias(cout, 0.0));
            cin = cout;
        }
        let c = config.feature_channels();
        let a = config.num_anchors();
        let r = config.rpn_channels;
        p.insert("rpn.conv.w", he_conv(&mut rng, r, c, 3));
        p.insert("rpn.conv.b", bias(r, 0.0));
        p.insert("rpn.cls.w", normal([a, r, 1, 1], 0.01, &mut rng));
        p.insert("rpn.cls.b", bias(a, 0.0));
        p.insert("rpn.reg.w", normal([4 * a, r, 1, 1], 0.001, &mut rng));
        p.insert("rpn.reg.b", bias(4 * a, 0.0));

        let k = config.num_classes + 1;
        let fin = c * config.roi_size * config.roi_size;
        let hid = config.head_hidden;
        p.insert(
            "head.fc1.w",
            normal([hid, fin, 1, 1], (2.0 / fin as f64).sqrt(), &mut rng),
        );
        p.insert("head.fc1.b", bias(hid, 0.0));
        p.insert("head.cls.w", normal([k, hid, 1, 1], 0.01, &mut rng));
        p.insert("head.cls.b", bias(k, 0.0));
        p.insert("head.reg.w", normal([4 * k, hid, 1, 1], 0.001, &mut rng));
        p.insert("head.reg.b", bias(4 * k, 0.0));
        FrameDetector { config, params: p }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Four 3x3 conv + ReLU blocks with 2x2 max pooling after the first three: stride 8.
    pub fn backbone(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        if tape.value(image).channels() != 3 {
            return Err(Error::contract("backbone expects an RGB image"));
        }
        let mut x = image;
        for (i, name) in BACKBONE.iter().enumerate() {
            let w = p.var(&format!("{name}.w"))?;
            let b = p.var(&format!("{name}.b"))?;
            x = tape.conv2d(x, w, Some(b), 1, 1)?;
            x = tape.relu(x);
            if i < 3 {
                x = tape.maxpool2x2(x);
            }
        }
        Ok(x)
    }

    pub fn rpn(&self, tape: &mut Tape<T>, p: &Bound, feature: Var) -> Result<RpnOutput> {
        let h = tape.conv2d(feature, p.var("rpn.conv.w")?, Some(p.var("rpn.conv.b")?), 1, 1)?;
        let h = tape.relu(h);
        let objectness = tape.conv2d(h, p.var("rpn.cls.w")?, Some(p.var("rpn.cls.b")?), 1, 0)?;
        let deltas = tape.conv2d(h, p.var("rpn.reg.w")?, Some(p.var("rpn.reg.b")?), 1, 0)?;
        Ok(RpnOutput { objectness, deltas })
    }

    pub fn head(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        feature: Var,
        rois: &[BBox],
    ) -> Result<HeadOutput> {
        let coords: Vec<[f64; 4]> = rois.iter().map(BBox::coords).collect();
        let pooled = tape.roi_pool(feature, &coords, self.config.stride(), self.config.roi_size)?;
        let h = tape.linear(pooled, p.var("head.fc1.w")?, p.var("head.fc1.b")?)?;
        let h = tape.relu(h);
        let class_logits = tape.linear(h, p.var("head.cls.w")?, p.var("head.cls.b")?)?;
        let box_deltas = tape.linear(h, p.var("head.reg.w")?, p.var("head.reg.b")?)?;
        Ok(HeadOutput {
            class_logits,
            box_deltas,
        })
    }

    pub fn anchors(&self, feat_h: usize, feat_w: usize) -> BoxSet {
        generate_anchors(
            feat_h,
            feat_w,
            self.config.stride(),
            &self.config.anchor_scales,
            &self.config.anchor_ratios,
        )
    }

    pub fn train_limits(&self) -> ProposalLimits {
        ProposalLimits {
            pre_nms: self.config.rpn_pre_nms_train,
            post_nms: self.config.rpn_post_nms_train,
            nms_threshold: self.config.rpn_nms_threshold,
        }
    }

    pub fn test_limits(&self) -> ProposalLimits {
        ProposalLimits {
            pre_nms: self.config.rpn_pre_nms_test,
            post_nms: self.config.rpn_post_nms_test,
            nms_threshold: self.config.rpn_nms_threshold,
        }
    }

    /// Backbone feature of one image, without recording gradients.
    pub fn backbone_forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let f = self.backbone(&mut tape, &p, x)?;
        Ok(tape.value(f).clone())
    }

    /// Full frame pipeline: backbone, proposals, ROI head, decoding and per-class NMS.
    pub fn detect_frame(&self, image: &Tensor<T>) -> Result<BoxSet> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let f = self.backbone(&mut tape, &p, x)?;
        self.detect_on(&mut tape, &p, f, image.hw())
    }

    /// Detection heads on an arbitrary feature (a backbone feature or a memory map).
    pub fn detect_on(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        feature: Var,
        image_hw: (usize, usize),
    ) -> Result<BoxSet> {
        let rpn = self.rpn(tape, p, feature)?;
        let (fh, fw) = tape.value(feature).hw();
        let anchors = self.anchors(fh, fw);
        let proposals = rpn_propose(
            tape.value(rpn.objectness),
            tape.value(rpn.deltas),
            &anchors,
            image_hw,
            self.test_limits(),
        );
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let head = self.head(tape, p, feature, &proposals)?;
        Ok(self.postprocess(
            tape.value(head.class_logits),
            tape.value(head.box_deltas),
            &proposals,
            image_hw,
            self.config.score_threshold,
        ))
    }

    /// Turns head outputs into scored, clipped, NMS-filtered detections.
    pub fn postprocess(
        &self,
        class_logits: &Tensor<T>,
        box_deltas: &Tensor<T>,
        rois: &[BBox],
        image_hw: (usize, usize),
        score_threshold: f64,
    ) -> BoxSet {
        let k = self.config.num_classes + 1;
        let probs = softmax_rows(class_logits);
        let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
        let mut dets = Vec::new();
        for (r, roi) in rois.iter().enumerate() {
            for c in 1..k {
                let score = to_f64(probs.data()[r * k + c]);
                if score < score_threshold {
                    continue;
                }
                let o = r * 4 * k + 4 * c;
                let d = [0, 1, 2, 3].map(|j| to_f64(box_deltas.data()[o + j]));
                let b = roi.decode(d).clip(iw, ih).with_label(c).with_score(score.clamp(0.0, 1.0));
                if b.width() > 1.0 && b.height() > 1.0 {
                    dets.push(b);
                }
            }
        }
        let mut kept = nms(&dets, self.config.nms_threshold);
        kept.truncate(self.config.max_detections);
        kept
    }
}

pub(crate) fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Region proposals: decode every anchor, clip to the image, drop boxes with a side of at most
/// one pixel, keep the `pre_nms` highest objectness scores, suppress at the RPN threshold and
/// truncate to `post_nms`. Proposals carry label 1 and their sigmoid objectness as score.
pub fn rpn_propose<T: Real>(
    objectness: &Tensor<T>,
    deltas: &Tensor<T>,
    anchors: &[BBox],
    image_hw: (usize, usize),
    limits: ProposalLimits,
) -> BoxSet {
    let [_, a, h, w] = objectness.shape();
    let plane = h * w;
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let mut cands: Vec<BBox> = Vec::with_capacity(anchors.len());
    for y in 0..h {
        for x in 0..w {
            for k in 0..a {
                let idx = (y * w + x) * a + k;
                let cell = y * w + x;
                let score = sigmoid_scalar(to_f64(objectness.data()[k * plane + cell]));
                let d = [0, 1, 2, 3].map(|j| to_f64(deltas.data()[(4 * k + j) * plane + cell]));
                let b = anchors[idx].decode(d).clip(iw, ih).with_score(score).with_label(1);
                if b.width() > 1.0 && b.height() > 1.0 {
                    cands.push(b);
                }
            }
        }
    }
    cands.sort_by(|p, q| q.score.partial_cmp(&p.score).unwrap_or(Ordering::Equal));
    cands.truncate(limits.pre_nms);
    let mut kept = nms(&cands, limits.nms_threshold);
    kept.truncate(limits.post_nms);
    kept
}
