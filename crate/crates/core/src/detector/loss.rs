//! Training targets and the four-part detection loss.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::detector::boxes::{iou, BBox, Deltas};
use crate::detector::frame::{FrameDetector, HeadOutput, RpnOutput};
use crate::error::Result;
use crate::nnkit::{Bound, Real, Tape, Var};

/// Smooth-L1 transition point for both regression losses.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Sampled supervision for one frame. Indices refer to the flat layout of the RPN/head outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTargets {
    /// (anchor index, objectness target in {0, 1}).
    pub rpn_labels: Vec<(usize, f64)>,
    /// (anchor index, regression target) for positive anchors.
    pub rpn_deltas: Vec<(usize, Deltas)>,
    /// Sampled regions fed to the head.
    pub rois: Vec<BBox>,
    /// Class label (0 = background) for every sampled region.
    pub roi_labels: Vec<usize>,
    /// (roi index, regression target) for foreground regions.
    pub roi_deltas: Vec<(usize, Deltas)>,
}

/// Scalar loss components, each already normalised by its sample count.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub head_cls: Var,
    pub head_reg: Var,
    pub total: Var,
}

impl LossBundle {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> [f64; 4] {
        [self.rpn_cls, self.rpn_reg, self.head_cls, self.head_reg]
            .map(|v| tape.value(v).data()[0].to_f64().unwrap_or(f64::NAN))
    }
}

/// Anchor labelling: positive when IoU >= `pos_iou` with some ground truth or when the anchor is
/// a ground truth's best match; negative when max IoU < `neg_iou`; otherwise ignored. Up to
/// `batch` anchors are sampled at random with at most `pos_fraction` positives.
pub fn sample_rpn_targets(
    anchors: &[BBox],
    gts: &[BBox],
    pos_iou: f64,
    neg_iou: f64,
    batch: usize,
    pos_fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<(usize, f64)>, Vec<(usize, Deltas)>) {
    let mut best_gt = vec![(0.0f64, usize::MAX); anchors.len()];
    let mut gt_best = vec![(0.0f64, Vec::new()); gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let o = iou(a, g);
            if o > best_gt[i].0 {
                best_gt[i] = (o, j);
            }
            if o > gt_best[j].0 + 1e-12 {
                gt_best[j] = (o, vec![i]);
            } else if o > 0.0 && (o - gt_best[j].0).abs() <= 1e-12 {
                gt_best[j].1.push(i);
            }
        }
    }
    let mut label = vec![None; anchors.len()];
    for (i, &(o, _)) in best_gt.iter().enumerate() {
        if o < neg_iou {
            label[i] = Some(false);
        } else if o >= pos_iou {
            label[i] = Some(true);
        }
    }
    for (_, idx) in &gt_best {
        for &i in idx {
            label[i] = Some(true);
        }
    }
    let mut pos: Vec<usize> = (0..anchors.len()).filter(|&i| label[i] == Some(true)).collect();
    let mut neg: Vec<usize> = (0..anchors.len()).filter(|&i| label[i] == Some(false)).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(((batch as f64) * pos_fraction).floor() as usize);
    neg.truncate(batch - pos.len());

    let mut labels: Vec<(usize, f64)> = pos.iter().map(|&i| (i, 1.0)).collect();
    labels.extend(neg.iter().map(|&i| (i, 0.0)));
    labels.sort_by_key(|&(i, _)| i);
    let mut deltas: Vec<(usize, Deltas)> = pos
        .iter()
        .map(|&i| (i, gts[best_gt[i].1].encode(&anchors[i])))
        .collect();
    deltas.sort_by_key(|&(i, _)| i);
    (labels, deltas)
}

/// Region sampling for the head: proposals plus the ground-truth boxes themselves, labelled
/// foreground when IoU >= `fg_iou`, sampled at random with at most `pos_fraction` foreground.
pub fn sample_roi_targets(
    proposals: &[BBox],
    gts: &[BBox],
    fg_iou: f64,
    batch: usize,
    pos_fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<BBox>, Vec<usize>, Vec<(usize, Deltas)>) {
    let mut cands: Vec<BBox> = proposals.to_vec();
    cands.extend(gts.iter().copied());
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, c) in cands.iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .map(|(j, g)| (iou(c, g), j))
            .fold((0.0, usize::MAX), |a, b| if b.0 > a.0 { b } else { a });
        if best.0 >= fg_iou {
            fg.push((i, best.1));
        } else {
            bg.push(i);
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate(((batch as f64) * pos_fraction).floor() as usize);
    bg.truncate(batch - fg.len());

    let mut rois = Vec::with_capacity(fg.len() + bg.len());
    let mut labels = Vec::with_capacity(fg.len() + bg.len());
    let mut deltas = Vec::with_capacity(fg.len());
    for &(i, j) in &fg {
        deltas.push((rois.len(), gts[j].encode(&cands[i])));
        rois.push(cands[i]);
        labels.push(gts[j].label);
    }
    for &i in &bg {
        rois.push(cands[i]);
        labels.push(0);
    }
    (rois, labels, deltas)
}

impl<T: Real> FrameDetector<T> {
    /// Samples anchor and region targets for one frame given the current proposals.
    pub fn sample_targets(
        &self,
        feat_hw: (usize, usize),
        proposals: &[BBox],
        gts: &[BBox],
        rng: &mut impl Rng,
    ) -> LossTargets {
        let c = &self.config;
        let anchors = self.anchors(feat_hw.0, feat_hw.1);
        let (rpn_labels, rpn_deltas) = sample_rpn_targets(
            &anchors,
            gts,
            c.rpn_positive_iou,
            c.rpn_negative_iou,
            c.rpn_batch,
            c.rpn_positive_fraction,
            rng,
        );
        let (rois, roi_labels, roi_deltas) = sample_roi_targets(
            proposals,
            gts,
            c.roi_foreground_iou,
            c.roi_batch,
            c.roi_positive_fraction,
            rng,
        );
        LossTargets {
            rpn_labels,
            rpn_deltas,
            rois,
            roi_labels,
            roi_deltas,
        }
    }

    /// RPN objectness (binary cross-entropy), RPN regression, head classification (softmax
    /// cross-entropy) and class-specific head regression (smooth L1). Regression terms are
    /// divided by the number of sampled anchors / regions, so frames without ground truth
    /// contribute zero regression loss.
    pub fn detector_loss(
        &self,
        tape: &mut Tape<T>,
        rpn: &RpnOutput,
        head: Option<&HeadOutput>,
        targets: &LossTargets,
    ) -> Result<LossBundle> {
        let [_, a, h, w] = tape.value(rpn.objectness).shape();
        let plane = h * w;
        let split = |i: usize| (i % a, i / a);

        let n_rpn = T::lit(targets.rpn_labels.len().max(1) as f64);
        let cls_entries = targets
            .rpn_labels
            .iter()
            .map(|&(i, t)| {
                let (k, cell) = split(i);
                (k * plane + cell, T::lit(t))
            })
            .collect();
        let rpn_cls = tape.bce_logits(rpn.objectness, cls_entries, n_rpn);
        let reg_entries = targets
            .rpn_deltas
            .iter()
            .flat_map(|&(i, d)| {
                let (k, cell) = split(i);
                (0..4).map(move |j| ((4 * k + j) * plane + cell, T::lit(d[j])))
            })
            .collect();
        let beta = T::lit(SMOOTH_L1_BETA);
        let rpn_reg = tape.smooth_l1(rpn.deltas, reg_entries, beta, n_rpn);

        let (head_cls, head_reg) = match head {
            Some(head) if !targets.rois.is_empty() => {
                let k = self.config.num_classes + 1;
                let n_roi = T::lit(targets.rois.len() as f64);
                let cls = tape.softmax_ce(head.class_logits, targets.roi_labels.clone(), n_roi)?;
                let entries = targets
                    .roi_deltas
                    .iter()
                    .flat_map(|&(r, d)| {
                        let c = targets.roi_labels[r];
                        (0..4).map(move |j| (r * 4 * k + 4 * c + j, T::lit(d[j])))
                    })
                    .collect();
                let reg = tape.smooth_l1(head.box_deltas, entries, beta, n_roi);
                (cls, reg)
            }
            _ => {
                let z1 = tape.scale(rpn_cls, T::zero());
                let z2 = tape.scale(rpn_cls, T::zero());
                (z1, z2)
            }
        };
        let total = tape.sum_scalars(&[rpn_cls, rpn_reg, head_cls, head_reg]);
        Ok(LossBundle {
            rpn_cls,
            rpn_reg,
            head_cls,
            head_reg,
            total,
        })
    }

    /// One frame's forward pass and loss on an arbitrary feature (backbone output or memory).
    pub fn frame_loss(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        feature: Var,
        image_hw: (usize, usize),
        gts: &[BBox],
        rng: &mut impl Rng,
    ) -> Result<LossBundle> {
        let rpn = self.rpn(tape, p, feature)?;
        let feat_hw = tape.value(feature).hw();
        let anchors = self.anchors(feat_hw.0, feat_hw.1);
        let proposals = crate::detector::frame::rpn_propose(
            tape.value(rpn.objectness),
            tape.value(rpn.deltas),
            &anchors,
            image_hw,
            self.train_limits(),
        );
        let targets = self.sample_targets(feat_hw, &proposals, gts, rng);
        let head = if targets.rois.is_empty() {
            None
        } else {
            Some(self.head(tape, p, feature, &targets.rois)?)
        };
        self.detector_loss(tape, &rpn, head.as_ref(), &targets)
    }
}
