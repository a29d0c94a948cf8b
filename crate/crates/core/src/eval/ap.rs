//! VOC-style average precision with all-points interpolation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detector::{iou, BBox};
use crate::eval::{by_score_desc, GtBox};

/// Average precision of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub num_gt: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

/// AP of class `class` over a set of frames (`dets[i]` and `gts[i]` belong to frame `i`).
///
/// Detections of the class are ranked by score across all frames; each is matched to the
/// unmatched ground truth of the same frame and class with the highest IoU, provided that IoU is
/// at least `iou_thr`. The precision envelope is integrated over every recall step. Occluded
/// ground truth counts like any other. Returns `None` when the class has no ground truth.
pub fn average_precision(dets: &[Vec<BBox>], gts: &[Vec<GtBox>], class: usize, iou_thr: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.bbox.label == class).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, BBox)> = dets
        .iter()
        .enumerate()
        .flat_map(|(f, ds)| ds.iter().filter(|d| d.label == class).map(move |d| (f, *d)))
        .collect();
    ranked.sort_by(|a, b| by_score_desc(a.1.score, b.1.score));

    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for (f, d) in &ranked {
        let mut best: Option<(usize, f64)> = None;
        if let Some(frame_gts) = gts.get(*f) {
            for (j, g) in frame_gts.iter().enumerate() {
                if g.bbox.label != class || used[*f][j] {
                    continue;
                }
                let o = iou(d, &g.bbox);
                if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
        }
        match best {
            Some((j, _)) => {
                used[*f][j] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Monotone precision envelope from the right.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..recall.len() {
        if recall[k] > prev_recall {
            ap += (recall[k] - prev_recall) * precision[k];
            prev_recall = recall[k];
        }
    }
    Some(ap.clamp(0.0, 1.0))
}

/// Per-class AP for every class that appears in the ground truth or the detections, and their
/// mean over classes with ground truth. Classes without ground truth are reported with
/// `ap: None`, excluded from the mean and logged as a warning.
pub fn mean_average_precision(dets: &[Vec<BBox>], gts: &[Vec<GtBox>], iou_thr: f64) -> (Vec<ClassAp>, Option<f64>) {
    let classes: BTreeSet<usize> = gts
        .iter()
        .flatten()
        .map(|g| g.bbox.label)
        .chain(dets.iter().flatten().map(|d| d.label))
        .filter(|&c| c > 0)
        .collect();
    let mut per_class = Vec::with_capacity(classes.len());
    for class in classes {
        let num_gt = gts.iter().flatten().filter(|g| g.bbox.label == class).count();
        let ap = average_precision(dets, gts, class, iou_thr);
        if ap.is_none() {
            log::warn!("class {class} has no ground truth; excluded from mAP");
        }
        per_class.push(ClassAp { class, num_gt, ap });
    }
    let valid: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
    (per_class, map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(x: f64, y: f64, s: f64) -> GtBox {
        GtBox {
            bbox: BBox::new(x, y, x + s, y + s),
            occluded: false,
        }
    }

    /// Enumerates the PR curve one rank cut-off at a time, re-matching from scratch at each
    /// cut-off, and takes the all-points area as a sum over distinct recall levels of the best
    /// precision achieved at that recall or beyond.
    fn oracle(dets: &[Vec<BBox>], gts: &[Vec<GtBox>], class: usize, thr: f64) -> Option<f64> {
        let n_gt = gts.iter().flatten().filter(|g| g.bbox.label == class).count();
        if n_gt == 0 {
            return None;
        }
        let mut all: Vec<(usize, usize, BBox)> = Vec::new();
        for (f, ds) in dets.iter().enumerate() {
            for (i, d) in ds.iter().enumerate() {
                if d.label == class {
                    all.push((f, i, *d));
                }
            }
        }
        // Stable ranking: score, then frame, then position.
        all.sort_by(|a, b| b.2.score.partial_cmp(&a.2.score).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut points = Vec::new();
        for k in 1..=all.len() {
            let mut taken = std::collections::HashSet::new();
            let mut tp = 0;
            for (f, _, d) in &all[..k] {
                let cand = gts[*f]
                    .iter()
                    .enumerate()
                    .filter(|(j, g)| g.bbox.label == class && !taken.contains(&(*f, *j)))
                    .map(|(j, g)| (j, iou(d, &g.bbox)))
                    .filter(|(_, o)| *o >= thr)
                    .fold(None::<(usize, f64)>, |acc, (j, o)| match acc {
                        Some((_, bo)) if bo >= o => acc,
                        _ => Some((j, o)),
                    });
                if let Some((j, _)) = cand {
                    taken.insert((*f, j));
                    tp += 1;
                }
            }
            points.push((tp as f64 / n_gt as f64, tp as f64 / k as f64));
        }
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
        Some(ap)
    }

    #[test]
    fn perfect_and_empty_detections() {
        let gts = vec![vec![gt(0.0, 0.0, 10.0)], vec![gt(20.0, 20.0, 10.0), gt(50.0, 50.0, 8.0)]];
        let dets: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().map(|g| g.bbox.with_score(0.9)).collect()).collect();
        assert_eq!(average_precision(&dets, &gts, 1, 0.5), Some(1.0));
        assert_eq!(average_precision(&[vec![], vec![]], &gts, 1, 0.5), Some(0.0));
        assert_eq!(average_precision(&dets, &gts, 2, 0.5), None);
    }

    #[test]
    fn hand_built_five_detections_three_gt() {
        // Ranked: TP, FP, TP, FP (duplicate), TP.
        let gts = vec![vec![gt(0.0, 0.0, 10.0), gt(30.0, 0.0, 10.0), gt(60.0, 0.0, 10.0)]];
        let dets = vec![vec![
            BBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.9),
            BBox::new(100.0, 100.0, 110.0, 110.0).with_score(0.8),
            BBox::new(30.0, 0.0, 40.0, 10.0).with_score(0.7),
            BBox::new(1.0, 0.0, 11.0, 10.0).with_score(0.6),
            BBox::new(60.0, 0.0, 70.0, 10.0).with_score(0.5),
        ]];
        // Precision 1, 1/2, 2/3, 1/2, 3/5; envelope at recall steps: 1, 2/3, 3/5.
        let expected = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
        let ap = average_precision(&dets, &gts, 1, 0.5).unwrap();
        assert!((ap - expected).abs() < 1e-12);
        assert!((oracle(&dets, &gts, 1, 0.5).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn classes_without_ground_truth_are_excluded() {
        let gts = vec![vec![gt(0.0, 0.0, 10.0)]];
        let dets = vec![vec![
            BBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.9),
            BBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.9).with_label(3),
        ]];
        let (per_class, map) = mean_average_precision(&dets, &gts, 0.5);
        assert_eq!(per_class.len(), 2);
        assert_eq!(per_class[1].ap, None);
        assert_eq!(map, Some(1.0));
        assert_eq!(mean_average_precision(&[vec![]], &[vec![]], 0.5).1, None);
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<Vec<BBox>>, Vec<Vec<GtBox>>)> {
        let b = (0u8..6, 0u8..6, 2u8..5, 2u8..5);
        let det = (b.clone(), 0u8..5, 1usize..3)
            .prop_map(|((x, y, w, h), s, l)| {
                let (x, y) = (x as f64 * 4.0, y as f64 * 4.0);
                BBox::new(x, y, x + w as f64 * 5.0, y + h as f64 * 5.0).with_score(s as f64 / 4.0).with_label(l)
            });
        let g = (b, any::<bool>(), 1usize..3).prop_map(|((x, y, w, h), occluded, l)| {
            let (x, y) = (x as f64 * 4.0, y as f64 * 4.0);
            GtBox {
                bbox: BBox::new(x, y, x + w as f64 * 5.0, y + h as f64 * 5.0).with_label(l),
                occluded,
            }
        });
        (
            prop::collection::vec(det, 0..=10),
            prop::collection::vec(g, 0..=5),
            prop::collection::vec(0usize..3, 0..=15),
        )
            .prop_map(|(dets, gts, split)| {
                // Scatter detections and ground truth across three frames.
                let mut d = vec![Vec::new(); 3];
                let mut g = vec![Vec::new(); 3];
                for (i, x) in dets.into_iter().enumerate() {
                    d[split.get(i).copied().unwrap_or(0)].push(x);
                }
                for (i, x) in gts.into_iter().enumerate() {
                    g[split.get(10 + i).copied().unwrap_or(i % 3)].push(x);
                }
                (d, g)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn ap_matches_brute_force_oracle((dets, gts) in arb_instance(), thr in prop::sample::select(vec![0.3, 0.5, 0.7])) {
            for class in 1..3 {
                let a = average_precision(&dets, &gts, class, thr);
                let b = oracle(&dets, &gts, class, thr);
                match (a, b) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                    (a, b) => prop_assert_eq!(a, b),
                }
                if let Some(a) = a {
                    prop_assert!((0.0..=1.0).contains(&a));
                }
            }
        }
    }
}
