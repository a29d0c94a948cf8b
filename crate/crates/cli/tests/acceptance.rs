//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default; `OCCTRACK_ACCEPTANCE=1,2,7` restricts the run to the listed
//! criteria. The training criteria (3 to 6) follow the default run configuration of the CLI and
//! only fail the process when `OCCTRACK_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command as Process, ExitCode};
use std::time::Instant;

use occtrack::detector::{nms, BBox};
use occtrack::eval::{average_precision, EvalReport, GtBox};
use occtrack::memory::{
    affinity_field, apply_affinity, build_pyramid, cell_param_delta, decode_upsample, learned_align_step, stmm_step,
    CellConfig, CellKind, GateKind, MemoryCell,
};
use occtrack::nnkit::{grad_check_sampled, Bound, Tape, Tensor, Var};
use occtrack::video::{image_tensor, Direction, VideoDetector};
use occtrack_cli::commands::{self, weights_name, FRAME_WEIGHTS};
use occtrack_cli::config::parse_pairs;
use occtrack_cli::files::dir_digest;
use occtrack_cli::{EvalArgs, GenArgs, RunConfig, Stage, TrainArgs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and thresholds.
const NNKIT_GRAD_TOL: f64 = 1e-4;
const CELL_GRAD_TOL: f64 = 1e-3;
const ORACLE_CASES: usize = 1000;
const PROPERTY_BUDGET_SECS: f64 = 600.0;
const MAP_GAP: f64 = 0.03;
const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];
const PERSISTENCE_OFFSET: usize = 20;
const PERSISTENCE_RATIO: f64 = 1.2;
const MIN_PERSISTENCE_SEQUENCES: usize = 20;
const OCCLUDED_RECALL_GAP: f64 = 0.05;
const TRANSFER_STEPS: usize = 1000;
const TRANSFER_CHECKPOINTS: usize = 10;
const TRANSFER_FRACTION: f64 = 0.5;
const IDENTITY_IMAGES: usize = 100;
/// Criteria whose failure fails the test target; the benchmark criteria only report.
const GATING: [usize; 4] = [1, 2, 7, 8];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

// Criterion 1: property suite.

fn nnkit_grad_checks() -> (f64, usize) {
    type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> occtrack::Result<Var>>);
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut cases: Vec<Case> = vec![
        (
            "conv2d stride 1 pad 1",
            vec![random([2, 3, 5, 6], &mut rng, 1.0), random([4, 3, 3, 3], &mut rng, 0.5), random([1, 4, 1, 1], &mut rng, 0.5)],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        (
            "conv2d stride 2 pad 0",
            vec![random([1, 2, 7, 7], &mut rng, 1.0), random([3, 2, 3, 3], &mut rng, 0.5)],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, 2, 0)),
        ),
        (
            "linear",
            vec![random([3, 4, 2, 1], &mut rng, 1.0), random([5, 8, 1, 1], &mut rng, 0.5), random([1, 5, 1, 1], &mut rng, 0.5)],
            Box::new(|t, v| t.linear(v[0], v[1], v[2])),
        ),
        ("relu", vec![random([1, 3, 4, 4], &mut rng, 1.0)], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("sigmoid", vec![random([1, 3, 4, 4], &mut rng, 3.0)], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        (
            "normalised relu",
            vec![random([2, 3, 3, 4], &mut rng, 1.0)],
            Box::new(|t, v| Ok(t.relu_max_norm(v[0], 1e-6))),
        ),
        ("max pool 2x2 (odd size)", vec![random([1, 2, 5, 7], &mut rng, 1.0)], Box::new(|t, v| Ok(t.maxpool2x2(v[0])))),
        ("bilinear upsample 2x", vec![random([1, 2, 3, 4], &mut rng, 1.0)], Box::new(|t, v| Ok(t.upsample2x(v[0])))),
        ("pad", vec![random([1, 2, 4, 4], &mut rng, 1.0)], Box::new(|t, v| Ok(t.pad_or_crop(v[0], 5, 5)))),
        ("crop", vec![random([1, 2, 6, 5], &mut rng, 1.0)], Box::new(|t, v| Ok(t.pad_or_crop(v[0], 5, 4)))),
        (
            "concat",
            vec![random([1, 2, 3, 3], &mut rng, 1.0), random([1, 3, 3, 3], &mut rng, 1.0)],
            Box::new(|t, v| t.concat(v[0], v[1])),
        ),
        (
            "add, sub, mul, one_minus, scale",
            vec![random([1, 2, 3, 3], &mut rng, 1.0), random([1, 2, 3, 3], &mut rng, 1.0)],
            Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                let s = t.sub(a, v[1])?;
                let m = t.mul(s, v[1])?;
                let o = t.one_minus(m);
                Ok(t.scale(o, 0.7))
            }),
        ),
        ("reshape", vec![random([1, 4, 3, 2], &mut rng, 1.0)], Box::new(|t, v| t.reshape(v[0], [2, 12, 1, 1]))),
        (
            "roi pool",
            vec![random([1, 3, 8, 8], &mut rng, 1.0)],
            Box::new(|t, v| t.roi_pool(v[0], &[[3.0, 5.0, 40.0, 33.0], [0.0, 0.0, 63.0, 63.0], [20.0, 8.0, 30.0, 50.0]], 8.0, 3)),
        ),
        (
            "binary cross-entropy on logits",
            vec![random([1, 6, 2, 2], &mut rng, 3.0)],
            Box::new(|t, v| Ok(t.bce_logits(v[0], vec![(0, 1.0), (3, 0.0), (7, 1.0), (20, 0.0)], 4.0))),
        ),
        (
            "softmax cross-entropy",
            vec![random([4, 3, 1, 1], &mut rng, 2.0)],
            Box::new(|t, v| t.softmax_ce(v[0], vec![0, 2, 1, 2], 4.0)),
        ),
        (
            "smooth L1",
            vec![random([1, 8, 1, 1], &mut rng, 2.0)],
            Box::new(|t, v| Ok(t.smooth_l1(v[0], vec![(0, 0.1), (2, 1.5), (5, -0.3), (7, 0.9)], 1.0 / 9.0, 4.0))),
        ),
        (
            "sum of scalars",
            vec![random([1, 1, 1, 1], &mut rng, 1.0), random([1, 1, 1, 1], &mut rng, 1.0)],
            Box::new(|t, v| {
                let a = t.scale(v[0], 2.0);
                Ok(t.sum_scalars(&[a, v[1]]))
            }),
        ),
    ];
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for (i, (name, inputs, f)) in cases.drain(..).enumerate() {
        let r = grad_check_sampled(&inputs, 1e-6, 200, i as u64, |t, v| f(t, v)).expect(name);
        worst = worst.max(r.max_rel_error);
        if !r.passed(NNKIT_GRAD_TOL) {
            eprintln!("  nnkit grad check `{name}` failed: {r:?}");
            failures += 1;
        }
    }
    (worst, failures)
}

fn scrambled_cell(kind: CellKind, channels: usize, levels: usize, seed: u64) -> MemoryCell<f64> {
    let mut c = MemoryCell::new(
        CellConfig {
            kind,
            channels,
            levels,
            ..CellConfig::default()
        },
        seed,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (_, t) in c.params.iter_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    c
}

fn cell_grad_checks() -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let cases: [(&str, CellKind, usize, GateKind); 5] = [
        ("stmm sigmoid", CellKind::Stmm, 1, GateKind::Sigmoid),
        ("stmm normalised relu", CellKind::Stmm, 1, GateKind::NormalizedRelu),
        ("matchtrans", CellKind::StmmMatchTrans, 1, GateKind::Sigmoid),
        ("learned_align L=3", CellKind::LearnedAlign, 3, GateKind::Sigmoid),
        ("learned_align L=2", CellKind::LearnedAlign, 2, GateKind::Sigmoid),
    ];
    for (i, (name, kind, levels, gate)) in cases.into_iter().enumerate() {
        let mut c = scrambled_cell(kind, 2, levels, 200 + i as u64);
        c.config.gate = gate;
        let names: Vec<String> = c.params.iter().map(|(k, _)| k.clone()).collect();
        let mut inputs: Vec<Tensor<f64>> = c.params.iter().map(|(_, v)| v.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(300 + i as u64);
        for _ in 0..3 {
            inputs.push(random([1, 2, 7, 6], &mut rng, 1.0));
        }
        let n = names.len();
        // Two unrolled steps, so gradients also flow through the recurrence.
        let r = grad_check_sampled(&inputs, 1e-5, 40, i as u64, |t, v| {
            let p = Bound::from_pairs(names.iter().cloned().zip(v[..n].iter().copied()));
            let m1 = c.step(t, &p, v[n], None, v[n + 1])?;
            c.step(t, &p, m1, Some(v[n + 1]), v[n + 2])
        })
        .unwrap();
        worst = worst.max(r.max_rel_error);
        if !r.passed(CELL_GRAD_TOL) {
            eprintln!("  cell grad check `{name}` failed: {r:?}");
            failures += 1;
        }
    }
    (worst, failures)
}

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn random_box(rng: &mut ChaCha8Rng, labels: usize, scores: &[f64]) -> BBox {
    let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
    let (w, h) = (rng.random_range(2.0..20.0), rng.random_range(2.0..20.0));
    BBox {
        x1: x,
        y1: y,
        x2: x + w,
        y2: y + h,
        score: scores[rng.random_range(0..scores.len())],
        label: rng.random_range(1..=labels),
    }
}

/// Greedy NMS is characterised by: box `i` (in stable descending-score order) survives iff no
/// earlier survivor of its label overlaps it by more than the threshold.
fn nms_matches_characterisation(boxes: &[BBox], thr: f64) -> bool {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    let mut survivors: Vec<BBox> = Vec::new();
    for &i in &order {
        let b = boxes[i];
        if !survivors.iter().any(|s| s.label == b.label && oracle_iou(s, &b) > thr) {
            survivors.push(b);
        }
    }
    let got = nms(boxes, thr);
    got.len() == survivors.len()
        && got.iter().zip(&survivors).all(|(a, b)| a == b)
        && got.windows(2).all(|w| w[0].score >= w[1].score)
}

/// AP by re-matching every ranked prefix from scratch and interpolating precision as the best
/// precision over all cut-offs reaching at least each recall level.
fn brute_force_ap(dets: &[Vec<BBox>], gts: &[Vec<GtBox>], class: usize, thr: f64) -> Option<f64> {
    let num_gt = gts.iter().flatten().filter(|g| g.bbox.label == class).count();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, BBox)> = Vec::new();
    for (f, ds) in dets.iter().enumerate() {
        for d in ds.iter().filter(|d| d.label == class) {
            ranked.push((f, *d));
        }
    }
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut points = Vec::new();
    for k in 1..=ranked.len() {
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for (f, d) in &ranked[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[*f].iter().enumerate() {
                let o = oracle_iou(d, &g.bbox);
                if g.bbox.label == class && !taken[*f][j] && o >= thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                taken[*f][j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / k as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

fn oracle_cases() -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let scores = [0.9, 0.8, 0.8, 0.5, 0.3, 0.3, 0.1];
    let mut nms_bad = 0;
    let mut ap_bad = 0;
    for _ in 0..ORACLE_CASES {
        let n = rng.random_range(0..12);
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                let mut b = random_box(&mut rng, 2, &scores);
                b.score += rng.random_range(0.0..0.01);
                b
            })
            .collect();
        let thr = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        if !nms_matches_characterisation(&boxes, thr) {
            nms_bad += 1;
        }

        let frames = rng.random_range(1..4);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..frames {
            let g: Vec<GtBox> = (0..rng.random_range(0..4))
                .map(|_| GtBox {
                    bbox: random_box(&mut rng, 2, &[1.0]),
                    occluded: rng.random_bool(0.3),
                })
                .collect();
            // Detections are jittered copies of ground truth plus clutter, with tied scores.
            let mut d = Vec::new();
            for gt in &g {
                if rng.random_bool(0.7) {
                    let j = rng.random_range(-3.0..3.0);
                    d.push(BBox {
                        x1: gt.bbox.x1 + j,
                        x2: gt.bbox.x2 + j,
                        score: scores[rng.random_range(0..scores.len())],
                        ..gt.bbox
                    });
                }
            }
            d.extend((0..rng.random_range(0..4)).map(|_| random_box(&mut rng, 2, &scores)));
            dets.push(d);
            gts.push(g);
        }
        for class in 1..=2 {
            let (a, b) = (average_precision(&dets, &gts, class, 0.5), brute_force_ap(&dets, &gts, class, 0.5));
            let same = match (a, b) {
                (Some(x), Some(y)) => (x - y).abs() < 1e-12,
                (None, None) => true,
                _ => false,
            };
            if !same {
                ap_bad += 1;
            }
        }
    }
    (nms_bad, ap_bad)
}

fn matchtrans_invariants() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut bad = 0;
    for _ in 0..ORACLE_CASES {
        let (h, w, k) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..4));
        let c = rng.random_range(1..4);
        let fp = random([1, c, h, w], &mut rng, 2.0);
        let ft = random([1, c, h, w], &mut rng, 2.0);
        let m = random([1, 2, h, w], &mut rng, 5.0);
        let a = affinity_field(&fp, &ft, k, 0.1).unwrap();
        let out = apply_affinity(&m, &a);
        let ki = k as isize;
        let mut ok = true;
        for y in 0..h {
            for x in 0..w {
                let wts = a.at(0, y, x);
                ok &= wts.iter().all(|&v| v >= 0.0) && (wts.iter().sum::<f64>() - 1.0).abs() < 1e-9;
                for ch in 0..2 {
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for dy in -ki..=ki {
                        for dx in -ki..=ki {
                            let (py, px) = (y as isize + dy, x as isize + dx);
                            if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                                let v = m.at(0, ch, py as usize, px as usize);
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                        }
                    }
                    let v = out.at(0, ch, y, x);
                    ok &= v >= lo - 1e-9 && v <= hi + 1e-9;
                }
            }
        }
        if !ok {
            bad += 1;
        }
    }
    bad
}

fn decoder_shape_sweep() -> usize {
    let c = MemoryCell::<f64>::new(
        CellConfig {
            kind: CellKind::LearnedAlign,
            channels: 2,
            levels: 3,
            ..CellConfig::default()
        },
        600,
    )
    .unwrap();
    let mut bad = 0;
    for h in 4..=33 {
        for w in 4..=33 {
            let mut tape = Tape::new();
            let p = c.bind(&mut tape, false);
            let f = tape.constant(Tensor::full([1, 2, h, w], 0.5));
            let skips = build_pyramid(&mut tape, f, 3).unwrap();
            let coarse = *skips.last().unwrap();
            match decode_upsample(&mut tape, &p, "", coarse, &skips) {
                Ok(out) if tape.value(out).hw() == (h, w) => {}
                _ => bad += 1,
            }
        }
    }
    bad
}

fn one_level_identity() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let c = scrambled_cell(CellKind::LearnedAlign, 4, 1, 701);
    let mut bad = 0;
    for i in 0..100 {
        let gate = if i % 2 == 0 { GateKind::Sigmoid } else { GateKind::NormalizedRelu };
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let m = random([1, 4, h, w], &mut rng, 1.0);
        let f = random([1, 4, h, w], &mut rng, 1.0);
        let mut tape = Tape::new();
        let p = c.bind(&mut tape, false);
        let (mv, fv) = (tape.constant(m), tape.constant(f));
        let a = learned_align_step(&mut tape, &p, "", mv, fv, 1, gate).unwrap();
        let b = stmm_step(&mut tape, &p, "", mv, fv, gate).unwrap().memory;
        if !tape.value(a).data().iter().zip(tape.value(b).data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            bad += 1;
        }
    }
    bad
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let (nn_worst, nn_bad) = nnkit_grad_checks();
    let (cell_worst, cell_bad) = cell_grad_checks();
    let (nms_bad, ap_bad) = oracle_cases();
    let mt_bad = matchtrans_invariants();
    let dec_bad = decoder_shape_sweep();
    let id_bad = one_level_identity();
    let secs = t.elapsed().as_secs_f64();
    let passed = nn_bad + cell_bad + nms_bad + ap_bad + mt_bad + dec_bad + id_bad == 0 && secs < PROPERTY_BUDGET_SECS;
    outcome(
        passed,
        format!(
            "nnkit grad max rel err {nn_worst:.1e} (< {NNKIT_GRAD_TOL:.0e}), cell {cell_worst:.1e} (< {CELL_GRAD_TOL:.0e}); \
             NMS/AP oracle mismatches {nms_bad}/{ap_bad} of {ORACLE_CASES}; MatchTrans violations {mt_bad}/{ORACLE_CASES}; \
             decoder sweep failures {dec_bad}/900; L=1 identity failures {id_bad}/100; {secs:.0}s (< {PROPERTY_BUDGET_SECS:.0}s)"
        ),
    )
}

// Criterion 2: parameter and receptive-field scaling.

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let d: Vec<(usize, usize)> = (1..=3).map(|l| cell_param_delta(64, l).unwrap()).collect();
    let dp_ok = d[0].0 == 0 && d[1].0 > 0 && d[2].0 == 2 * d[1].0;
    let df_ok = d[1].1 == 2 * d[0].1 && d[2].1 == 4 * d[0].1;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        dp_ok && df_ok && secs < 1.0,
        format!(
            "dP = {} : {} : {}, df = {} : {} : {} for L = 1, 2, 3 at C = 64",
            d[0].0, d[1].0, d[2].0, d[0].1, d[1].1, d[2].1
        ),
    )
}

// Criteria 3 to 6: trained models.

const KINDS: [CellKind; 4] = [CellKind::None, CellKind::Stmm, CellKind::StmmMatchTrans, CellKind::LearnedAlign];

struct Benchmark {
    root: tempfile::TempDir,
    data: PathBuf,
    base: RunConfig,
    /// (seed, kind) -> (test report, untextured test report)
    reports: BTreeMap<(u64, &'static str), (EvalReport, EvalReport)>,
}

fn train_args(data: &Path, run: &Path) -> TrainArgs {
    TrainArgs {
        data: data.into(),
        run: run.into(),
        stage: Stage::Pretrain,
        cell: None,
        bptt: None,
        direction: None,
        init: None,
        resume: None,
        max_steps: None,
        stop_after: None,
        out: None,
    }
}

fn eval_on(cfg: &RunConfig, weights: &Path, data: &Path, split: &str, report: &Path) -> EvalReport {
    let args = EvalArgs {
        weights: weights.into(),
        data: data.into(),
        split: split.into(),
        report: report.into(),
    };
    commands::eval(cfg, &args).unwrap()
}

fn benchmark() -> Benchmark {
    let root = tempfile::tempdir().unwrap();
    let base = RunConfig::from_pairs(&parse_pairs("data.seed = 0", "benchmark").unwrap()).unwrap();
    let data = root.path().join("data");
    let t = Instant::now();
    commands::gen(&base, &GenArgs { out: data.clone(), force: false }).unwrap();
    println!("  benchmark data generated in {:.0}s", t.elapsed().as_secs_f64());
    let mut reports = BTreeMap::new();
    for seed in TRAIN_SEEDS {
        let cfg = RunConfig::from_pairs(&parse_pairs(&format!("data.seed = 0\nseed = {seed}"), "benchmark").unwrap()).unwrap();
        let run = root.path().join(format!("run_{seed}"));
        let t = Instant::now();
        commands::train(&cfg, &train_args(&data, &run)).unwrap();
        println!("  seed {seed}: pretrained in {:.0}s", t.elapsed().as_secs_f64());
        for kind in KINDS {
            let t = Instant::now();
            let args = TrainArgs {
                stage: Stage::Finetune,
                cell: Some(kind),
                ..train_args(&data, &run)
            };
            commands::train(&cfg, &args).unwrap();
            let w = run.join(weights_name(kind, Direction::Forward));
            let test = eval_on(&cfg, &w, &data, "test", &run.join(format!("{kind}.test.json")));
            let untex = eval_on(&cfg, &w, &data, "test_untextured", &run.join(format!("{kind}.untextured.json")));
            println!(
                "  seed {seed} {kind:>13}: mAP {:.4} occluded recall {:.4} visible recall {:.4} untextured persistence@{PERSISTENCE_OFFSET} {:.4} ({:.0}s)",
                test.map.unwrap_or(0.0),
                test.occluded_recall.unwrap_or(0.0),
                test.visible_recall.unwrap_or(0.0),
                untex.mean_persistence_at(PERSISTENCE_OFFSET).unwrap_or(0.0),
                t.elapsed().as_secs_f64()
            );
            reports.insert((seed, kind.as_str()), (test, untex));
        }
    }
    Benchmark {
        root,
        data,
        base,
        reports,
    }
}

impl Benchmark {
    fn mean(&self, kind: CellKind, f: impl Fn(&EvalReport, &EvalReport) -> Option<f64>) -> f64 {
        let vals: Vec<f64> = TRAIN_SEEDS
            .iter()
            .map(|s| {
                let (t, u) = &self.reports[&(*s, kind.as_str())];
                f(t, u).unwrap_or(0.0)
            })
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn criterion_3(b: &Benchmark) -> Outcome {
    let m: Vec<f64> = KINDS.iter().map(|&k| b.mean(k, |t, _| t.map)).collect();
    let (frame, stmm, mt, la) = (m[0], m[1], m[2], m[3]);
    let passed = stmm - frame >= MAP_GAP && la - stmm >= MAP_GAP && la - mt >= MAP_GAP;
    outcome(
        passed,
        format!(
            "mean mAP over {} seeds: frame {frame:.4}, stmm {stmm:.4}, matchtrans {mt:.4}, learned_align {la:.4}; \
             gaps stmm-frame {:+.4}, la-stmm {:+.4}, la-matchtrans {:+.4} (each >= {MAP_GAP})",
            TRAIN_SEEDS.len(),
            stmm - frame,
            la - stmm,
            la - mt
        ),
    )
}

fn criterion_4(b: &Benchmark) -> Outcome {
    let p = |t: &EvalReport, u: &EvalReport| {
        let _ = t;
        u.mean_persistence_at(PERSISTENCE_OFFSET)
    };
    let (la, mt) = (b.mean(CellKind::LearnedAlign, p), b.mean(CellKind::StmmMatchTrans, p));
    let counted = b.reports[&(TRAIN_SEEDS[0], CellKind::LearnedAlign.as_str())]
        .1
        .persistence
        .iter()
        .filter(|c| c.after_onset(PERSISTENCE_OFFSET).is_some())
        .count();
    let ratio = if mt > 0.0 { la / mt } else { f64::INFINITY };
    outcome(
        ratio >= PERSISTENCE_RATIO && counted >= MIN_PERSISTENCE_SEQUENCES,
        format!(
            "persistence at onset+{PERSISTENCE_OFFSET} on {counted} untextured sequences: learned_align {la:.4}, matchtrans {mt:.4}, \
             ratio {ratio:.3} (>= {PERSISTENCE_RATIO}, >= {MIN_PERSISTENCE_SEQUENCES} sequences)"
        ),
    )
}

fn criterion_5(b: &Benchmark) -> Outcome {
    let r = |t: &EvalReport, _: &EvalReport| t.occluded_recall;
    let (la, mt) = (b.mean(CellKind::LearnedAlign, r), b.mean(CellKind::StmmMatchTrans, r));
    outcome(
        la - mt >= OCCLUDED_RECALL_GAP,
        format!("occluded recall: learned_align {la:.4}, matchtrans {mt:.4}, gap {:+.4} (>= {OCCLUDED_RECALL_GAP})", la - mt),
    )
}

fn criterion_6(b: &Benchmark) -> Outcome {
    let cfg = &b.base;
    let run = b.root.path().join("transfer");
    let kind = CellKind::LearnedAlign;
    let scratch = TrainArgs {
        stage: Stage::Finetune,
        cell: Some(kind),
        init: Some("scratch".into()),
        max_steps: Some(TRANSFER_STEPS),
        out: Some(run.join("scratch.weights")),
        ..train_args(&b.data, &run)
    };
    commands::train(cfg, &scratch).unwrap();
    let target = eval_on(cfg, &run.join("scratch.weights"), &b.data, "test", &run.join("scratch.json")).map.unwrap_or(0.0);

    let frame = b.root.path().join(format!("run_{}", TRAIN_SEEDS[0])).join(FRAME_WEIGHTS);
    let out = run.join("transfer.weights");
    let every = TRANSFER_STEPS / TRANSFER_CHECKPOINTS;
    let mut reached = None;
    let mut trace = Vec::new();
    for k in 1..=TRANSFER_CHECKPOINTS {
        let step = k * every;
        let args = TrainArgs {
            stage: Stage::Finetune,
            cell: Some(kind),
            init: Some(frame.to_string_lossy().into_owned()),
            max_steps: Some(TRANSFER_STEPS),
            stop_after: Some(step),
            resume: (k > 1).then(|| out.clone()),
            out: Some(out.clone()),
            ..train_args(&b.data, &run)
        };
        commands::train(cfg, &args).unwrap();
        let m = eval_on(cfg, &out, &b.data, "test", &run.join(format!("transfer_{step}.json"))).map.unwrap_or(0.0);
        trace.push(format!("{step}:{m:.3}"));
        if m >= target {
            reached = Some(step);
            break;
        }
    }
    let limit = (TRANSFER_FRACTION * TRANSFER_STEPS as f64) as usize;
    outcome(
        reached.is_some_and(|s| s <= limit),
        format!(
            "from-scratch {kind} mAP after {TRANSFER_STEPS} steps {target:.4}; transfer reached it at {} (limit {limit}); checkpoints {}",
            reached.map_or("never".to_string(), |s| format!("step {s}")),
            trace.join(" ")
        ),
    )
}

// Criterion 7: reduction identity.

fn criterion_7() -> Outcome {
    let cfg = RunConfig::default();
    let mut det = cfg.model.detector.clone();
    det.score_threshold = 0.0;
    let frame = occtrack::detector::FrameDetector::<f32>::new(det.clone(), 800);
    let mut mcfg = cfg.model_config(CellKind::None, Direction::Forward);
    mcfg.detector = det;
    let video = VideoDetector::init_from_frame_detector(&frame, mcfg, 801).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(802);
    let mut mismatches = 0;
    let mut boxes = 0;
    for _ in 0..IDENTITY_IMAGES {
        let (h, w) = (rng.random_range(32..160u32), rng.random_range(32..160u32));
        let img = image::RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
        let x = image_tensor::<f32>(&img);
        let out = video.video_forward(std::slice::from_ref(&x)).unwrap();
        let reference = frame.detect_frame(&x).unwrap();
        let bits = |bs: &[BBox]| -> Vec<[u64; 5]> {
            bs.iter()
                .map(|b| [b.x1.to_bits(), b.y1.to_bits(), b.x2.to_bits(), b.y2.to_bits(), b.score.to_bits()])
                .collect()
        };
        let labels = |bs: &[BBox]| bs.iter().map(|b| b.label).collect::<Vec<_>>();
        boxes += reference.len();
        if bits(&out.detections[0]) != bits(&reference) || labels(&out.detections[0]) != labels(&reference) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && boxes > 0,
        format!("{mismatches} of {IDENTITY_IMAGES} random images differ ({boxes} boxes compared bit-for-bit)"),
    )
}

// Criterion 8: determinism of the command line.

const SMALL_RUN: &str = "
preset = staged
scene.width = 64
scene.height = 64
scene.num_frames = 16
scene.num_classes = 1
scene.objects = [1, 1]
scene.sprite_size = [12, 20]
scene.distractors = 1
scene.occluder_size = [14, 20]
scene.occlusion_duration = [5, 6]
scene.approach_frames = 2
scene.occluder_margin = 2
data.train_sequences = 3
data.test_sequences = 2
data.untextured_test_sequences = 2
data.composites = 10
model.detector.backbone_channels = [4, 8, 8, 8]
model.detector.rpn_channels = 8
model.detector.head_hidden = 16
model.cell.levels = 2
pretrain.max_steps = 10
pretrain.eval_every = 5
finetune.max_steps = 10
finetune.eval_every = 5
";

fn occtrack(args: &[&str]) -> bool {
    Process::new(env!("CARGO_BIN_EXE_occtrack"))
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn cli_run(dir: &Path, config: &Path) -> bool {
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let (c, data, run) = (s(config), s(&dir.join("data")), s(&dir.join("run")));
    occtrack(&["gen", "--config", &c, "--out", &data])
        && occtrack(&["train", "--config", &c, "--data", &data, "--run", &run, "--cell", "learned_align", "--bptt", "4"])
        && occtrack(&["eval", "--config", &c, "--weights", &format!("{run}/learned_align.weights"), "--data", &data, "--report", &s(&dir.join("report.json"))])
}

fn criterion_8() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("small.cfg");
    fs::write(&config, SMALL_RUN).unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    if !(cli_run(&a, &config) && cli_run(&b, &config)) {
        return outcome(false, "a command failed");
    }
    let mut same = Vec::new();
    let mut differ = Vec::new();
    for part in ["data", "run", "report.json"] {
        let (pa, pb) = (a.join(part), b.join(part));
        let eq = if pa.is_dir() {
            dir_digest(&pa).unwrap() == dir_digest(&pb).unwrap()
        } else {
            fs::read(&pa).unwrap() == fs::read(&pb).unwrap()
        };
        if eq { &mut same } else { &mut differ }.push(part);
    }
    outcome(
        differ.is_empty(),
        format!("identical: [{}]; differing: [{}]", same.join(", "), differ.join(", ")),
    )
}

fn main() -> ExitCode {
    let selected: Option<Vec<usize>> = std::env::var("OCCTRACK_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let want = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |n: usize, o: Outcome| {
        println!("criterion {n}: {} | {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    for (n, f) in [(1, criterion_1 as fn() -> Outcome), (2, criterion_2), (7, criterion_7), (8, criterion_8)] {
        if want(n) {
            record(n, f());
        }
    }
    if [3, 4, 5, 6].into_iter().any(want) {
        let t = Instant::now();
        let b = benchmark();
        println!("  benchmark trained in {:.0}s", t.elapsed().as_secs_f64());
        for (n, f) in [
            (3, criterion_3 as fn(&Benchmark) -> Outcome),
            (4, criterion_4),
            (5, criterion_5),
            (6, criterion_6),
        ] {
            if want(n) {
                record(n, f(&b));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !r.1.passed).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        return ExitCode::SUCCESS;
    }
    let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
    println!("acceptance: failed criteria {}", list(&failed));
    let strict = std::env::var("OCCTRACK_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let gating: Vec<usize> = failed.iter().copied().filter(|n| strict || GATING.contains(n)).collect();
    if gating.is_empty() {
        println!("acceptance: benchmark criteria are reported only (set OCCTRACK_ACCEPTANCE_STRICT=1 to gate on them)");
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
