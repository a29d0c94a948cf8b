//! Truncated-BPTT training of video (and, with no cell, frame-level) detectors.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::nnkit::{ParamStore, PlateauSchedule, Real, Sgd, Tape, Tensor, Var};
use crate::seed::derive_seed;
use crate::synth::SequenceSample;
use crate::video::model::{annotation_boxes, image_tensor, Carry, Unrolled, VideoBound, VideoDetector};

const ORDER_TAG: u64 = 0x6f72;
const FLIP_TAG: u64 = 0x666c;
const STEP_TAG: u64 = 0x7374;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Frames unrolled per optimisation step.
    pub bptt_steps: usize,
    /// Total optimisation steps (one BPTT window each).
    pub max_steps: usize,
    pub lr_initial: f64,
    pub lr_reduced: f64,
    /// Plateau evaluations without enough improvement before the learning rate drops.
    pub plateau_patience: usize,
    pub plateau_min_improvement: f64,
    /// Fraction of `max_steps` after which the reduced rate applies even without a plateau.
    #[serde(default)]
    pub lr_drop_fraction: Option<f64>,
    /// Steps per plateau evaluation (mean training loss over the interval).
    pub eval_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Random horizontal flip of whole sequences.
    pub flip: bool,
    /// Train on every `frame_stride`-th frame.
    pub frame_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bptt_steps: 5,
            max_steps: 1000,
            lr_initial: 1e-3,
            lr_reduced: 1e-4,
            plateau_patience: 5,
            plateau_min_improvement: 0.01,
            lr_drop_fraction: None,
            eval_every: 50,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            flip: true,
            frame_stride: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bptt_steps == 0 || self.frame_stride == 0 || self.eval_every == 0 {
            return Err(Error::InvalidSpec("bptt_steps, frame_stride and eval_every must be >= 1".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_reduced > 0.0) {
            return Err(Error::InvalidSpec("learning rates must be positive".into()));
        }
        if self.lr_drop_fraction.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
            return Err(Error::InvalidSpec("lr_drop_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One line of the metric log, written after every plateau evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the interval.
    pub loss: f64,
    /// Mean rpn_cls, rpn_reg, head_cls, head_reg over the interval.
    pub components: [f64; 4],
}

/// Serializable position of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: usize,
    pub epoch: usize,
    /// Index into the epoch's shuffled sequence order.
    pub position: usize,
    /// First frame (after striding) of the next window in the current sequence.
    pub window_start: usize,
    pub schedule: PlateauSchedule,
    pub interval_loss: f64,
    pub interval_components: [f64; 4],
    pub interval_steps: usize,
    pub log: Vec<LogEntry>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Real> {
    pub progress: Progress,
    pub velocity: ParamStore<T>,
    pub forward_carry: Option<Carry<T>>,
    pub backward_carries: Vec<Carry<T>>,
}

impl<T: Real> TrainState<T> {
    pub fn fresh(cfg: &TrainConfig) -> Self {
        TrainState {
            progress: Progress {
                step: 0,
                epoch: 0,
                position: 0,
                window_start: 0,
                schedule: PlateauSchedule::new(
                    cfg.lr_initial,
                    cfg.lr_reduced,
                    cfg.plateau_patience,
                    cfg.plateau_min_improvement,
                ),
                interval_loss: 0.0,
                interval_components: [0.0; 4],
                interval_steps: 0,
                log: Vec::new(),
            },
            velocity: ParamStore::new(),
            forward_carry: None,
            backward_carries: Vec::new(),
        }
    }

    pub fn is_finished(&self, cfg: &TrainConfig) -> bool {
        self.progress.step >= cfg.max_steps
    }
}

/// Shuffled sequence order of one epoch.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[ORDER_TAG, epoch as u64])));
    order
}

/// Mirror image of a feature map or image tensor about its vertical axis.
pub fn flip_tensor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let w = x.width();
    Tensor::from_fn(x.shape(), |[n, c, y, xx]| x.at(n, c, y, w - 1 - xx))
}

/// Loss of one BPTT window and the unrolled graph that produced it.
#[derive(Debug, Clone)]
pub struct WindowLoss {
    pub total: Var,
    /// Mean rpn_cls, rpn_reg, head_cls, head_reg over the window's frames.
    pub components: [f64; 4],
    pub unrolled: Unrolled,
}

/// Unrolls `model` over a window and averages the detection loss of every frame, occluded
/// ground truth included.
#[allow(clippy::too_many_arguments)]
pub fn window_loss<T: Real>(
    model: &VideoDetector<T>,
    tape: &mut Tape<T>,
    p: &VideoBound,
    images: &[Tensor<T>],
    gts: &[Vec<BBox>],
    forward_carry: Option<&Carry<T>>,
    backward_carry: Option<&Carry<T>>,
    rng: &mut impl Rng,
) -> Result<WindowLoss> {
    if images.is_empty() || images.len() != gts.len() {
        return Err(Error::contract("window needs one ground-truth set per frame"));
    }
    let u = model.unroll(tape, p, images, forward_carry, backward_carry)?;
    let mut totals = Vec::with_capacity(images.len());
    let mut components = [0.0; 4];
    for (t, img) in images.iter().enumerate() {
        let l = model.frame.frame_loss(tape, &p.frame, u.merged[t], img.hw(), &gts[t], rng)?;
        for (acc, v) in components.iter_mut().zip(l.values(tape)) {
            *acc += v / images.len() as f64;
        }
        totals.push(l.total);
    }
    let sum = tape.sum_scalars(&totals);
    let total = tape.scale(sum, T::lit(1.0 / images.len() as f64));
    Ok(WindowLoss {
        total,
        components,
        unrolled: u,
    })
}

/// Trains `model` in place until `cfg.max_steps` (or `stop_at`, if earlier) optimisation steps
/// have run, continuing from `state` when given. Every BPTT window of `bptt_steps` frames is one
/// step: its memory starts from the detached state left by the previous window of the same
/// sequence, and the detection loss is averaged over all of its frames. `on_log` sees every
/// metric log entry as it is produced.
pub fn train<T: Real>(
    model: &mut VideoDetector<T>,
    data: &[SequenceSample],
    cfg: &TrainConfig,
    state: Option<TrainState<T>>,
    stop_at: Option<usize>,
    on_log: &mut dyn FnMut(&LogEntry),
) -> Result<TrainState<T>> {
    cfg.validate()?;
    if data.iter().all(|s| s.is_empty()) {
        return Err(Error::contract("training needs at least one non-empty sequence"));
    }
    let classes = model.frame.config.num_classes;
    for (i, s) in data.iter().enumerate() {
        if let Some(o) = s.annotations.iter().flat_map(|a| &a.objects).find(|o| o.class == 0 || o.class > classes) {
            return Err(Error::InvalidSpec(format!(
                "sequence {i} has class {} but the model detects classes 1..={classes}",
                o.class
            )));
        }
    }
    let mut state = state.unwrap_or_else(|| TrainState::fresh(cfg));
    let mut params = model.params();
    let mut opt = Sgd::new(&params, cfg.momentum, cfg.weight_decay).with_clip_norm(cfg.clip_norm);
    if !state.velocity.is_empty() {
        opt.velocity = std::mem::take(&mut state.velocity);
    }
    let limit = stop_at.map_or(cfg.max_steps, |s| s.min(cfg.max_steps));
    let mut order = epoch_order(cfg.seed, state.progress.epoch, data.len());

    while state.progress.step < limit {
        let pr = &mut state.progress;
        if pr.position >= data.len() {
            pr.epoch += 1;
            pr.position = 0;
            order = epoch_order(cfg.seed, pr.epoch, data.len());
            continue;
        }
        let seq_idx = order[pr.position];
        let sample = &data[seq_idx];
        let frames: Vec<usize> = (0..sample.len()).step_by(cfg.frame_stride).collect();
        if frames.is_empty() {
            pr.position += 1;
            continue;
        }
        let flip = cfg.flip
            && ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[FLIP_TAG, pr.epoch as u64, seq_idx as u64]))
                .random_bool(0.5);
        let load = |t: usize| -> (Tensor<T>, Vec<BBox>) {
            let img = image_tensor(&sample.frames[t]);
            let gts = annotation_boxes(&sample.annotations[t]);
            if flip {
                let w = img.width() as f64;
                (flip_tensor(&img), gts.into_iter().map(|b| b.flip_horizontal(w)).collect())
            } else {
                (img, gts)
            }
        };

        if pr.window_start == 0 && model.is_bidirectional() {
            model.load_params(&params)?;
            let all: Vec<Tensor<T>> = frames.iter().map(|&t| load(t).0).collect();
            state.backward_carries = model.backward_carries(&all)?;
        }
        let start = pr.window_start;
        let end = (start + cfg.bptt_steps).min(frames.len());
        let (images, gts): (Vec<Tensor<T>>, Vec<Vec<BBox>>) = frames[start..end].iter().map(|&t| load(t)).unzip();

        let step = pr.step;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STEP_TAG, step as u64]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let vb = VideoBound::from_flat(&bound);
        let wl = window_loss(
            model,
            &mut tape,
            &vb,
            &images,
            &gts,
            state.forward_carry.as_ref(),
            state.backward_carries.get(end),
            &mut rng,
        )?;
        let (u, total, components) = (wl.unrolled, wl.total, wl.components);
        let loss = tape.value(total).data()[0].to_f64().unwrap_or(f64::NAN);
        let last_finite = pr.log.last().map(|e| format!("last logged loss {} at step {}", e.loss, e.step));
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("loss is {loss}; {}", last_finite.unwrap_or_else(|| "no finite loss logged yet".into())),
            });
        }
        let grads = tape.backward(total)?;
        let g = bound.grads(&params, &grads);
        if !g.all_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("non-finite gradient at loss {loss}"),
            });
        }
        if cfg.lr_drop_fraction.is_some_and(|f| step as f64 >= f * cfg.max_steps as f64) {
            pr.schedule.drop_now();
        }
        opt.step(&mut params, &g, pr.schedule.lr());

        let last = images.len() - 1;
        state.forward_carry = Some(Carry {
            memory: tape.value(u.forward[last]).clone(),
            feature: tape.value(u.features[last]).clone(),
        });
        pr.step += 1;
        pr.interval_loss += loss;
        for (acc, v) in pr.interval_components.iter_mut().zip(components) {
            *acc += v;
        }
        pr.interval_steps += 1;
        if pr.step.is_multiple_of(cfg.eval_every) {
            let n = pr.interval_steps as f64;
            let entry = LogEntry {
                step: pr.step,
                epoch: pr.epoch,
                lr: pr.schedule.lr(),
                loss: pr.interval_loss / n,
                components: pr.interval_components.map(|c| c / n),
            };
            pr.schedule.observe(entry.loss);
            pr.interval_loss = 0.0;
            pr.interval_components = [0.0; 4];
            pr.interval_steps = 0;
            on_log(&entry);
            pr.log.push(entry);
        }
        pr.window_start = end;
        if end >= frames.len() {
            pr.window_start = 0;
            pr.position += 1;
            state.forward_carry = None;
            state.backward_carries.clear();
        }
    }
    model.load_params(&params)?;
    state.velocity = opt.velocity;
    Ok(state)
}

/// Mean total loss of `model` over every BPTT window of `data`, without flipping and with fixed
/// sampling seeds.
pub fn evaluate_loss<T: Real>(model: &VideoDetector<T>, data: &[SequenceSample], bptt_steps: usize, seed: u64) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, sample) in data.iter().enumerate() {
        let images: Vec<Tensor<T>> = sample.frames.iter().map(image_tensor).collect();
        let backward = model.backward_carries(&images)?;
        let mut carry: Option<Carry<T>> = None;
        let mut start = 0;
        while start < images.len() {
            let end = (start + bptt_steps.max(1)).min(images.len());
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64, start as u64]));
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, false);
            let gts: Vec<Vec<BBox>> = sample.annotations[start..end].iter().map(annotation_boxes).collect();
            let wl = window_loss(model, &mut tape, &p, &images[start..end], &gts, carry.as_ref(), backward.get(end), &mut rng)?;
            sum += tape.value(wl.total).data()[0].to_f64().unwrap_or(f64::NAN) * (end - start) as f64;
            n += end - start;
            let u = wl.unrolled;
            let last = end - start - 1;
            carry = Some(Carry {
                memory: tape.value(u.forward[last]).clone(),
                feature: tape.value(u.features[last]).clone(),
            });
            start = end;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
