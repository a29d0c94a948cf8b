use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{BBox, BoxSet, DetectorConfig, FrameDetector};
use crate::error::{Error, Result};
use crate::memory::{CellConfig, CellKind, MemoryCell, MemoryState};
use crate::nnkit::params::bias;
use crate::nnkit::{Bound, ParamStore, Real, Tape, Tensor, Var};
use crate::seed::derive_seed;

/// Temporal direction in which memory is propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Causal: M_t depends on frames up to t.
    #[default]
    Forward,
    /// A forward and a backward cell whose memories are merged per frame.
    Bidirectional,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "bidirectional" => Ok(Direction::Bidirectional),
            other => Err(Error::InvalidSpec(format!(
                "unknown direction `{other}` (expected forward or bidirectional)"
            ))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Bidirectional => "bidirectional",
        })
    }
}

/// Complete architecture description of a video detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub cell: CellConfig,
    pub direction: Direction,
}

impl ModelConfig {
    pub fn new(detector: DetectorConfig, kind: CellKind, direction: Direction) -> Self {
        let cell = CellConfig {
            kind,
            channels: detector.feature_channels(),
            ..CellConfig::default()
        };
        ModelConfig {
            detector,
            cell,
            direction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell.channels != self.detector.feature_channels() {
            return Err(Error::InvalidSpec(format!(
                "cell has {} channels but the backbone produces {}",
                self.cell.channels,
                self.detector.feature_channels()
            )));
        }
        if self.cell.kind == CellKind::None && self.direction == Direction::Bidirectional {
            return Err(Error::InvalidSpec("bidirectional propagation needs a memory cell".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, as lowercase hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Name prefixes of the parameter groups in the flat store.
pub const FRAME_PREFIX: &str = "frame.";
pub const FORWARD_CELL_PREFIX: &str = "cell_fwd.";
pub const BACKWARD_CELL_PREFIX: &str = "cell_bwd.";
pub const MERGE_PREFIX: &str = "merge.";

/// Frame detector with a memory cell between backbone and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoDetector<T: Real> {
    pub config: ModelConfig,
    pub frame: FrameDetector<T>,
    pub forward_cell: MemoryCell<T>,
    pub backward_cell: Option<MemoryCell<T>>,
    /// 1x1 conv from 2C to C channels (bidirectional only).
    pub merge: ParamStore<T>,
}

/// Tape handles for every parameter group.
#[derive(Debug, Clone, Default)]
pub struct VideoBound {
    pub frame: Bound,
    pub forward_cell: Bound,
    pub backward_cell: Bound,
    pub merge: Bound,
}

impl VideoBound {
    /// Splits handles bound from a flat store.
    pub fn from_flat(p: &Bound) -> Self {
        VideoBound {
            frame: p.scoped(FRAME_PREFIX),
            forward_cell: p.scoped(FORWARD_CELL_PREFIX),
            backward_cell: p.scoped(BACKWARD_CELL_PREFIX),
            merge: p.scoped(MERGE_PREFIX),
        }
    }
}

/// Detached recurrent state after some frame: the memory and the frame's backbone feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Carry<T: Real> {
    pub memory: Tensor<T>,
    pub feature: Tensor<T>,
}

/// Tape handles produced by unrolling over a window of frames.
#[derive(Debug, Clone, Default)]
pub struct Unrolled {
    pub features: Vec<Var>,
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
    /// Memory consumed by the heads at every frame.
    pub merged: Vec<Var>,
}

/// Per-frame detections and the memory the heads consumed.
#[derive(Debug, Clone)]
pub struct VideoOutput<T: Real> {
    pub detections: Vec<BoxSet>,
    pub memory: Vec<MemoryState<T>>,
}

/// RGB image as a (1, 3, H, W) tensor with values in [0, 1].
pub fn image_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| T::lit(raw[(y * w + x) * 3 + c] as f64 / 255.0))
}

/// Averaging init of the merge conv: `0.5 * (M_fwd + M_bwd)`.
fn averaging_merge<T: Real>(c: usize) -> ParamStore<T> {
    let w = Tensor::from_fn([c, 2 * c, 1, 1], |[o, i, _, _]| {
        if i == o || i == c + o {
            T::lit(0.5)
        } else {
            T::zero()
        }
    });
    let mut p = ParamStore::new();
    p.insert("w", w);
    p.insert("b", bias(c, 0.0));
    p
}

/// Channel concatenation of the two memories followed by a 1x1 conv back to C channels.
pub fn bidirectional_merge<T: Real>(tape: &mut Tape<T>, p: &Bound, m_fwd: Var, m_bwd: Var) -> Result<Var> {
    if tape.value(m_fwd).shape() != tape.value(m_bwd).shape() {
        return Err(Error::contract(format!(
            "merge: memories {:?} and {:?} differ",
            tape.value(m_fwd).shape(),
            tape.value(m_bwd).shape()
        )));
    }
    let x = tape.concat(m_fwd, m_bwd)?;
    tape.conv2d(x, p.var("w")?, Some(p.var("b")?), 1, 0)
}

impl<T: Real> VideoDetector<T> {
    /// Fresh model with every parameter group initialised from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let frame = FrameDetector::new(config.detector.clone(), derive_seed(seed, &[0]));
        Self::assemble(config, frame, seed)
    }

    /// Video model that reuses the backbone, RPN and head weights of a frame detector; the cell
    /// (and merge) parameters are freshly initialised from `seed`.
    pub fn init_from_frame_detector(frame: &FrameDetector<T>, config: ModelConfig, seed: u64) -> Result<Self> {
        if frame.config != config.detector {
            return Err(Error::InvalidSpec(
                "frame detector architecture differs from the video model's detector".into(),
            ));
        }
        Self::assemble(config, frame.clone(), seed)
    }

    fn assemble(config: ModelConfig, frame: FrameDetector<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let forward_cell = MemoryCell::new(config.cell.clone(), derive_seed(seed, &[1]))?;
        let (backward_cell, merge) = match config.direction {
            Direction::Forward => (None, ParamStore::new()),
            Direction::Bidirectional => (
                Some(MemoryCell::new(config.cell.clone(), derive_seed(seed, &[2]))?),
                averaging_merge(config.cell.channels),
            ),
        };
        Ok(VideoDetector {
            config,
            frame,
            forward_cell,
            backward_cell,
            merge,
        })
    }

    /// All parameters in one store, each group under its prefix.
    pub fn params(&self) -> ParamStore<T> {
        let mut p = self.frame.params.prefixed(FRAME_PREFIX);
        p.extend(self.forward_cell.params.prefixed(FORWARD_CELL_PREFIX));
        if let Some(b) = &self.backward_cell {
            p.extend(b.params.prefixed(BACKWARD_CELL_PREFIX));
        }
        p.extend(self.merge.prefixed(MERGE_PREFIX));
        p
    }

    /// Replaces every parameter from a flat store; names and shapes must match exactly.
    pub fn load_params(&mut self, flat: &ParamStore<T>) -> Result<()> {
        let current = self.params();
        if current.len() != flat.len() {
            return Err(Error::Archive(format!(
                "expected {} parameter tensors, found {}",
                current.len(),
                flat.len()
            )));
        }
        for (name, t) in current.iter() {
            let got = flat.get(name).map_err(|_| Error::Archive(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Archive(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        self.frame.params = flat.scoped(FRAME_PREFIX);
        self.forward_cell.params = flat.scoped(FORWARD_CELL_PREFIX);
        if let Some(b) = &mut self.backward_cell {
            b.params = flat.scoped(BACKWARD_CELL_PREFIX);
        }
        self.merge = flat.scoped(MERGE_PREFIX);
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> VideoBound {
        VideoBound {
            frame: self.frame.bind(tape, trainable),
            forward_cell: self.forward_cell.bind(tape, trainable),
            backward_cell: self
                .backward_cell
                .as_ref()
                .map(|c| c.bind(tape, trainable))
                .unwrap_or_default(),
            merge: self.merge.bind(tape, trainable),
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        self.backward_cell.is_some()
    }

    fn zero_memory(&self, tape: &mut Tape<T>, like: Var) -> Var {
        let shape = tape.value(like).shape();
        tape.constant(Tensor::zeros(shape))
    }

    /// Unrolls the model over `images` on one tape. `forward_carry` is the detached state after
    /// the frame preceding the window (`None` at the start of a sequence); `backward_carry` is
    /// the detached backward state of the frame following the window (`None` at the end).
    pub fn unroll(
        &self,
        tape: &mut Tape<T>,
        p: &VideoBound,
        images: &[Tensor<T>],
        forward_carry: Option<&Carry<T>>,
        backward_carry: Option<&Carry<T>>,
    ) -> Result<Unrolled> {
        let mut out = Unrolled::default();
        for img in images {
            let x = tape.constant(img.clone());
            out.features.push(self.frame.backbone(tape, &p.frame, x)?);
        }
        let (mut m, mut f_prev) = match forward_carry {
            Some(c) => (Some(tape.constant(c.memory.clone())), Some(tape.constant(c.feature.clone()))),
            None => (None, None),
        };
        for &f in &out.features {
            let m_prev = match m {
                Some(v) => v,
                None => self.zero_memory(tape, f),
            };
            let next = self.forward_cell.step(tape, &p.forward_cell, m_prev, f_prev, f)?;
            out.forward.push(next);
            m = Some(next);
            f_prev = Some(f);
        }
        let Some(bwd) = &self.backward_cell else {
            out.merged = out.forward.clone();
            return Ok(out);
        };
        let (mut m, mut f_next) = match backward_carry {
            Some(c) => (Some(tape.constant(c.memory.clone())), Some(tape.constant(c.feature.clone()))),
            None => (None, None),
        };
        let mut backward = vec![None; out.features.len()];
        for (t, &f) in out.features.iter().enumerate().rev() {
            let m_next = match m {
                Some(v) => v,
                None => self.zero_memory(tape, f),
            };
            let next = bwd.step(tape, &p.backward_cell, m_next, f_next, f)?;
            backward[t] = Some(next);
            m = Some(next);
            f_next = Some(f);
        }
        out.backward = backward.into_iter().map(|v| v.expect("every frame visited")).collect();
        for t in 0..out.features.len() {
            out.merged.push(bidirectional_merge(tape, &p.merge, out.forward[t], out.backward[t])?);
        }
        Ok(out)
    }

    /// Backward-direction carries for every frame of a sequence, computed without gradients:
    /// entry `t` is the backward memory at frame `t` and the feature of frame `t`.
    pub fn backward_carries(&self, images: &[Tensor<T>]) -> Result<Vec<Carry<T>>> {
        let Some(bwd) = &self.backward_cell else {
            return Ok(Vec::new());
        };
        let mut out: Vec<Option<Carry<T>>> = vec![None; images.len()];
        let mut next: Option<Carry<T>> = None;
        for t in (0..images.len()).rev() {
            let feature = self.frame.backbone_forward(&images[t])?;
            let state = MemoryState {
                memory: next.as_ref().map_or_else(|| Tensor::zeros(feature.shape()), |c| c.memory.clone()),
                timestep: 0,
            };
            let m = bwd.forward(&state, next.as_ref().map(|c| &c.feature), &feature)?;
            let carry = Carry {
                memory: m.memory,
                feature,
            };
            out[t] = Some(carry.clone());
            next = Some(carry);
        }
        Ok(out.into_iter().map(|c| c.expect("every frame visited")).collect())
    }

    /// Runs the model over a clip. Forward models are evaluated frame by frame and are causal;
    /// bidirectional models first propagate the backward memory over the whole clip.
    pub fn video_forward(&self, frames: &[Tensor<T>]) -> Result<VideoOutput<T>> {
        let Some(first) = frames.first() else {
            return Err(Error::contract("video_forward needs at least one frame"));
        };
        if frames.iter().any(|f| f.shape() != first.shape()) {
            return Err(Error::contract("all frames of a clip must share one shape"));
        }
        let backward = self.backward_carries(frames)?;
        let mut out = VideoOutput {
            detections: Vec::with_capacity(frames.len()),
            memory: Vec::with_capacity(frames.len()),
        };
        let mut carry: Option<Carry<T>> = None;
        for (t, img) in frames.iter().enumerate() {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, false);
            let u = self.unroll(&mut tape, &p, std::slice::from_ref(img), carry.as_ref(), backward.get(t + 1))?;
            let merged = u.merged[0];
            out.detections.push(self.frame.detect_on(&mut tape, &p.frame, merged, img.hw())?);
            out.memory.push(MemoryState {
                memory: tape.value(merged).clone(),
                timestep: t + 1,
            });
            carry = Some(Carry {
                memory: tape.value(u.forward[0]).clone(),
                feature: tape.value(u.features[0]).clone(),
            });
        }
        Ok(out)
    }

    /// [`Self::video_forward`] on decoded RGB frames.
    pub fn detect_sequence(&self, frames: &[RgbImage]) -> Result<VideoOutput<T>> {
        let tensors: Vec<Tensor<T>> = frames.iter().map(image_tensor).collect();
        self.video_forward(&tensors)
    }
}

/// Ground-truth boxes of a frame with labels set to the annotated class.
pub fn annotation_boxes(ann: &crate::synth::FrameAnnotation) -> Vec<BBox> {
    ann.objects.iter().map(|o| BBox::from_coords(o.bbox).with_label(o.class)).collect()
}
