use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::align::{decoder_name, learned_align_step};
use crate::memory::matchtrans::matchtrans_warp;
use crate::memory::stmm::{stmm_step, GateKind, STMM_CONVS};
use crate::nnkit::params::{bias, normal};
use crate::nnkit::{Bound, ParamStore, Real, Tape, Tensor, Var};

/// Temporal aggregation placed between the backbone and the detection heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// No memory: heads read the backbone feature directly.
    None,
    Stmm,
    StmmMatchTrans,
    LearnedAlign,
}

impl CellKind {
    pub const ALL: [CellKind; 4] = [
        CellKind::None,
        CellKind::Stmm,
        CellKind::StmmMatchTrans,
        CellKind::LearnedAlign,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::None => "none",
            CellKind::Stmm => "stmm",
            CellKind::StmmMatchTrans => "matchtrans",
            CellKind::LearnedAlign => "learned_align",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CellKind::None),
            "stmm" => Ok(CellKind::Stmm),
            "matchtrans" | "stmm+matchtrans" | "stmm_matchtrans" => Ok(CellKind::StmmMatchTrans),
            "learned_align" => Ok(CellKind::LearnedAlign),
            other => Err(Error::InvalidSpec(format!(
                "unknown cell kind `{other}` (expected none, stmm, matchtrans, learned_align)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub kind: CellKind,
    /// Feature channels C of both the memory and the backbone feature.
    pub channels: usize,
    /// Pyramid levels L of the learned-alignment cell.
    pub levels: usize,
    pub gate: GateKind,
    /// Neighbourhood radius k of the correlation warp.
    pub radius: usize,
    /// Softmax temperature applied to cosine correlations.
    pub temperature: f64,
    /// Initial bias of the update gate; large values start the cell close to pass-through.
    pub update_gate_bias: f64,
    /// Standard deviation of the random part of every cell weight at initialisation.
    pub init_std: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        CellConfig {
            kind: CellKind::LearnedAlign,
            channels: 64,
            levels: 3,
            gate: GateKind::Sigmoid,
            radius: 2,
            temperature: 0.1,
            update_gate_bias: 3.0,
            init_std: 0.01,
        }
    }
}

/// Memory M_t at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T: Real> {
    pub memory: Tensor<T>,
    pub timestep: usize,
}

impl<T: Real> MemoryState<T> {
    /// Initial state before the first frame: zeros.
    pub fn zeros(shape: [usize; 4]) -> Self {
        MemoryState {
            memory: Tensor::zeros(shape),
            timestep: 0,
        }
    }
}

/// A recurrent cell and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryCell<T: Real> {
    pub config: CellConfig,
    pub params: ParamStore<T>,
}

fn identity_conv<T: Real>(c: usize, cin: usize, offset: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut w = normal([c, cin, 3, 3], std, rng);
    for o in 0..c {
        let i = w.index(o, offset + o, 1, 1);
        w.data_mut()[i] += T::one();
    }
    w
}

impl<T: Real> MemoryCell<T> {
    /// Fresh parameters. The candidate conv on the feature and the skip half of every decoder
    /// conv start as identities, and the update gate starts open, so a fresh cell initially
    /// passes the current feature through almost unchanged.
    pub fn new(config: CellConfig, seed: u64) -> Result<Self> {
        if config.channels == 0 || config.levels == 0 {
            return Err(Error::InvalidSpec("cell needs channels >= 1 and levels >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let s = config.init_std;
        let mut p = ParamStore::new();
        if config.kind != CellKind::None {
            for name in STMM_CONVS {
                let w = if name == "w" {
                    identity_conv(c, c, 0, s, &mut rng)
                } else {
                    normal([c, c, 3, 3], s, &mut rng)
                };
                p.insert(format!("{name}.w"), w);
                if name.starts_with('w') {
                    let b = if name == "wz" { config.update_gate_bias } else { 0.0 };
                    p.insert(format!("{name}.b"), bias(c, b));
                }
            }
        }
        if config.kind == CellKind::LearnedAlign {
            for level in 0..config.levels - 1 {
                let name = decoder_name(level);
                p.insert(format!("{name}.w"), identity_conv(c, 2 * c, c, s, &mut rng));
                p.insert(format!("{name}.b"), bias(c, 0.0));
            }
        }
        Ok(MemoryCell { config, params: p })
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// One recurrent step. `f_prev` is the previous frame's backbone feature (only used by the
    /// correlation warp; `None` on the first frame, where the memory is still all zeros).
    pub fn step(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        m_prev: Var,
        f_prev: Option<Var>,
        f_t: Var,
    ) -> Result<Var> {
        let gate = self.config.gate;
        match self.config.kind {
            CellKind::None => Ok(f_t),
            CellKind::Stmm => Ok(stmm_step(tape, p, "", m_prev, f_t, gate)?.memory),
            CellKind::StmmMatchTrans => {
                let aligned = match f_prev {
                    Some(fp) => matchtrans_warp(
                        tape,
                        m_prev,
                        fp,
                        f_t,
                        self.config.radius,
                        self.config.temperature,
                    )?,
                    None => m_prev,
                };
                Ok(stmm_step(tape, p, "", aligned, f_t, gate)?.memory)
            }
            CellKind::LearnedAlign => {
                learned_align_step(tape, p, "", m_prev, f_t, self.config.levels, gate)
            }
        }
    }

    /// Gradient-free step on plain tensors.
    pub fn forward(
        &self,
        state: &MemoryState<T>,
        f_prev: Option<&Tensor<T>>,
        f_t: &Tensor<T>,
    ) -> Result<MemoryState<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let m = tape.constant(state.memory.clone());
        let fp = f_prev.map(|f| tape.constant(f.clone()));
        let f = tape.constant(f_t.clone());
        let out = self.step(&mut tape, &p, m, fp, f)?;
        Ok(MemoryState {
            memory: tape.value(out).clone(),
            timestep: state.timestep + 1,
        })
    }
}
