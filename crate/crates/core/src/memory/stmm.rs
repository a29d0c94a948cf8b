//! Convolutional gated recurrent memory update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{Bound, Real, Tape, Var};

/// Nonlinearity of the update and reset gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    #[default]
    Sigmoid,
    /// ReLU followed by division by the per-sample maximum.
    NormalizedRelu,
}

/// Names of the six convolution groups, in the order W_z, U_z, W_r, U_r, W, U. The `w*` convs
/// carry a bias, the `u*` convs do not.
pub const STMM_CONVS: [&str; 6] = ["wz", "uz", "wr", "ur", "w", "u"];

/// Intermediate values of one update, exposed for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct StmmTrace {
    pub memory: Var,
    pub update_gate: Var,
    pub reset_gate: Var,
    pub candidate: Var,
}

fn gate<T: Real>(tape: &mut Tape<T>, x: Var, kind: GateKind) -> Var {
    match kind {
        GateKind::Sigmoid => tape.sigmoid(x),
        GateKind::NormalizedRelu => tape.relu_max_norm(x, T::lit(1e-6)),
    }
}

fn conv<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}{name}.w"))?;
    let b = p.opt(&format!("{prefix}{name}.b"));
    tape.conv2d(x, w, b, 1, 1)
}

/// `z = g(W_z*F + U_z*M)`, `r = g(W_r*F + U_r*M)`, `M~ = ReLU(W*F + U*(r ⊙ M))`,
/// `M_t = (1 - z) ⊙ M + z ⊙ M~`.
pub fn stmm_step<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    m_prev: Var,
    f_t: Var,
    gate_kind: GateKind,
) -> Result<StmmTrace> {
    if tape.value(m_prev).shape() != tape.value(f_t).shape() {
        return Err(Error::contract(format!(
            "memory {:?} and feature {:?} must have identical shapes",
            tape.value(m_prev).shape(),
            tape.value(f_t).shape()
        )));
    }
    let wz = conv(tape, p, prefix, "wz", f_t)?;
    let uz = conv(tape, p, prefix, "uz", m_prev)?;
    let z = tape.add(wz, uz)?;
    let z = gate(tape, z, gate_kind);

    let wr = conv(tape, p, prefix, "wr", f_t)?;
    let ur = conv(tape, p, prefix, "ur", m_prev)?;
    let r = tape.add(wr, ur)?;
    let r = gate(tape, r, gate_kind);

    let rm = tape.mul(r, m_prev)?;
    let wf = conv(tape, p, prefix, "w", f_t)?;
    let um = conv(tape, p, prefix, "u", rm)?;
    let cand = tape.add(wf, um)?;
    let cand = tape.relu(cand);

    let keep = tape.one_minus(z);
    let kept = tape.mul(keep, m_prev)?;
    let fresh = tape.mul(z, cand)?;
    let memory = tape.add(kept, fresh)?;
    Ok(StmmTrace {
        memory,
        update_gate: z,
        reset_gate: r,
        candidate: cand,
    })
}
