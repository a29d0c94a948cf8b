//! Temporal memory cells: gated convolutional recurrence, correlation warping and pyramid
//! alignment.

pub mod align;
pub mod cell;
pub mod matchtrans;
pub mod stmm;

pub use align::{build_pyramid, cell_param_delta, decode_upsample, learned_align_step, pyramid_dims};
pub use cell::{CellConfig, CellKind, MemoryCell, MemoryState};
pub use matchtrans::{affinity_field, apply_affinity, matchtrans_warp, AffinityField};
pub use stmm::{stmm_step, GateKind, StmmTrace};

#[cfg(test)]
mod tests;
