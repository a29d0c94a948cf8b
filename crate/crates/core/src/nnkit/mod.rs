//! Minimal differentiable op kit: tensors, conv/pool/upsample kernels, a reverse-mode tape,
//! op-graph arithmetic and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{GraphOp, OpGraph, RFSpec};
pub use optim::{PlateauSchedule, Sgd};
pub use params::{Bound, ParamStore};
pub use tape::{CustomOp, Grads, Tape, Var};
pub use tensor::{FeatureMap, Real, Tensor};
