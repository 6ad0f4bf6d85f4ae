//! Dense tensors, the operator set of the embedding network, a fixed-order
//! backward trace, and parameter updates.

pub mod checkpoint;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod trace;

pub use checkpoint::Checkpoint;
pub use ops::{NormMode, NormParams, RunningStats};
pub use optim::{sgd_step, Adam};
pub use tensor::{Scalar, Tensor};
pub use trace::{OpTrace, ParamId, ParamSlot, ParamStore};
