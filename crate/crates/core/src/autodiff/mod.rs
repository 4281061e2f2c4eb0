//! Reverse-mode automatic differentiation over dense tensors.

mod adam;
mod checkpoint;
mod gradcheck;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::gradcheck;
pub use params::{ParamEntry, ParamGrads, ParamKind, ParamStore};
pub use real::Real;
pub use tape::{BatchStats, ConvGeometry, Gradients, Tape, Var};
pub use tensor::Tensor;
