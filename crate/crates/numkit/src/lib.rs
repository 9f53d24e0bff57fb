//! Dense `f64` tensors with tape-based reverse-mode differentiation,
//! the initializers and optimizer used to train the question generator,
//! and a flat snapshot format for checkpoints.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod snapshot;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use error::{NumError, Result};
pub use init::{init_gaussian_embedding, init_lecun_uniform, lecun_bound};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
