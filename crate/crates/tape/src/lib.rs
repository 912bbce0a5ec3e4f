//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`]
//! sweeps the record once in reverse. Model parameters live in a
//! [`ParamStore`] and are attached to a tape through a [`Binding`].

mod float;
pub mod gradcheck;
pub mod init;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use float::{gemm, Float, MatRef};
pub use kernels::BilinearTaps;
pub use optim::{Adam, AdamConfig, FrozenStoreError};
pub use params::{Binding, ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
