//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! The op set is deliberately small: exactly what cross-attention pooling and
//! a pre-norm transformer need. Storage is generic over [`Scalar`] so the same
//! graph can be replayed in `f64` by [`grad_check`].

mod error;
mod gradcheck;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{
    analytic_gradients, compare_gradients, grad_check, relative_error, GradCheckConfig,
    GradCheckReport, Mismatch,
};
pub use param::{Bindings, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Attention, Gradients, Tape, Var};
pub use tensor::{Tensor, TensorF32, TensorF64};

/// Alias used where the recorded graph is the point of the API.
pub type ComputationTape<T = f32> = Tape<T>;
