//! Dense row-major tensors with a tape-based reverse-mode autodiff engine.
//!
//! Everything the policy network needs is expressed with a small, closed set of
//! primitives (see [`Primitive`]). Each primitive carries its own gradient rule
//! and a finite-difference oracle ([`check_gradients`]) is provided to verify
//! them.
//!
//! Two precisions are supported through the [`Real`] trait: `f32` for training
//! and `f64` for verification.
//!
//! ```
//! use bdc_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data()[0], 6.0);
//! ```

mod error;
mod gradcheck;
pub mod kernels;
mod mask;
mod params;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, check_gradients_sampled};
pub use mask::Mask;
pub use params::{GradAccumulator, ParamId, ParamStore};
pub use real::{Precision, Real};
pub use tape::{ConvGeometry, Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;
