//! Linear-complexity Taylor-expanded attention, depthwise-separable deformable
//! patch embedding and a multi-branch encoder-decoder for image restoration,
//! built on a small reverse-mode autodiff core.

pub mod attention;
pub mod backbone;
pub mod costmodel;
pub mod counter;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod real;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use tensor::{Gradients, Tape, Tensor, Var};
