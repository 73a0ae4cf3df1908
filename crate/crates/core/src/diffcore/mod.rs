//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar sweeps the record once in reverse and
//! returns [`Gradients`] for every node reachable from a `param` leaf.
//!
//! Only first-order gradients are supported. Meta-gradients through a
//! classifier update are assembled from first-order pieces in
//! [`crate::trainer::meta`].
//!
//! ```
//! use lrw_core::diffcore::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let g = tape.backward(y).unwrap();
//! assert_eq!(g.wrt(&x).item(), 6.0);
//! ```

mod tape;
mod tensor;

pub(crate) use tape::{sigmoid, softmax, softplus};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;
