//! Minimal dense `f64` tensor engine with a dynamic tape for reverse-mode
//! automatic differentiation, finite-difference gradient checking and Adam.
//!
//! ```
//! use ndgrad::{Graph, Tensor};
//!
//! let x = Tensor::scalar(3.0).with_grad();
//! let mut g = Graph::new();
//! let xv = g.param(&x);
//! let y = g.mul(xv, xv).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(xv).unwrap(), &[6.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use error::{NdError, Result};
pub use gradcheck::check_gradient;
pub use graph::{Graph, Var};
pub use optim::{clip_grad_norm, Adam};
pub use tensor::Tensor;
