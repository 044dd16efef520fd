//! Generative query suggestion: synthetic logs, prefix representation
//! enhancement, an encoder-decoder generator and reward-weighted preference
//! alignment.

pub mod align;
pub mod config;
pub mod corpus;
pub mod enhance;
pub mod error;
pub mod evalkit;
pub mod feedback;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod prefalign;
pub mod rqvae;
pub mod sugmodel;

pub use error::{CoreError, Result};
pub use par::Execution;
