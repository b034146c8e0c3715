//! Core engine: a byte-level recurrent-depth transformer whose looped blocks
//! can be iterated a variable number of times at inference, plus the
//! instrumentation around it — iterate-geometry diagnostics, early-exit
//! policies, an analytic spiral reference process, and a small trainer.

pub mod dump;
pub mod error;
pub mod exit;
pub mod geometry;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod spiral;
pub mod tensor;
pub mod train;
pub mod vecmath;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
