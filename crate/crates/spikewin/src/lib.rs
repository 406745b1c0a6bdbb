//! A hybrid dense/spiking windowed-attention detector, built from scratch:
//! tape-based reverse-mode autodiff, shifted-window attention with semantic
//! relation maps, a spiking branch trained with surrogate gradients through
//! time, bidirectional interaction between the two branches, event-stream
//! tooling, and an analytic energy profiler.

pub mod ann;
pub mod ckpt;
pub mod energy;
pub mod error;
pub mod events;
pub mod gradcheck;
pub mod interact;
pub mod lif;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scene;
pub mod snn;
pub mod tape;
pub mod tensor;
pub mod window;

pub use error::{Error, Result};
