//! Temporal activity detection for untrimmed WiFi CSI amplitude streams.
//!
//! The pipeline projects a multichannel signal with a CGR stem, builds two
//! feature pyramids (a frequency-aware attention/conv-pool encoder and a
//! learning-free max−min fluctuation encoder), fuses them level by level with
//! bidirectional cross-attention, and decodes anchor-free segment predictions
//! that are post-processed with Gaussian Soft-NMS.

pub mod app;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod freq;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod inference;
pub(crate) mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var, WindowReduce};
pub use error::{Error, Result};
pub use tensor::{ModuleParams, ParamId, Tensor};
