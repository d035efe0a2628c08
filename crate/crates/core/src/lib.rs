//! Pedestrian detection toolkit: regularized channel features, a small
//! convolutional network with hand-rolled backpropagation, boosting-like
//! per-sample error reweighting, sliding-window detection, and miss-rate/FPPI
//! evaluation.
//!
//! The pipeline: an RGB window becomes a 10-plane stack (LUV color, gradient
//! magnitude, six oriented-gradient histograms, each normalized to zero mean
//! and unit variance); the network scores the stack with a sigmoid unit;
//! training runs per-sample gradient descent where the output sensitivity of a
//! correctly classified sample is scaled by `alpha_right` and a misclassified
//! one by `alpha_wrong`, the boosting-like reweighting that damps late-stage
//! oscillation. Detection slides the window over an image pyramid; evaluation
//! reports the log-average miss rate over FPPI reference points.
//!
//! Everything is deterministic given a seed: the RNG is a documented
//! splitmix64, training order is a seeded shuffle, and model files have a
//! canonical serialization with a SHA-256 digest.

pub mod channels;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod model;
pub mod net;
pub mod ops;
pub mod pnm;
pub mod rng;
pub mod tensor;
pub mod train;

pub use channels::{extract_stack, ChannelStack};
pub use error::{Error, Result};
pub use net::{C4Entry, NetConfig, Network};
pub use rng::Rng;
pub use tensor::Tensor;
