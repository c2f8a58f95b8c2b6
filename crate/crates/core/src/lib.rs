//! Task-oriented semantic communication over a quantized AWGN channel.
//!
//! A stochastic encoder maps an image to a feature vector, the channel
//! quantizes it and adds Gaussian noise, and two heads read the received
//! feature: a classifier and an image reconstructor. Training minimizes a
//! variational rate-distortion-perception bottleneck objective; the
//! [`oracle`] module evaluates the exact objective and its variational bound
//! on small discrete systems.

pub mod channel;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{grad_check, Graph, Tensor, Var};
