//! Watermarking toolkit for neural classifiers.
//!
//! Embeds an owner's binary signature into the expected gradient of the
//! cross-entropy cost with respect to the model input, extracts it either by
//! backpropagation (white box) or through a prediction API with zeroth-order
//! estimation (black box), and verifies ownership with an exact binomial
//! hypothesis test. Ships the counter-watermark attack suite used to evaluate
//! robustness: pruning, fine-tuning, quantization, adversarial fine-tuning,
//! input noise, score rounding, score perturbation, and forging.

pub mod attack;
pub mod checkpoint;
pub mod client;
pub mod data;
pub mod experiment;
pub mod extract;
pub mod error;
pub mod graph;
pub mod nn;
pub mod protocol;
pub mod server;
pub mod tensor;
pub mod watermark;

pub use error::{Error, Result};
pub use graph::{Bindings, Graph, NodeId};
pub use tensor::Tensor;
