//! Training recurrent networks (vanilla, GRU, LSTM) with weights rounded to
//! low precision during training.
//!
//! Every weight group keeps a full-precision master copy. Before each forward
//! pass the master is rounded by its group's [`quantize::QuantizerSpec`]; the
//! backward pass computes gradients with respect to the rounded image and the
//! optimizer applies them to the master (straight-through).
//!
//! Modules:
//!
//! - [`numerics`]: dense matrices, activations, seeded ChaCha8 streams
//! - [`quantize`]: binarization, ternarization, pow2-ternarization,
//!   exponential quantization, and the `QPKT` bit-packed container
//! - [`cells`]: forward and BPTT for the three cell kinds
//! - [`train`]: loss, Adam, the training loop, early stopping, checkpoints
//! - [`diagnostics`]: state-transition Jacobians, spectral radius, stability sweeps
//! - [`data`]: character corpora, labeled sequence datasets, batching
//! - [`config`]: the run configuration document

pub mod cells;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod numerics;
pub mod quantize;
pub mod train;

pub use error::{Error, Result};
