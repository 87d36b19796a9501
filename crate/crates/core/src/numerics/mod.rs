//! Dense linear algebra, activations and seeded randomness.

mod activation;
mod matrix;
mod rng;

pub use activation::{hard_sigmoid, log_softmax_rows, relu, sigmoid, softmax_rows, Activation};
pub use matrix::{dot, Matrix};
pub use rng::{Rng, Stream};
