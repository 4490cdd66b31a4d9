//! Test-time adaptation of a frozen convolutional segmentation network by
//! learning a small multiplicative prompt on the low-frequency amplitude
//! spectrum of each incoming image.

pub mod adapter;
pub mod align;
pub mod bank;
pub mod error;
pub mod fft;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod png;
pub mod prompt;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{finite_diff_gradient, Gradients, Graph, Var};
pub use tensor::Tensor;
