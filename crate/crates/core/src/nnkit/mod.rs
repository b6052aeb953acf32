//! Just enough of a neural-network toolkit: dense and convolutional layers,
//! a handful of activations, reverse-mode gradients through a saved tape,
//! Adam, and a checksummed checkpoint container.

mod adam;
pub mod checkpoint;
mod layers;
mod tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use layers::{sigmoid, Activation, Conv2d, Dense, Layer, LayerStack, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape contract violated: {0}")]
    Shape(String),
    #[error("tape does not belong to this stack or the parameters changed since the forward pass")]
    StaleTape,
    #[error("training diverged: non-finite gradient at step {step}")]
    Diverged { step: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
