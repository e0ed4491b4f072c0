//! Minimal neural-network substrate for the two fixed architectures:
//! dense tensors, 3D (transposed) convolution, batch normalization, SELU,
//! fully connected layers, MSE, Adam with cosine annealing, gradient
//! clipping, early stopping and a named-tensor checkpoint format.
//!
//! Layers are generic over [`Real`] so gradient checks can run in `f64`
//! while training uses `f32`.

mod checkpoint;
mod layers;
mod optim;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointEntry};
pub use layers::{
    conv_out, tconv_out, BatchNorm, Conv3d, ConvTranspose3d, Layer, Linear, Param, Reshape, Selu, Sequential, Tanh,
    SELU_ALPHA, SELU_LAMBDA,
};
pub use optim::{clip_gradients, cosine_lr, early_stop, mse, mse_grad, Adam, EarlyStopping, OptimConfig};
pub use tensor::{matmul, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch norm needs a batch of at least 2 in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("backward called before forward")]
    NoCache,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NnError::ShapeMismatch(msg.into()))
}
