//! A small reverse-mode autodiff engine and the convolutional embedder.
//!
//! The engine supports exactly the operations the embedding network and the
//! episodic loss need: 2-D convolution, batch norm, leaky ReLU, 2x2 max/avg
//! pooling, adaptive average pooling, elementwise add, row-group means,
//! pairwise Euclidean distances and row-wise log-softmax. It is generic over
//! `f32` / `f64`; training runs in `f32`, while tests that compare against
//! finite differences instantiate it in `f64`.

mod checkpoint;
mod embedder;
pub(crate) mod functional;
mod optim;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, RngState};
pub use embedder::{
    batch_from_segments, BlockParams, BnParams, Conv2dParams, Embedder, EmbedderConfig, Mode,
};
pub use optim::{lr_at_epoch, SgdMomentum};
pub use tape::{Grads, Tape, Var};

/// Element type of the engine: `f32` for production, `f64` for oracles.
pub trait Scalar:
    ndarray::NdFloat
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
