//! Dense `f64` tensors with a minimal reverse-mode tape.
//!
//! Everything the distillation lab trains is a small feed-forward network, so
//! the vocabulary here is deliberately narrow: matrix products, elementwise
//! arithmetic, a handful of activations, reductions, column concatenation and
//! stop-gradient. Parameters live outside the tape in [`MlpNetwork`]; a network
//! is *bound* to a [`Tape`] for one forward/backward pass and the resulting
//! gradients are handed to an [`AdamState`].

mod adam;
mod error;
mod kernels;
mod mlp;
mod rng;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, ParamSet};
pub use error::{Result, TensorError};
pub use mlp::{Activation, BoundMlp, Layer, MlpNetwork};
pub use rng::{normal_tensor, stream_id, RngStreams};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
