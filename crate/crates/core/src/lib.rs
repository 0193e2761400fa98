//! Gated fusion of region and word features through cross-modal
//! co-attention and question-conditioned intra-modality self-attention.
//!
//! Everything is built on a small dense tensor type with a reverse-mode
//! tape ([`tape`]); the attention blocks live in [`attention`], the full
//! classifier in [`model`], synthetic data in [`data`] and the optimizer
//! and training loop in [`train`].

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod linear;
pub mod model;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use linear::LinearLayer;
pub use ops::{Activation, Mode};
pub use params::Parameters;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{Tensor, TensorId};
pub use train::{TrainConfig, TrainError, TrainState};
