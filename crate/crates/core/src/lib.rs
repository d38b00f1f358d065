//! Training, cross-validation and explanation toolkit for a four-class
//! dementia MRI classifier.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`rng`]: dense `f32` arrays and portable seeded randomness.
//! - [`model`]: the conv network (four `conv → ReLU → pool` blocks and a dense
//!   head), its forward/backward passes, and [`checkpoint`] serialization.
//! - [`data`]: corpus scanning, image decoding, stratified splits, K-folds and batching.
//! - [`train`]: Adam, the training loop, evaluation with confusion matrices, and K-fold.
//! - [`xai`]: filter images, feature maps and guided-backpropagation saliency.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod xai;

pub use error::{Error, Result};
pub use model::{ModelSpec, Parameters};
pub use rng::SeededRng;
pub use tensor::Tensor;
