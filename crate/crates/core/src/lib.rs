//! Learnable discrete wavelet transforms with perfect-reconstruction
//! self-supervision, and a small coarse-to-fine deblurring network built on
//! them.
//!
//! The crate is self-contained: [`tensor`] and [`autodiff`] provide the
//! dense NCHW tensors and the reverse-mode tape, [`wavelet`] the filter
//! banks and transforms, [`losses`] and [`metrics`] the training objective
//! and evaluation, [`network`] the model, and [`training`] the optimizer,
//! synthetic data and training loops.

pub mod autodiff;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Shape, Tensor};
