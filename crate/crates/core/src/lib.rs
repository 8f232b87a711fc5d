//! Memory-augmented sequence transduction.
//!
//! Neural Turing Machine addressing (content lookup, interpolation,
//! circular shift, sharpening, erase/add writes), Luong and NTM-style
//! attention, and four translation architectures built on them: an
//! attentional encoder-decoder, the same with NTM-style attention, a
//! memory-augmented decoder, and a pure NTM that reads the source and then
//! emits the target. Everything runs on a small reverse-mode tape in
//! [`autodiff`].
//!
//! The numerical core is generic over [`Scalar`]; the aliases at the crate
//! root fix it to `f64`, which training and the gradient checks assume.

pub mod addressing;
pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod data;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod models;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Model64 = models::Model<f64>;
