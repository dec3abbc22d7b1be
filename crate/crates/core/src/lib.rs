//! Desk-scale adversarial training for semantic segmentation.
//!
//! A segmentation generator and a pixel-wise discriminator are trained in an
//! alternating minmax game, with stochastic weight averaging maintained on the
//! generator. Everything runs on a self-contained reverse-mode tape: no
//! external tensor framework is involved, and every training run is
//! bit-deterministic for a given configuration.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod netpbm;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod threads;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use tensor::Tensor;
