//! Micrograph analysis and hardness prediction toolkit.
//!
//! The crate covers the full chain from raw alloy micrographs to an explained
//! hardness prediction:
//!
//! - [`tensor`] — deterministic f64 tensors with tape-based reverse-mode
//!   differentiation, an adaptive-moment optimizer, and weight persistence.
//! - [`img`] — grayscale images, probability maps, and binary masks with
//!   physical pixel scale, plus PGM/PNG io.
//! - [`edgenet`] — the three-stage grain-boundary detector built on pixel
//!   difference convolutions, with Dice-loss deep supervision.
//! - [`repair`] — gradient-mask fusion, contour tracing, region growing, and
//!   morphology that turn raw edge maps into closed 1-px boundary networks.
//! - [`segmenter`] — the nested-skip encoder-decoder for second-phase
//!   segmentation trained with binary cross entropy.
//! - [`features`] — linear-intercept grain size, phase area fraction, and
//!   equivalent circle diameter measurements feeding the feature table.
//! - [`regressor`] — transformer-encoder hardness regression with
//!   leave-one-out cross-validation.
//! - [`shapley`] — exact Shapley attribution of predictions over the four
//!   input features, with importance ranking and critical-value detection.
//! - [`synth`] — synthetic micrograph generation with exact ground truth.
//! - [`config`] / [`pipeline`] — configuration and end-to-end orchestration.

pub mod augment;
pub mod config;
pub mod edgenet;
pub mod error;
pub mod features;
pub mod img;
pub mod pipeline;
pub mod regressor;
pub mod repair;
pub mod rng;
pub mod segmenter;
pub mod shapley;
pub mod synth;
pub mod tensor;

pub use error::{MgfError, Result};
pub use rng::Rng;
pub use tensor::Tensor;

#[cfg(doctest)]
mod guide;
