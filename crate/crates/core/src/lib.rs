//! Dense keypoint localization from sparse point labels.
//!
//! The crate is organized around the pipeline a training run follows:
//!
//! - [`codec`] turns sparse keypoints into Gaussian target heatmaps and decodes
//!   predicted heatmaps back into keypoints (local-maxima NMS, threshold, top-k).
//! - [`loss`] holds the per-pixel value-and-gradient losses (MSE, Hill,
//!   Crag-and-Tail and the masked baselines) together with ablation toggles.
//! - [`model`] is a small stride-1 fully-convolutional network with a manual
//!   backward pass and a versioned checkpoint format.
//! - [`synth`] generates synthetic scenes with dense nodule instances, of which
//!   only a few carry point labels.
//! - [`trainer`] runs plain SGD with plateau decay and early stopping, and a
//!   direct per-pixel logit optimizer for studying losses in isolation.
//! - [`eval`] implements point-in-mask localization metrics and per-station
//!   multilabel metrics.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the 64-bit instantiation used by default.

pub mod codec;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod loss;
pub mod model;
pub mod rle;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use codec::{CodecParams, DecodeParams, OverlapMode, Activation};
pub use error::{Error, Result};
pub use heatmap::{Heatmap, HeatmapRole, Keypoint, KeypointSet};
pub use loss::{LossConfig, LossVariant, PixelLoss, Reduction};
pub use model::{ModelSpec, ModelState};
pub use scalar::Scalar;

pub type Heatmap64 = Heatmap<f64>;
pub type Heatmap32 = Heatmap<f32>;
pub type ModelState64 = ModelState<f64>;
pub type ModelState32 = ModelState<f32>;
pub type LossOutput64 = loss::LossOutput<f64>;
