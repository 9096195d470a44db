//! Probabilistic RGB-D salient object detection.
//!
//! The crate models saliency annotation as a conditional distribution rather
//! than a single map: a latent-variable network learns that distribution from
//! RGB-D input, multiple stochastic predictions are drawn from it, and a
//! majority-vote consensus fuses them into one saliency map plus a per-pixel
//! uncertainty estimate. Depth is refined alongside saliency with a
//! boundary-alignment objective so unreliable sensor depth cannot poison the
//! saliency branch.
//!
//! Module map:
//! - [`dataset`]: synthetic RGB-D scene generation, manifests, image IO.
//! - [`labelgen`]: iterative hide-and-predict generation of diverse labels.
//! - [`latent`]: prior/posterior latent encoders, KL, feature expansion.
//! - [`nets`]: saliency, depth-correction, and prediction networks.
//! - [`losses`]: CVAE, depth, and smoothness objectives.
//! - [`consensus`]: majority-vote fusion of sampled predictions.
//! - [`metrics`]: MAE, F-measure, E-measure, S-measure.
//! - [`pipeline`]: training loop, checkpointing, sampling, evaluation.
//! - [`baselines`]: deterministic and stochastic reference models.
//! - [`tensor`]: the reverse-mode autodiff engine everything runs on.

pub mod baselines;
pub mod consensus;
pub mod dataset;
pub mod labelgen;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod tensor;

mod error;

pub use error::CoreError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
