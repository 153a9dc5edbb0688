//! Motion-attentive transition network for zero-shot video object segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors with tape-based reverse-mode autodiff.
//! - [`encoder`]: two-stream backbone interleaved with deep residual
//!   motion-attentive transition blocks.
//! - [`bridge`]: scale-sensitive attention between encoder and decoder.
//! - [`decoder`]: boundary-aware refinement cascade producing the mask.
//! - [`loss`]: hard-example-mined boundary loss and the total objective.
//! - [`synthdata`]: moving-shape clips with exact flow and ground truth.
//! - [`metrics`]: region similarity J and boundary F-measure.
//! - [`trainer`]: SGD with momentum, augmentation, checkpoints.

pub mod bridge;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pnm;
pub mod rng;
pub mod selfcheck;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
