//! Fence insulator segmentation and fence-type recognition pipeline.
//!
//! The crate covers the whole path from raw scene imagery to detections:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine with the layer
//!   primitives the networks need,
//! - [`models`]: micro U-Net, plain CNN and residual classifiers,
//! - [`optim`]: SGD, Adam, the training loop and first/second-order
//!   meta-learning,
//! - [`data`]: tiling, annotation import, mask assembly, augmentation and
//!   dataset splitting,
//! - [`metrics`]: confusion matrices, classification reports, IoU, MIoU, Dice,
//! - [`detect`]: thresholding, connected components, padded boxes and
//!   tile-to-scene coordinate mapping,
//! - [`synth`]: a seeded generator of fence scenes with exact ground truth,
//! - [`weights`] and [`report`]: persistence formats.

pub mod data;
pub mod detect;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
