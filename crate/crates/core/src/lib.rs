//! Full-scene domain generalization for collaborative bird's-eye-view
//! segmentation.
//!
//! The crate is organized bottom-up:
//!
//! - [`image`]: planar `[0,1]` rasters, PPM I/O and bilinear resizing.
//! - [`spectral`]: 2D DFT, amplitude/phase split, low-frequency masks and
//!   amplitude augmentation (AmpAug).
//! - [`colorspace`]: RGB/XYZ/LAB conversion and LAB statistics alignment
//!   between collaborating vehicles.
//! - [`consistency`]: Gaussian-kernel MMD and its analytic gradient.
//! - [`model`]: a small hand-differentiated encoder / mean-fusion / decoder
//!   network.
//! - [`meta_train`]: the meta-consistency training loop.
//! - [`domains`]: procedural road scenes and weather corruptions.
//! - [`harness`]: IoU, evaluation, experiment orchestration and file formats.

pub mod colorspace;
pub mod consistency;
pub mod domains;
mod error;
pub mod harness;
pub mod image;
pub mod meta_train;
pub mod model;
pub mod spectral;

pub use error::{Error, Result};
pub use image::{Image, SegClass, SegMask};
