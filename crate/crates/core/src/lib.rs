//! Gland segmentation for H&E stained histopathology images.
//!
//! The crate covers the whole chain from an RGB slide crop to object-level
//! scores:
//!
//! - [`imaging`]: rasters, PNG I/O, canonical resizing and the flip/crop
//!   augmentation recipe.
//! - [`stain`]: optical density and colour deconvolution into Hematoxylin,
//!   Eosin and DAB concentrations.
//! - [`texture`]: standard and rotation-invariant local binary patterns.
//! - [`autodiff`]: a small dense tensor engine with reverse-mode gradients.
//! - [`model`]: the dual-output LinkNet, its losses and the training loop.
//! - [`postproc`]: Otsu binarization, morphological cleanup and instance
//!   labelling.
//! - [`metrics`]: object-level Dice, object-level Hausdorff and detection F1.
//! - [`pipeline`]: configuration, the synthetic gland generator and the
//!   end-to-end driver used by the CLI.

pub mod autodiff;
mod error;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod postproc;
pub mod stain;
pub mod texture;

pub use error::{Error, ExitCategory, Result};
pub use imaging::{FeatureStack, GrayImage, RgbImage};
pub use postproc::{BinaryMask, InstanceMask, ProbabilityMap};
