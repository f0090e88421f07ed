//! In-context image segmentation by canvas inpainting.
//!
//! The pipeline: annotated *support* frames and unannotated *query* frames
//! from the same video are tiled into a four-cell canvas; a vision
//! transformer trained with masked-patch reconstruction learns to inpaint
//! the query's mask cell from the support example.  A handful of annotated
//! frames per video (the "annotation budget") is enough to propagate labels
//! to the rest of the video.
//!
//! Module map, roughly bottom-up:
//! - [`rng`]: seed derivation; every random draw belongs to a named stream.
//! - [`dataset`]: corpora, PNG/manifest I/O, padding/resizing, splits.
//! - [`synthgen`]: a self-validating synthetic video corpus for tests.
//! - [`composer`]: canvas tiling and the two augmentation levels.
//! - [`masking`]: patch-mask sampling and hard/soft token replacement.
//! - [`model`]: the ViT encoder + linear decoder, with exact gradients.
//! - [`metrics`]: DSC and IoU over binary masks.
//! - [`trainer`]: AdamW training loop over composed canvases.
//! - [`inference`]: per-frame prediction and corpus evaluation.

pub mod composer;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};

// Array types appear throughout the public API; re-export the crate so
// downstream users can name them without pinning their own copy.
pub use ndarray;
