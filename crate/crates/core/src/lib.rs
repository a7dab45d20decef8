//! Tiny road-obstacle discovery from a single image.
//!
//! The pipeline layers the road region by pseudo distance, fuses edge
//! evidence from far layers into near ones, segments each layer into
//! superpixels, classifies their boundaries into occlusion edges, extracts
//! box proposals per layer and ranks them with a regression forest whose
//! scores accumulate into an obstacle probability map.

pub mod config;
pub mod dataset;
pub mod edge;
pub mod error;
pub mod eval;
pub mod features;
pub mod forest;
pub mod layering;
pub mod occlusion;
pub mod pipeline;
pub mod probmap;
pub mod proposals;
pub mod raster;
pub mod registry;
pub mod superpixel;
pub mod synth;

pub use error::{Error, Result};
pub use raster::{BBox, IntegralMap, Mask, Raster};
