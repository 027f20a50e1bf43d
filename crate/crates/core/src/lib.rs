//! Joint vehicle detection and motion segmentation with a two-stream
//! (appearance + motion) network, driven by a synthetic driving-scene
//! generator and an ego-motion based static/moving annotation pipeline.

pub mod annotator;
pub mod cli;
pub mod error;
pub mod evalkit;
pub mod flowio;
pub mod geometry;
pub mod model;
pub mod scenegen;
pub mod tensorcore;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{BBox, Detection, GtBox, MotionClass};
