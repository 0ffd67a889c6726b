//! Egocentric interactive hand-object segmentation toolkit.
//!
//! Segments an egocentric image into left hand, right hand, left-hand
//! objects, right-hand objects, and two-hand objects. The model couples a
//! hierarchical encoder and a multi-branch decoder with two ideas centered
//! on contact: a hand-guided cross-attention enhancer for the object
//! branches, and decoupled object supervision that recovers the three object
//! categories at inference by mask intersection and set difference.
//!
//! The crate also ships a procedural scene generator for desk-scale training,
//! a deterministic training loop, evaluation metrics, and PNG visualization.

pub mod ckpt;
pub mod config;
pub mod cods;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hofe;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tape;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
