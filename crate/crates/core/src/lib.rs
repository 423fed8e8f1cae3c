//! Self-supervised correspondence learning at desk scale.
//!
//! Two encoders are trained from still images: a fine-grained one with a
//! dense local objective over crop-geometry positives, and a semantic one
//! with an image-level contrastive objective. Their feature maps are fused
//! and used for recurrent label propagation through video.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod evaluate;
pub mod fusion;
pub mod geometry;
pub mod objectives;
pub mod par;
pub mod propagation;
pub mod train;

pub use error::{ErrorKind, Result, SfcError};
