//! Eye tracking from retinal images through a canonical feature space.
//!
//! A grid scan of retina frames is registered pairwise, globally aligned by
//! weighted least squares and fused into a canonical feature space. Each new
//! frame is then matched against that space and its gaze read off the
//! consensus displacement.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod canonical;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod gaze;
pub mod image;
pub mod imgmath;
pub mod matching;
pub mod phantom;
pub mod seed;

pub use error::{Error, Result};
