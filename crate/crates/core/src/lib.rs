//! Multi-face forgery detection head.
//!
//! Pipeline per similarity group of whole images: pairwise cosine
//! similarity of backbone face features, channel expansion, a one-layer
//! transformer over face tokens, a per-face classifier, and an image-level
//! head over pooled features. Training adds prototype pull/push terms.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod global;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod simmat;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
