//! Conditional 6DoF camera pose distributions.
//!
//! A diffusion model over poses is conditioned on text or image embeddings,
//! optionally refined by rendering candidates from a 3D Gaussian splat scene
//! and ascending the text/render embedding similarity, and evaluated with
//! the relative distribution accuracy (RDA) metric.

pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod numericnet;
pub mod par;
pub mod refine;
pub mod splat;

pub use error::{Error, Result};
