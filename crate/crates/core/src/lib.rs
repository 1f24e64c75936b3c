//! Disentangled tri-plane radiance fields: a latent-conditioned tri-plane
//! generator whose per-channel statistics carry appearance, a semantic
//! geometry decoder, volume rendering, training on procedural heads and
//! mask-driven editing.

pub mod autodiff;
pub mod checkpoint;
pub mod editing;
pub mod gradcheck;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod netmodels;
pub mod renderer;
pub mod scenes;
pub mod training;
pub mod triplane;

pub use error::{Error, Result};
