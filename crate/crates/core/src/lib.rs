//! Reversible, ophthalmic-sign-preserving face anonymization at desk scale.
//!
//! The crate covers the full pipeline end to end:
//!
//! - [`synthdata`]: procedural labeled face dataset with known identities,
//!   optional periocular lesions, and analytic landmarks.
//! - [`autodiff`] + [`nn`]: a small reverse-mode engine and the network
//!   building blocks (residual, transformer, spectral-normalized conv,
//!   upsampling) shared by every model here.
//! - [`sign_detector`]: weakly-supervised region scoring from image-level
//!   health labels (region-score-max).
//! - [`identity_codec`]: private-key lifecycle plus the keyed translator /
//!   restorer over feature maps.
//! - [`fusion_decoder`]: sign-region feature substitution, seam refinement,
//!   and image decoding.
//! - [`face_embedder`]: locally trained identity embeddings and the
//!   recognition gallery.
//! - [`training`]: the five-term objective, PatchGAN discriminator, TTUR
//!   optimization, and checkpointing.
//! - [`eval`] / [`attacks`]: protection, reversibility, diversity,
//!   brute-force / universal-key / BIM attacks, DP baseline, and Cohen's
//!   kappa agreement.
//!
//! All randomness flows from a single root seed fanned out into named
//! substreams (see [`rng`]), so every pipeline stage is reproducible.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod error;
pub mod eval;
pub mod face_embedder;
pub mod fusion_decoder;
pub mod identity_codec;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod report;
pub mod rng;
pub mod sign_detector;
pub mod synthdata;
pub mod training;
pub(crate) mod util;

pub use error::{Error, Result};
