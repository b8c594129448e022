//! Masked-face verification toolkit.
//!
//! A two-stage ("cascaded") training recipe for verifying masked probes
//! against unmasked references:
//!
//! 1. a feature extractor is trained as a closed-set identity classifier with
//!    cross-entropy ([`backbone`]);
//! 2. the extractor is frozen and a linear embedding head
//!    ([`embedder`]) is trained on its L2-normalized features with a margin
//!    triplet loss plus an MSE term that pulls a masked view of the anchor
//!    onto the unmasked anchor ([`losses`], [`trainer`]).
//!
//! Around it sit the verification metric suite ([`metrics`]), synthetic mask
//! compositing over 68-point landmarks ([`masksynth`]), file formats and the
//! U-M / M-M pair protocols ([`dataio`]), and a step-wise ablation harness
//! ([`ablation`]).

pub mod ablation;
pub mod backbone;
pub mod cli;
mod container;
pub mod dataio;
pub mod embedder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod masksynth;
pub mod metrics;
pub mod numkit;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
