//! Mask-conditioned latent diffusion for document table images.
//!
//! The crate trains a small convolutional autoencoder, caches latents of
//! toy table images and their row/column structure masks, trains a
//! diffusion transformer that predicts noise from the noisy latent
//! concatenated with the mask latent, and samples new tables with a
//! deterministic DDIM loop. Evaluation covers Fréchet distance between
//! feature distributions and how well generated tables follow their mask.

pub mod annotations;
pub mod autoencoder;
pub mod diffusion;
pub mod dit;
pub mod evaluation;
pub mod error;
pub mod image_io;
pub mod numerics;
pub mod persist;
pub mod schedule;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    mod schedule {}
    #[doc = include_str!("../../../book/src/annotations.md")]
    mod annotations {}
    #[doc = include_str!("../../../book/src/autoencoder.md")]
    mod autoencoder {}
    #[doc = include_str!("../../../book/src/dit.md")]
    mod dit {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
