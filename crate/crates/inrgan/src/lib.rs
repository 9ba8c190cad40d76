//! GAN-trained local implicit neural representations for paired
//! image-to-image translation.
//!
//! A hypernetwork consumes a source image and emits the weights of a grid of
//! locally specific MLPs; each MLP regresses target intensities from Fourier
//! positionally encoded coordinates plus the source pixel value. Training is
//! adversarial (PatchGAN discriminator) with an l1 reconstruction term.
//!
//! The crate is organized around a small reverse-mode autodiff core
//! ([`diffcore`]) that the model, training and probe layers build on. See
//! the book under `book/` for a guided tour.

pub mod diffcore;
pub mod error;
pub mod util;

pub use error::{Error, Result};
