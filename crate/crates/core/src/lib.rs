//! Multi-modal self-supervised pre-training for volumetric segmentation.
//!
//! Two augmented views of a sub-volume are embedded into patch tokens, fused
//! by a two-stream cross-attention [`dim`] (domain invariance module) and fed
//! to a shifted-window transformer [`encoder`]. Pre-training minimizes the
//! masked-inpainting, rotation and contrastive proxy losses while a
//! kernel-density/Jensen-Shannon term over the two attention streams is
//! subtracted from the objective ([`losses`]). Fine-tuning drops the proxy
//! heads, keeps the fusion module and adds a convolutional [`decoder`].
//!
//! Everything runs on a small in-crate tensor engine with reverse-mode
//! differentiation ([`autograd`]) so the whole pipeline is checkable against
//! finite differences in 64-bit.
//!
//! The runnable programs under `examples/` walk through each capability;
//! the `swinfuse` binary exposes the pipeline as subcommands.

pub mod autograd;
mod bytes;
pub mod config;
pub mod decoder;
pub mod dim;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod layers;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod volume;

pub mod cli;

pub use autograd::{Graph, Var};
pub use config::{Config, Mode};
pub use error::{Error, Result};
pub use params::{Gradient, ParamStore};
pub use tensor::{Real, Tensor};
