//! Convolutional segmentation decoder with skip connections.
//!
//! Coarse-to-fine: each step upsamples 2x with a transposed convolution,
//! concatenates the encoder feature of that scale and fuses the pair with a
//! 3x3x3 convolution. A final transposed convolution returns to voxel
//! resolution, where the input intensities join as one extra channel before
//! the last 3x3x3 convolution and the 1x1x1 classifier.

use crate::autograd::{Graph, Var};
use crate::config::Config;
use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::layers::{conv3, linear, tconv, ParamBuilder};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub stages: usize,
    pub patch: usize,
    /// Foreground classes; the decoder emits `n_classes + 1` channels.
    pub n_classes: usize,
}

impl From<&Config> for DecoderConfig {
    fn from(c: &Config) -> Self {
        Self { embed_dim: c.embed_dim, stages: c.enc_stages, patch: c.patch, n_classes: c.n_classes }
    }
}

impl DecoderConfig {
    fn width(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }
}

pub fn declare_params(pb: &mut ParamBuilder, cfg: &DecoderConfig) {
    for i in (0..cfg.stages.saturating_sub(1)).rev() {
        pb.tconv(&format!("dec.up{i}"), cfg.width(i + 1), cfg.width(i), 2);
        pb.conv3(&format!("dec.fuse{i}"), 2 * cfg.width(i), cfg.width(i));
    }
    let c = cfg.embed_dim;
    pb.tconv("dec.final_up", c, c, cfg.patch);
    pb.conv3("dec.out_conv", c + 1, c);
    pb.linear("dec.head", c, cfg.n_classes + 1);
}

/// Per-voxel logits `[S^3, n_classes + 1]` from encoder features and the
/// `S^3` input intensities.
pub fn decoder_forward<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    cfg: &DecoderConfig,
    features: &[FeatureGrid<'g, T>],
    image: &[f32],
) -> Result<Var<'g, T>> {
    if features.len() != cfg.stages {
        return Err(Error::Config(format!("decoder built for {} stages, got {} features", cfg.stages, features.len())));
    }
    for (i, f) in features.iter().enumerate() {
        if f.tokens.shape() != [f.extent.pow(3), cfg.width(i)] {
            return Err(Error::Config(format!("stage {i} feature {:?} does not match the decoder", f.tokens.shape())));
        }
    }
    let last = features.len() - 1;
    let mut x = features[last].tokens;
    for i in (0..last).rev() {
        let up = tconv(g, store, &format!("dec.up{i}"), x, features[i + 1].extent, 2)?;
        let skip = up.concat_last(features[i].tokens)?;
        x = conv3(g, store, &format!("dec.fuse{i}"), skip, features[i].extent)?.gelu()?;
    }
    let e0 = features[0].extent;
    let side = e0 * cfg.patch;
    if image.len() != side.pow(3) {
        return Err(Error::Dimension(format!("image has {} voxels, expected {}", image.len(), side.pow(3))));
    }
    let full = tconv(g, store, "dec.final_up", x, e0, cfg.patch)?;
    let img = g.leaf(Tensor::from_fn(&[image.len(), 1], |i| T::from_f64_lossy(image[i] as f64)));
    let x = conv3(g, store, "dec.out_conv", full.concat_last(img)?, side)?.gelu()?;
    linear(g, store, "dec.head", x)
}
