//! Pre-training projection heads: masked inpainting, rotation
//! classification and contrastive projection. They are dropped before
//! fine-tuning.

use crate::autograd::{Graph, Var};
use crate::config::{Config, Mode};
use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::layers::{linear, mean_rows, tconv, ParamBuilder};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Name prefix shared by every head parameter.
pub const HEAD_PREFIX: &str = "heads.";

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub embed_dim: usize,
    pub stages: usize,
    pub patch: usize,
    pub proj_dim: usize,
}

impl From<&Config> for HeadConfig {
    fn from(c: &Config) -> Self {
        Self { embed_dim: c.embed_dim, stages: c.enc_stages, patch: c.patch, proj_dim: c.proj_dim }
    }
}

impl HeadConfig {
    fn width(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }
}

pub fn declare_params(pb: &mut ParamBuilder, cfg: &HeadConfig) {
    for i in (1..cfg.stages).rev() {
        pb.tconv(&format!("heads.inpaint.up{i}"), cfg.width(i), cfg.width(i - 1), 2);
    }
    pb.tconv("heads.inpaint.out", cfg.embed_dim, 1, cfg.patch);
    let deep = cfg.width(cfg.stages - 1);
    pb.linear("heads.rot", deep, 4);
    pb.linear("heads.contrast.fc1", deep, deep);
    pb.linear("heads.contrast.fc2", deep, cfg.proj_dim);
}

pub struct ProxyOutput<'g, T: Real> {
    /// Full sub-volume reconstruction `[S^3]`.
    pub reconstruction: Var<'g, T>,
    /// `[1, 4]`
    pub rot_logits: Var<'g, T>,
    /// Unit-norm projection `[1, proj_dim]`.
    pub contrast: Var<'g, T>,
}

/// Rows scaled to unit L2 norm.
pub fn l2_normalize<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let norm = x.mul(x)?.sum_last()?.add_scalar(1e-24)?.sqrt()?;
    let (rows, cols) = (shape[0], shape[1]);
    let spread: Vec<u32> = (0..rows * cols).map(|i| (i / cols) as u32).collect();
    x.div(norm.gather(&shape, spread.into())?)
}

pub fn proxy_forward<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    cfg: &HeadConfig,
    mode: Mode,
    features: &[FeatureGrid<'g, T>],
) -> Result<ProxyOutput<'g, T>> {
    if mode != Mode::Pretrain {
        return Err(Error::Contract("projection heads are removed for fine-tuning".into()));
    }
    if features.len() != cfg.stages {
        return Err(Error::Config(format!("heads built for {} stages, got {}", cfg.stages, features.len())));
    }
    let deepest = features[cfg.stages - 1];
    let mut x = deepest.tokens;
    let mut extent = deepest.extent;
    for i in (1..cfg.stages).rev() {
        x = tconv(g, store, &format!("heads.inpaint.up{i}"), x, extent, 2)?.gelu()?;
        extent *= 2;
    }
    let recon = tconv(g, store, "heads.inpaint.out", x, extent, cfg.patch)?;
    let side = extent * cfg.patch;
    let reconstruction = recon.reshape(&[side.pow(3)])?;
    let pooled = mean_rows(g, deepest.tokens)?;
    let rot_logits = linear(g, store, "heads.rot", pooled)?;
    let h = linear(g, store, "heads.contrast.fc1", pooled)?.gelu()?;
    let contrast = l2_normalize(linear(g, store, "heads.contrast.fc2", h)?)?;
    Ok(ProxyOutput { reconstruction, rot_logits, contrast })
}
