//! Whole-network parameter declarations and forward passes.
//!
//! Parameter names are grouped by prefix: `embed.`, `dim.`, `enc.`,
//! `heads.` (pre-training only) and `dec.` (fine-tuning only).

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::{Config, Mode};
use crate::decoder::{self, DecoderConfig};
use crate::dim::{self, DimConfig, DimOutput};
use crate::encoder::{self, EncoderConfig, FeatureGrid};
use crate::error::Result;
use crate::heads::{self, HeadConfig, ProxyOutput};
use crate::layers::ParamBuilder;
use crate::params::ParamStore;
use crate::tensor::Real;
use crate::volume::{embed_voxels, Geometry, TokenGrid};

/// Parameter groups kept from pre-training into fine-tuning.
pub const BACKBONE_PREFIXES: [&str; 3] = ["embed.", "dim.", "enc."];

pub fn declare(cfg: &Config, mode: Mode) -> ParamBuilder {
    let mut pb = ParamBuilder::new();
    let p3 = cfg.patch.pow(3);
    pb.linear("embed", p3, cfg.embed_dim);
    if cfg.use_dim {
        dim::declare_params(&mut pb, &DimConfig::from(cfg));
    }
    encoder::declare_params(&mut pb, &EncoderConfig::from(cfg), cfg.grid_extent());
    match mode {
        Mode::Pretrain => heads::declare_params(&mut pb, &HeadConfig::from(cfg)),
        Mode::Finetune => decoder::declare_params(&mut pb, &DecoderConfig::from(cfg)),
    }
    pb
}

/// Declared parameter names for `mode`.
pub fn param_names(cfg: &Config, mode: Mode) -> BTreeSet<String> {
    declare(cfg, mode).names()
}

/// Fresh parameters drawn from a ChaCha8 stream seeded with `seed`.
pub fn init_params<T: Real>(cfg: &Config, mode: Mode, seed: u64) -> ParamStore<T> {
    declare(cfg, mode).build(&mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn is_backbone(name: &str) -> bool {
    BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub struct Encoded<'g, T: Real> {
    /// Tokens entering the encoder.
    pub fused: TokenGrid<'g, T>,
    pub dim: Option<DimOutput<'g, T>>,
    pub features: Vec<FeatureGrid<'g, T>>,
}

/// Embeds both views, fuses them (when the fusion module is enabled) and
/// runs the encoder. Without fusion only `view1` is used.
pub fn encode<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    cfg: &Config,
    view1: &[f32],
    view2: &[f32],
) -> Result<Encoded<'g, T>> {
    let geom = Geometry::new(cfg.sub_volume, cfg.patch)?;
    let p1 = embed_voxels(g, store, view1, geom)?;
    let (fused, dim_out) = if cfg.use_dim {
        let p2 = embed_voxels(g, store, view2, geom)?;
        let out = dim::dim_forward(g, store, &DimConfig::from(cfg), &p1, &p2)?;
        (out.fused, Some(out))
    } else {
        (p1, None)
    };
    let features = encoder::encoder_forward(g, store, &EncoderConfig::from(cfg), fused.tokens, geom.extent())?;
    Ok(Encoded { fused, dim: dim_out, features })
}

/// Pre-training pass: encoding plus the three proxy outputs.
pub fn pretrain_forward<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    cfg: &Config,
    view1: &[f32],
    view2: &[f32],
) -> Result<(Encoded<'g, T>, ProxyOutput<'g, T>)> {
    let enc = encode(g, store, cfg, view1, view2)?;
    let proxy = heads::proxy_forward(g, store, &HeadConfig::from(cfg), Mode::Pretrain, &enc.features)?;
    Ok((enc, proxy))
}

/// Segmentation logits `[S^3, n_classes + 1]` in the geometry of `view1`.
pub fn segment<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    cfg: &Config,
    view1: &[f32],
    view2: &[f32],
) -> Result<Var<'g, T>> {
    let enc = encode(g, store, cfg, view1, view2)?;
    decoder::decoder_forward(g, store, &DecoderConfig::from(cfg), &enc.features, view1)
}
