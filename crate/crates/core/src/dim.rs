//! Domain invariance module: two stacks of pre-norm cross-attention blocks
//! with swapped queries. Each stream's final feature is projected back to
//! the embedding width and gates its own patch embedding; the two gated
//! streams are averaged (or summed) into the fused token grid.
//!
//! Stream `s` at layer `l` uses parameters under `dim.s{s}.l{l}.` and keeps
//! its keys and values while taking queries from the other stream.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::config::{Config, FuseMode};
use crate::error::{Error, Result};
use crate::layers::{layer_norm, linear, Init, ParamBuilder};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::volume::{Geometry, Modality, TokenGrid, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct DimConfig {
    pub embed_dim: usize,
    /// Head count per layer; the layer count is its length.
    pub heads: Vec<usize>,
    pub fuse: FuseMode,
    pub ln_eps: f64,
}

impl From<&Config> for DimConfig {
    fn from(c: &Config) -> Self {
        Self { embed_dim: c.embed_dim, heads: c.dim_heads.clone(), fuse: c.dim_fuse, ln_eps: c.ln_eps }
    }
}

impl DimConfig {
    pub fn layers(&self) -> usize {
        self.heads.len()
    }

    pub fn width(&self, l: usize) -> usize {
        self.embed_dim << l
    }

    pub fn final_width(&self) -> usize {
        self.width(self.layers() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("fusion module needs at least one layer".into()));
        }
        for (l, &h) in self.heads.iter().enumerate() {
            if h == 0 || !self.width(l).is_multiple_of(h) {
                return Err(Error::Config(format!("fusion layer {l}: width {} not divisible by {h}", self.width(l))));
            }
        }
        Ok(())
    }
}

/// Declares the attention block parameters under `prefix`.
pub fn declare_attention(pb: &mut ParamBuilder, prefix: &str, width: usize) {
    pb.layer_norm(&format!("{prefix}.ln_q"), width);
    pb.layer_norm(&format!("{prefix}.ln_kv"), width);
    for p in ["q", "k", "v", "o"] {
        pb.linear(&format!("{prefix}.{p}"), width, width);
    }
}

pub fn declare_params(pb: &mut ParamBuilder, cfg: &DimConfig) {
    let l_max = cfg.layers();
    for s in 1..=2 {
        for l in 0..l_max {
            declare_attention(pb, &format!("dim.s{s}.l{l}"), cfg.width(l));
            if l + 1 < l_max {
                pb.linear(&format!("dim.s{s}.up{l}"), cfg.width(l), cfg.width(l + 1));
            }
        }
        let down = format!("dim.s{s}.down");
        pb.linear(&down, cfg.final_width(), cfg.embed_dim);
        // the gate starts near one so fused tokens start near the embedding
        pb.set_init(&format!("{down}.bias"), Init::Ones);
    }
}

/// `[T, h * hd]` to `[h, T, hd]`.
pub fn split_heads_indices(t: usize, heads: usize, hd: usize) -> Rc<[u32]> {
    let d = heads * hd;
    let mut idx = Vec::with_capacity(t * d);
    for h in 0..heads {
        for i in 0..t {
            for j in 0..hd {
                idx.push((i * d + h * hd + j) as u32);
            }
        }
    }
    idx.into()
}

/// `[h, T, hd]` to `[T, h * hd]`.
pub fn merge_heads_indices(t: usize, heads: usize, hd: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(t * heads * hd);
    for i in 0..t {
        for h in 0..heads {
            for j in 0..hd {
                idx.push((h * t * hd + i * hd + j) as u32);
            }
        }
    }
    idx.into()
}

/// Multi-head attention with queries from `q_source` and keys/values from
/// `kv_source`, each pre-normalized, plus a residual on `q_source`.
/// Returns the block output `[T, d]` and attention weights `[h, T, T]`.
pub fn mha_cross<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    heads: usize,
    q_source: Var<'g, T>,
    kv_source: Var<'g, T>,
    eps: f64,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (qs, ks) = (q_source.shape(), kv_source.shape());
    if qs.len() != 2 || qs != ks {
        return Err(Error::Dimension(format!("cross attention inputs {qs:?} and {ks:?}")));
    }
    let (t, d) = (qs[0], qs[1]);
    let wq = store
        .get(&format!("{prefix}.q.weight"))
        .ok_or_else(|| Error::Contract(format!("missing parameter {prefix}.q.weight")))?;
    if wq.shape()[0] != d {
        return Err(Error::Dimension(format!("{prefix}: layer width {} but inputs have width {d}", wq.shape()[0])));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dimension(format!("{prefix}: width {d} not divisible by {heads} heads")));
    }
    let hd = d / heads;
    let qn = layer_norm(g, store, &format!("{prefix}.ln_q"), q_source, eps)?;
    let kvn = layer_norm(g, store, &format!("{prefix}.ln_kv"), kv_source, eps)?;
    let split = split_heads_indices(t, heads, hd);
    let q = linear(g, store, &format!("{prefix}.q"), qn)?.gather(&[heads, t, hd], split.clone())?;
    let k = linear(g, store, &format!("{prefix}.k"), kvn)?.gather(&[heads, t, hd], split.clone())?;
    let v = linear(g, store, &format!("{prefix}.v"), kvn)?.gather(&[heads, t, hd], split)?;
    let scores = q.matmul_t(k, false, true)?.scale(1.0 / (hd as f64).sqrt())?;
    let attn = scores.softmax(None)?;
    let mixed = attn.matmul(v)?.gather(&[t, d], merge_heads_indices(t, heads, hd))?;
    let out = linear(g, store, &format!("{prefix}.o"), mixed)?;
    Ok((q_source.add(out)?, attn))
}

pub struct DimOutput<'g, T: Real> {
    pub fused: TokenGrid<'g, T>,
    /// Final-layer features of stream 1 and stream 2, `[T, d_last]`.
    pub stream_features: [Var<'g, T>; 2],
    /// `attention[s][l]` is `[h_l, T, T]` for stream `s`.
    pub attention: [Vec<Var<'g, T>>; 2],
}

pub fn dim_forward<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    cfg: &DimConfig,
    p1: &TokenGrid<'g, T>,
    p2: &TokenGrid<'g, T>,
) -> Result<DimOutput<'g, T>> {
    cfg.validate()?;
    if p1.geometry != p2.geometry || p1.tokens.shape() != p2.tokens.shape() {
        return Err(Error::Contract(format!(
            "fusion inputs differ: {:?} {:?} vs {:?} {:?}",
            p1.tokens.shape(),
            p1.geometry,
            p2.tokens.shape(),
            p2.geometry
        )));
    }
    let (mut x1, mut x2) = (p1.tokens, p2.tokens);
    let mut attention = [Vec::new(), Vec::new()];
    for (l, &h) in cfg.heads.iter().enumerate() {
        let (n1, a1) = mha_cross(g, store, &format!("dim.s1.l{l}"), h, x2, x1, cfg.ln_eps)?;
        let (n2, a2) = mha_cross(g, store, &format!("dim.s2.l{l}"), h, x1, x2, cfg.ln_eps)?;
        attention[0].push(a1);
        attention[1].push(a2);
        if l + 1 < cfg.layers() {
            x1 = linear(g, store, &format!("dim.s1.up{l}"), n1)?;
            x2 = linear(g, store, &format!("dim.s2.up{l}"), n2)?;
        } else {
            x1 = n1;
            x2 = n2;
        }
    }
    let gate1 = linear(g, store, "dim.s1.down", x1)?;
    let gate2 = linear(g, store, "dim.s2.down", x2)?;
    let sum = p1.tokens.mul(gate1)?.add(p2.tokens.mul(gate2)?)?;
    let fused = match cfg.fuse {
        FuseMode::Mean => sum.scale(0.5)?,
        FuseMode::Sum => sum,
    };
    Ok(DimOutput { fused: TokenGrid { tokens: fused, geometry: p1.geometry }, stream_features: [x1, x2], attention })
}

/// Per-token relevance of one attention map: the mean over query rows of
/// each key column, rescaled so the largest value is 1 (a constant map
/// stays constant at 1). The result is upsampled to the sub-volume grid
/// by nearest patch.
pub fn attention_relevance<T: Real>(attn: &Tensor<T>, head: usize, geometry: Geometry) -> Result<Volume> {
    let shape = attn.shape();
    if shape.len() != 3 || head >= shape[0] {
        return Err(Error::Contract(format!("head {head} out of range for attention {shape:?}")));
    }
    let t = shape[1];
    if t != geometry.tokens() || shape[2] != t {
        return Err(Error::Dimension(format!("attention {shape:?} for {} tokens", geometry.tokens())));
    }
    let base = head * t * t;
    let mut col = vec![0f64; t];
    for i in 0..t {
        for (j, c) in col.iter_mut().enumerate() {
            *c += attn.data()[base + i * t + j].as_f64();
        }
    }
    for c in &mut col {
        *c /= t as f64;
    }
    let max = col.iter().copied().fold(0.0, f64::max);
    let s = geometry.side;
    let mut voxels = Vec::with_capacity(s * s * s);
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let c = col[geometry.token_of_voxel(x, y, z)];
                voxels.push(if max > 0.0 { (c / max) as f32 } else { 0.0 });
            }
        }
    }
    Volume::new([s; 3], voxels, Modality::CtLike)
}

/// Relevance volume for `(stream, layer, head)` of a forward pass.
pub fn export_attention<T: Real>(
    out: &DimOutput<'_, T>,
    stream: usize,
    layer: usize,
    head: usize,
    geometry: Geometry,
) -> Result<Volume> {
    let maps =
        out.attention.get(stream).ok_or_else(|| Error::Contract(format!("stream {stream} out of range (0 or 1)")))?;
    let attn = maps
        .get(layer)
        .ok_or_else(|| Error::Contract(format!("layer {layer} out of range ({} layers)", maps.len())))?;
    attention_relevance(&attn.value(), head, geometry)
}
