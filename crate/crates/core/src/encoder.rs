//! Hierarchical 3-D shifted-window transformer encoder.
//!
//! Each stage holds `depth` blocks alternating regular and cyclically
//! shifted windows. Stages after the first start with patch merging
//! (2x spatial downsample, 2x width). Every stage's output is returned for
//! the decoder's skip connections.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::layers::{layer_norm, linear, linear_no_bias, Init, ParamBuilder};
use crate::params::ParamStore;
use crate::tensor::Real;
use crate::volume::voxel_index;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub stages: usize,
    pub window: usize,
    pub depth: usize,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl From<&Config> for EncoderConfig {
    fn from(c: &Config) -> Self {
        Self {
            embed_dim: c.embed_dim,
            stages: c.enc_stages,
            window: c.enc_window,
            depth: c.enc_depth,
            heads: c.enc_heads.clone(),
            mlp_ratio: c.mlp_ratio,
            ln_eps: c.ln_eps,
        }
    }
}

impl EncoderConfig {
    pub fn width(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Token extent per axis at `stage` given the patch-level extent.
    pub fn extent(&self, base: usize, stage: usize) -> usize {
        base >> stage
    }

    /// Window used at a stage: the configured size, capped at the extent.
    pub fn window_at(&self, extent: usize) -> usize {
        self.window.min(extent)
    }

    /// Cyclic shift for block `block` of a stage. Odd blocks shift by half a
    /// window, unless the window already spans the whole grid.
    pub fn shift_at(&self, extent: usize, block: usize) -> usize {
        let w = self.window_at(extent);
        if block % 2 == 1 && w < extent {
            w / 2
        } else {
            0
        }
    }

    pub fn validate(&self, base: usize) -> Result<()> {
        if self.stages == 0 || self.heads.len() != self.stages {
            return Err(Error::Config(format!("{} head counts for {} stages", self.heads.len(), self.stages)));
        }
        for s in 0..self.stages {
            if s > 0 && !self.extent(base, s - 1).is_multiple_of(2) {
                return Err(Error::Config(format!("stage {s}: extent {} cannot be merged", self.extent(base, s - 1))));
            }
            let e = self.extent(base, s);
            let w = self.window_at(e);
            if w == 0 || !e.is_multiple_of(w) {
                return Err(Error::Config(format!("stage {s}: extent {e} not divisible by window {}", self.window)));
            }
            if self.heads[s] == 0 || !self.width(s).is_multiple_of(self.heads[s]) {
                return Err(Error::Config(format!(
                    "stage {s}: width {} not divisible by {} heads",
                    self.width(s),
                    self.heads[s]
                )));
            }
        }
        Ok(())
    }
}

/// Encoder output at one stage: tokens `[extent^3, width]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGrid<'g, T: Real> {
    pub tokens: Var<'g, T>,
    pub extent: usize,
}

pub fn declare_params(pb: &mut ParamBuilder, cfg: &EncoderConfig, base_extent: usize) {
    for s in 0..cfg.stages {
        let w = cfg.width(s);
        if s > 0 {
            let prev = cfg.width(s - 1);
            pb.layer_norm(&format!("enc.merge{s}.ln"), 8 * prev);
            pb.linear_no_bias(&format!("enc.merge{s}.reduction"), 8 * prev, w);
        }
        let win = cfg.window_at(cfg.extent(base_extent, s));
        let r = (2 * win - 1).pow(3);
        for b in 0..cfg.depth {
            let p = format!("enc.s{s}.b{b}");
            pb.layer_norm(&format!("{p}.ln1"), w);
            pb.linear(&format!("{p}.attn.qkv"), w, 3 * w);
            pb.linear(&format!("{p}.attn.proj"), w, w);
            pb.add(format!("{p}.attn.rel_bias"), &[cfg.heads[s], r], Init::Zeros);
            pb.layer_norm(&format!("{p}.ln2"), w);
            pb.linear(&format!("{p}.mlp.fc1"), w, cfg.mlp_ratio * w);
            pb.linear(&format!("{p}.mlp.fc2"), cfg.mlp_ratio * w, w);
        }
    }
}

/// Enumerates windows over a grid of arbitrary rank. Windows and positions
/// inside a window both run with the first axis fastest. Returns, per
/// window, the rolled-grid coordinates of its members.
fn windows(extents: &[usize], w: usize) -> Vec<Vec<Vec<usize>>> {
    let counts: Vec<usize> = extents.iter().map(|e| e / w).collect();
    let n_win: usize = counts.iter().product();
    let n: usize = w.pow(extents.len() as u32);
    let unravel = |mut i: usize, dims: &[usize]| {
        dims.iter()
            .map(|&d| {
                let c = i % d;
                i /= d;
                c
            })
            .collect::<Vec<_>>()
    };
    let local_dims = vec![w; extents.len()];
    (0..n_win)
        .map(|win| {
            let wc = unravel(win, &counts);
            (0..n)
                .map(|i| {
                    let lc = unravel(i, &local_dims);
                    wc.iter().zip(&lc).map(|(a, b)| a * w + b).collect()
                })
                .collect()
        })
        .collect()
}

/// Attention permission for a cyclically shifted window partition over a
/// grid with the given per-axis extents. Entry `[win, i, j]` is true when
/// members `i` and `j` of window `win` were neighbours before the roll,
/// i.e. not joined only through wrap-around. `shift = 0` permits all.
pub fn shifted_window_mask(extents: &[usize], window: usize, shift: usize) -> Vec<bool> {
    let region = |p: usize, e: usize| -> usize {
        if shift == 0 || p < e - window {
            0
        } else if p < e - shift {
            1
        } else {
            2
        }
    };
    let mut out = Vec::new();
    for members in windows(extents, window) {
        let ids: Vec<Vec<usize>> =
            members.iter().map(|c| c.iter().zip(extents).map(|(&p, &e)| region(p, e)).collect()).collect();
        for a in &ids {
            for b in &ids {
                out.push(a == b);
            }
        }
    }
    out
}

/// Original token index of every window member after rolling the grid by
/// `-shift` along each axis: `order[win * n + i]`.
pub fn window_order(extent: usize, window: usize, shift: usize) -> Vec<usize> {
    windows(&[extent; 3], window)
        .into_iter()
        .flatten()
        .map(|c| {
            let o: Vec<usize> = c.iter().map(|&p| (p + shift) % extent).collect();
            voxel_index([extent; 3], o[0], o[1], o[2])
        })
        .collect()
}

/// Index of the relative offset `a - b` between two in-window positions
/// into a `(2W-1)^3` table, x offset fastest.
pub fn relative_index(a: [usize; 3], b: [usize; 3], window: usize) -> usize {
    let r = 2 * window - 1;
    let off = |k: usize| a[k] + window - 1 - b[k];
    off(0) + r * (off(1) + r * off(2))
}

struct WindowPlan {
    n_win: usize,
    n: usize,
    /// qkv `[N, 3w]` to q, k, v each `[n_win * h, n, hd]`.
    split: [Rc<[u32]>; 3],
    /// `[n_win * h, n, hd]` back to `[N, w]`.
    merge: Rc<[u32]>,
    /// `[h, R]` table to `[n_win * h, n, n]` bias.
    bias: Rc<[u32]>,
    mask: Option<Rc<[bool]>>,
}

fn plan(extent: usize, window: usize, shift: usize, width: usize, heads: usize) -> WindowPlan {
    let order = window_order(extent, window, shift);
    let n = window.pow(3);
    let n_win = order.len() / n;
    let hd = width / heads;
    let mut split: [Vec<u32>; 3] = Default::default();
    for (part, idx) in split.iter_mut().enumerate() {
        idx.reserve(order.len() * width);
        for win in 0..n_win {
            for h in 0..heads {
                for i in 0..n {
                    let tok = order[win * n + i];
                    for j in 0..hd {
                        idx.push((tok * 3 * width + part * width + h * hd + j) as u32);
                    }
                }
            }
        }
    }
    let mut merge = vec![0u32; order.len() * width];
    for win in 0..n_win {
        for i in 0..n {
            let tok = order[win * n + i];
            for h in 0..heads {
                for j in 0..hd {
                    merge[tok * width + h * hd + j] = (((win * heads + h) * n + i) * hd + j) as u32;
                }
            }
        }
    }
    let local: Vec<[usize; 3]> = (0..n).map(|i| [i % window, (i / window) % window, i / (window * window)]).collect();
    let r = (2 * window - 1).pow(3);
    let mut bias = Vec::with_capacity(n_win * heads * n * n);
    for _ in 0..n_win {
        for h in 0..heads {
            for a in &local {
                for b in &local {
                    bias.push((h * r + relative_index(*a, *b, window)) as u32);
                }
            }
        }
    }
    let mask = (shift > 0).then(|| {
        let m = shifted_window_mask(&[extent; 3], window, shift);
        let mut full = Vec::with_capacity(n_win * heads * n * n);
        for win in 0..n_win {
            for _ in 0..heads {
                full.extend_from_slice(&m[win * n * n..(win + 1) * n * n]);
            }
        }
        full.into()
    });
    WindowPlan { n_win, n, split: split.map(Into::into), merge: merge.into(), bias: bias.into(), mask }
}

/// Window multi-head self-attention on `[extent^3, w]` tokens. Returns the
/// projected output and the attention weights `[n_win * h, n, n]`.
#[allow(clippy::too_many_arguments)]
pub fn window_attention<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var<'g, T>,
    extent: usize,
    window: usize,
    shift: usize,
    heads: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let shape = x.shape();
    let width = shape[1];
    if shape[0] != extent.pow(3) || window == 0 || !extent.is_multiple_of(window) || (shift > 0 && shift >= window) {
        return Err(Error::Config(format!(
            "window attention on {shape:?}: extent {extent}, window {window}, shift {shift}"
        )));
    }
    let p = plan(extent, window, shift, width, heads);
    let hd = width / heads;
    let qkv = linear(g, store, &format!("{prefix}.qkv"), x)?;
    let bh = p.n_win * heads;
    let q = qkv.gather(&[bh, p.n, hd], p.split[0].clone())?;
    let k = qkv.gather(&[bh, p.n, hd], p.split[1].clone())?;
    let v = qkv.gather(&[bh, p.n, hd], p.split[2].clone())?;
    let table = g.param(store, &format!("{prefix}.rel_bias"))?;
    let bias = table.gather(&[bh, p.n, p.n], p.bias)?;
    let scores = q.matmul_t(k, false, true)?.scale(1.0 / (hd as f64).sqrt())?.add(bias)?;
    let attn = scores.softmax(p.mask)?;
    let out = attn.matmul(v)?.gather(&[extent.pow(3), width], p.merge)?;
    Ok((linear(g, store, &format!("{prefix}.proj"), out)?, attn))
}

#[allow(clippy::too_many_arguments)]
pub fn swin_block<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var<'g, T>,
    extent: usize,
    window: usize,
    shift: usize,
    heads: usize,
    eps: f64,
) -> Result<Var<'g, T>> {
    let h = layer_norm(g, store, &format!("{prefix}.ln1"), x, eps)?;
    let (a, _) = window_attention(g, store, &format!("{prefix}.attn"), h, extent, window, shift, heads)?;
    let x = x.add(a)?;
    let h = layer_norm(g, store, &format!("{prefix}.ln2"), x, eps)?;
    let h = linear(g, store, &format!("{prefix}.mlp.fc1"), h)?.gelu()?;
    let h = linear(g, store, &format!("{prefix}.mlp.fc2"), h)?;
    x.add(h)
}

/// Gathers each 2x2x2 neighbourhood of `[E^3, w]` into one `[8w]` row of
/// the `(E/2)^3` grid. Neighbours are ordered x fastest.
pub fn merge_indices(extent: usize, width: usize) -> Rc<[u32]> {
    let half = extent / 2;
    let mut idx = Vec::with_capacity(extent.pow(3) * width);
    for z in 0..half {
        for y in 0..half {
            for x in 0..half {
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let src = voxel_index([extent; 3], 2 * x + dx, 2 * y + dy, 2 * z + dz);
                            for c in 0..width {
                                idx.push((src * width + c) as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

pub fn patch_merge<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var<'g, T>,
    extent: usize,
    eps: f64,
) -> Result<Var<'g, T>> {
    let width = x.shape()[1];
    let half = extent / 2;
    let rows = x.gather(&[half.pow(3), 8 * width], merge_indices(extent, width))?;
    let rows = layer_norm(g, store, &format!("{prefix}.ln"), rows, eps)?;
    linear_no_bias(g, store, &format!("{prefix}.reduction"), rows)
}

/// Runs every stage on `[extent^3, C]` tokens.
pub fn encoder_forward<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    tokens: Var<'g, T>,
    extent: usize,
) -> Result<Vec<FeatureGrid<'g, T>>> {
    cfg.validate(extent)?;
    if tokens.shape() != [extent.pow(3), cfg.embed_dim] {
        return Err(Error::Dimension(format!(
            "encoder expects [{}, {}], got {:?}",
            extent.pow(3),
            cfg.embed_dim,
            tokens.shape()
        )));
    }
    let mut x = tokens;
    let mut out = Vec::with_capacity(cfg.stages);
    for s in 0..cfg.stages {
        let e = cfg.extent(extent, s);
        if s > 0 {
            x = patch_merge(g, store, &format!("enc.merge{s}"), x, 2 * e, cfg.ln_eps)?;
        }
        let w = cfg.window_at(e);
        for b in 0..cfg.depth {
            let shift = cfg.shift_at(e, b);
            x = swin_block(g, store, &format!("enc.s{s}.b{b}"), x, e, w, shift, cfg.heads[s], cfg.ln_eps)?;
        }
        out.push(FeatureGrid { tokens: x, extent: e });
    }
    Ok(out)
}
