//! Patch partition: non-overlapping `P^3` patches, each linearly embedded
//! to `C` channels.

use std::rc::Rc;

use super::{voxel_index, AugmentedView};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Mapping between token index and spatial cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    /// Sub-volume side in voxels.
    pub side: usize,
    /// Voxels per token along each axis.
    pub cell: usize,
}

impl Geometry {
    pub fn new(side: usize, cell: usize) -> Result<Self> {
        if cell == 0 || !side.is_multiple_of(cell) {
            return Err(Error::Config(format!("side {side} not divisible by patch {cell}")));
        }
        Ok(Self { side, cell })
    }

    /// Tokens per axis.
    pub fn extent(&self) -> usize {
        self.side / self.cell
    }

    pub fn tokens(&self) -> usize {
        self.extent().pow(3)
    }

    /// Token holding voxel `(x, y, z)`; tokens are ordered x fastest.
    pub fn token_of_voxel(&self, x: usize, y: usize, z: usize) -> usize {
        let e = self.extent();
        voxel_index([e; 3], x / self.cell, y / self.cell, z / self.cell)
    }
}

/// Token sequence `[T, C]` plus its spatial layout.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid<'g, T: Real> {
    pub tokens: Var<'g, T>,
    pub geometry: Geometry,
}

/// Gather indices taking a flat `side^3` volume to `[T, P^3]` patch rows.
/// Tokens run x fastest, and so do voxels within a patch.
pub fn patch_gather_indices(geom: Geometry) -> Rc<[u32]> {
    let (e, p, s) = (geom.extent(), geom.cell, geom.side);
    let mut idx = Vec::with_capacity(s * s * s);
    for tz in 0..e {
        for ty in 0..e {
            for tx in 0..e {
                for z in 0..p {
                    for y in 0..p {
                        for x in 0..p {
                            idx.push(voxel_index([s; 3], tx * p + x, ty * p + y, tz * p + z) as u32);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Embeds a flat `side^3` voxel grid into a [`TokenGrid`] using parameters
/// `embed.weight` `[P^3, C]` and `embed.bias` `[C]`.
pub fn embed_voxels<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    voxels: &[f32],
    geom: Geometry,
) -> Result<TokenGrid<'g, T>> {
    if voxels.len() != geom.side.pow(3) {
        return Err(Error::Dimension(format!(
            "expected {} voxels for side {}, got {}",
            geom.side.pow(3),
            geom.side,
            voxels.len()
        )));
    }
    let input = g.leaf(Tensor::from_fn(&[voxels.len()], |i| T::from_f64_lossy(voxels[i] as f64)));
    let patches = input.gather(&[geom.tokens(), geom.cell.pow(3)], patch_gather_indices(geom))?;
    let w = g.param(store, "embed.weight")?;
    let b = g.param(store, "embed.bias")?;
    let tokens = patches.matmul(w)?.add_row(b)?;
    Ok(TokenGrid { tokens, geometry: geom })
}

pub fn patch_partition_embed<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    view: &AugmentedView,
    patch: usize,
) -> Result<TokenGrid<'g, T>> {
    let geom = Geometry::new(view.side, patch)?;
    embed_voxels(g, store, &view.voxels, geom)
}
