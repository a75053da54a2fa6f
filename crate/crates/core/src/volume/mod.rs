//! Volumes, the SFV1 file format, synthetic phantoms, sub-volume sampling,
//! augmentation and patch embedding.

mod augment;
mod embed;
mod io;
mod phantom;

pub use augment::{augment, augment_with, rotate_z, AugmentConfig, AugmentedView, Cuboid};
pub use embed::{embed_voxels, patch_gather_indices, patch_partition_embed, Geometry, TokenGrid};
pub use io::{read_volume, volume_from_bytes, volume_to_bytes, write_volume};
pub use phantom::{gen_phantom, PhantomOptions, MAX_ORGANS};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    CtLike,
    MrLike,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::CtLike => "ct",
            Modality::MrLike => "mr",
        }
    }
}

/// A 3-D scalar grid. Voxels are stored x fastest, then y, then z.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub voxels: Vec<f32>,
    pub modality: Modality,
    pub labels: Option<Vec<u32>>,
    pub spacing: [f32; 3],
}

#[inline]
pub fn voxel_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>, modality: Modality) -> Result<Self> {
        let v = Self { dims, voxels, modality, labels: None, spacing: [1.0; 3] };
        v.validate()?;
        Ok(v)
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        self.labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Dimension(format!("volume dims {:?}", self.dims)));
        }
        if self.voxels.len() != self.len() {
            return Err(Error::Dimension(format!(
                "volume {:?} holds {} voxels, got {}",
                self.dims,
                self.len(),
                self.voxels.len()
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(Error::Dimension("label grid size differs from voxel grid".into()));
            }
        }
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("volume contains non-finite voxels".into()));
        }
        Ok(())
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[voxel_index(self.dims, x, y, z)]
    }

    /// Largest label value, 0 without labels.
    pub fn max_label(&self) -> u32 {
        self.labels.as_ref().and_then(|l| l.iter().copied().max()).unwrap_or(0)
    }

    /// Grows every axis to at least `min` by replicating edge voxels.
    pub fn pad_edge(&self, min: [usize; 3]) -> Volume {
        let dims = [self.dims[0].max(min[0]), self.dims[1].max(min[1]), self.dims[2].max(min[2])];
        if dims == self.dims {
            return self.clone();
        }
        let src = |x: usize, y: usize, z: usize| {
            voxel_index(self.dims, x.min(self.dims[0] - 1), y.min(self.dims[1] - 1), z.min(self.dims[2] - 1))
        };
        let mut voxels = Vec::with_capacity(dims.iter().product());
        let mut labels = self.labels.as_ref().map(|_| Vec::with_capacity(voxels.capacity()));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = src(x, y, z);
                    voxels.push(self.voxels[i]);
                    if let (Some(out), Some(l)) = (labels.as_mut(), self.labels.as_ref()) {
                        out.push(l[i]);
                    }
                }
            }
        }
        Volume { dims, voxels, modality: self.modality, labels, spacing: self.spacing }
    }

    /// Copies the `size` box starting at `offset`.
    pub fn crop(&self, offset: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if offset[a] + size[a] > self.dims[a] || size[a] == 0 {
                return Err(Error::Dimension(format!("crop {size:?} at {offset:?} outside {:?}", self.dims)));
            }
        }
        let mut voxels = Vec::with_capacity(size.iter().product());
        let mut labels = self.labels.as_ref().map(|_| Vec::with_capacity(voxels.capacity()));
        for z in 0..size[2] {
            for y in 0..size[1] {
                for x in 0..size[0] {
                    let i = voxel_index(self.dims, x + offset[0], y + offset[1], z + offset[2]);
                    voxels.push(self.voxels[i]);
                    if let (Some(out), Some(l)) = (labels.as_mut(), self.labels.as_ref()) {
                        out.push(l[i]);
                    }
                }
            }
        }
        Ok(Volume { dims: size, voxels, modality: self.modality, labels, spacing: self.spacing })
    }
}

/// Cubic crop of side `side` taken from a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct SubVolume {
    pub side: usize,
    pub voxels: Vec<f32>,
    pub labels: Option<Vec<u32>>,
    pub modality: Modality,
    pub offset: [usize; 3],
}

impl SubVolume {
    /// Rescales intensities to [0, 1]. A constant crop becomes all zeros.
    pub fn normalize_min_max(&mut self) {
        let lo = self.voxels.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        for v in &mut self.voxels {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }

    pub fn normalized(mut self) -> Self {
        self.normalize_min_max();
        self
    }
}

/// Crop of side `side` at `offset`, padding undersized volumes first.
pub fn subvolume_at(v: &Volume, side: usize, offset: [usize; 3]) -> Result<SubVolume> {
    let padded = v.pad_edge([side; 3]);
    let c = padded.crop(offset, [side; 3])?;
    Ok(SubVolume { side, voxels: c.voxels, labels: c.labels, modality: v.modality, offset })
}

/// Uniformly random axis-aligned `side^3` crop. Volumes smaller than `side`
/// along an axis are edge-padded first. Labels share the crop offset.
pub fn sample_subvolume<R: Rng>(v: &Volume, side: usize, rng: &mut R) -> Result<SubVolume> {
    let padded = v.pad_edge([side; 3]);
    let mut offset = [0usize; 3];
    for a in 0..3 {
        offset[a] = rng.random_range(0..=padded.dims[a] - side);
    }
    let c = padded.crop(offset, [side; 3])?;
    Ok(SubVolume { side, voxels: c.voxels, labels: c.labels, modality: v.modality, offset })
}
