//! Synthetic registered CT-like / MR-like phantoms.
//!
//! Anatomy depends only on the seed, so both modalities of one seed share a
//! label grid. Appearance differs per modality: CT-like intensities are an
//! affine ramp over label ids, MR-like intensities come from a permuted
//! lookup (non-monotone w.r.t. the CT ramp) times a smooth bias field.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{voxel_index, Modality, Volume};
use crate::error::{Error, Result};

pub const MAX_ORGANS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomOptions {
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f32,
    /// Multiplicative low-frequency field on MR-like volumes.
    pub bias_field: bool,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        Self { noise_sigma: 0.05, bias_field: true }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    cos: f64,
    sin: f64,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dz = p[2] - self.center[2];
        // rotate about z into the ellipsoid frame
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        (u / self.radii[0]).powi(2) + (v / self.radii[1]).powi(2) + (dz / self.radii[2]).powi(2) <= 1.0
    }
}

fn anatomy(seed: u64, dims: [usize; 3], n_organs: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dim = *dims.iter().min().unwrap() as f64;
    let organs: Vec<Ellipsoid> = (0..n_organs)
        .map(|k| {
            // organ k has a characteristic size: earlier organs are larger
            let frac = if n_organs > 1 { k as f64 / (n_organs - 1) as f64 } else { 0.0 };
            let base = 0.30 - 0.14 * frac;
            let mut radii = [0.0; 3];
            for r in &mut radii {
                *r = (base * rng.random_range(0.75..1.25) * min_dim).max(1.5);
            }
            let mut center = [0.0; 3];
            for a in 0..3 {
                center[a] = rng.random_range(0.25..0.75) * (dims[a] as f64 - 1.0);
            }
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Ellipsoid { center, radii, cos: angle.cos(), sin: angle.sin() }
        })
        .collect();
    let mut labels = vec![0u32; dims.iter().product()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let i = voxel_index(dims, x, y, z);
                // later (smaller) organs are painted over earlier ones
                for (k, e) in organs.iter().enumerate() {
                    if e.contains(p) {
                        labels[i] = k as u32 + 1;
                    }
                }
            }
        }
    }
    labels
}

/// Intensity per label id, before bias field and noise.
fn transfer_table(modality: Modality, n_organs: usize, transfer_id: u32) -> Vec<f32> {
    let t = transfer_id as f32;
    match modality {
        Modality::CtLike => {
            let offset = -0.2 * t;
            let slope = (1.0 + 0.25 * t) / n_organs as f32;
            (0..=n_organs).map(|l| offset + slope * l as f32).collect()
        }
        Modality::MrLike => {
            let mut order: Vec<usize> = (0..=n_organs).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0x4d52_0000 ^ transfer_id as u64);
            loop {
                order.shuffle(&mut rng);
                // reject the identity so appearance never matches the CT ramp order
                if order.iter().enumerate().any(|(i, &o)| i != o) {
                    break;
                }
            }
            (0..=n_organs).map(|l| 0.2 + order[l] as f32 / n_organs as f32).collect()
        }
    }
}

/// Deterministic phantom: `n_organs` ellipsoids (labels `1..=n_organs`) in a
/// background of label 0.
pub fn gen_phantom(
    seed: u64,
    dims: [usize; 3],
    n_organs: usize,
    modality: Modality,
    transfer_id: u32,
    opts: &PhantomOptions,
) -> Result<Volume> {
    if n_organs == 0 || n_organs > MAX_ORGANS {
        return Err(Error::Config(format!("n_organs must be in 1..={MAX_ORGANS}, got {n_organs}")));
    }
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::Config(format!("phantom dims must each be >= 8, got {dims:?}")));
    }
    let labels = anatomy(seed, dims, n_organs);
    let table = transfer_table(modality, n_organs, transfer_id);
    let mut voxels: Vec<f32> = labels.iter().map(|&l| table[l as usize]).collect();

    let stream = match modality {
        Modality::CtLike => 1u64,
        Modality::MrLike => 2u64,
    };
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stream << 32) ^ transfer_id as u64);
    if modality == Modality::MrLike && opts.bias_field {
        let phase: [f64; 3] = [
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let u = [x as f64 / dims[0] as f64, y as f64 / dims[1] as f64, z as f64 / dims[2] as f64];
                    let field = 1.0
                        + 0.15 * (std::f64::consts::PI * u[0] + phase[0]).sin()
                        + 0.10 * (std::f64::consts::PI * u[1] + phase[1]).sin()
                        + 0.05 * (std::f64::consts::PI * u[2] + phase[2]).sin();
                    voxels[voxel_index(dims, x, y, z)] *= field as f32;
                }
            }
        }
    }
    if opts.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, opts.noise_sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
        for v in &mut voxels {
            *v += normal.sample(&mut rng);
        }
    }
    let vol = Volume { dims, voxels, modality, labels: Some(labels), spacing: [1.0; 3] };
    vol.validate()?;
    Ok(vol)
}
