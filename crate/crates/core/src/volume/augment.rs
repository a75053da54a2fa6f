//! Rotation and inner-cutout augmentation.

use rand::Rng;

use super::{voxel_index, SubVolume};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub frac_min: f64,
    pub frac_max: f64,
    /// Upper bound on the number of cuboids per view.
    pub max_cutouts: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { frac_min: 0.1, frac_max: 0.3, max_cutouts: 3 }
    }
}

/// Axis-aligned box, `origin` inclusive, `size` voxels per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cuboid {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

/// One augmented view of a sub-volume.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub side: usize,
    /// Rotated voxels with cutouts set to zero.
    pub voxels: Vec<f32>,
    /// Quarter turns about z, in `0..4`.
    pub rot_label: u8,
    /// `true` where a voxel was erased.
    pub cutout_mask: Vec<bool>,
    /// Rotated voxels before erasure (the inpainting target).
    pub pre_cutout: Vec<f32>,
}

impl AugmentedView {
    /// View without any augmentation, as used at inference.
    pub fn identity(sv: &SubVolume) -> Self {
        augment_with(sv, 0, &[])
    }

    pub fn erased_fraction(&self) -> f64 {
        self.cutout_mask.iter().filter(|&&m| m).count() as f64 / self.cutout_mask.len() as f64
    }
}

/// Rotates a cube `k` quarter turns about the z axis:
/// one turn maps `out[x, y, z] = in[y, side-1-x, z]`.
pub fn rotate_z<V: Copy>(data: &[V], side: usize, k: u8) -> Vec<V> {
    let dims = [side; 3];
    let mut cur = data.to_vec();
    for _ in 0..k % 4 {
        let mut next = cur.clone();
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    next[voxel_index(dims, x, y, z)] = cur[voxel_index(dims, y, side - 1 - x, z)];
                }
            }
        }
        cur = next;
    }
    cur
}

/// Deterministic core: rotate by `k` quarter turns, then zero the cuboids.
pub fn augment_with(sv: &SubVolume, k: u8, cutouts: &[Cuboid]) -> AugmentedView {
    let s = sv.side;
    let dims = [s; 3];
    let pre_cutout = rotate_z(&sv.voxels, s, k);
    let mut mask = vec![false; pre_cutout.len()];
    for c in cutouts {
        for z in c.origin[2]..(c.origin[2] + c.size[2]).min(s) {
            for y in c.origin[1]..(c.origin[1] + c.size[1]).min(s) {
                for x in c.origin[0]..(c.origin[0] + c.size[0]).min(s) {
                    mask[voxel_index(dims, x, y, z)] = true;
                }
            }
        }
    }
    let voxels = pre_cutout.iter().zip(&mask).map(|(&v, &m)| if m { 0.0 } else { v }).collect();
    AugmentedView { side: s, voxels, rot_label: k % 4, cutout_mask: mask, pre_cutout }
}

fn covered(side: usize, cuboids: &[Cuboid]) -> usize {
    let dims = [side; 3];
    let mut mask = vec![false; side * side * side];
    for c in cuboids {
        for z in c.origin[2]..c.origin[2] + c.size[2] {
            for y in c.origin[1]..c.origin[1] + c.size[1] {
                for x in c.origin[0]..c.origin[0] + c.size[0] {
                    mask[voxel_index(dims, x, y, z)] = true;
                }
            }
        }
    }
    mask.iter().filter(|&&m| m).count()
}

fn place<R: Rng>(rng: &mut R, side: usize, size: [usize; 3]) -> Cuboid {
    let mut origin = [0; 3];
    for a in 0..3 {
        // keep a one-voxel margin when the cube allows it ("inner" cutout)
        origin[a] = if size[a] + 2 <= side {
            rng.random_range(1..=side - 1 - size[a])
        } else {
            rng.random_range(0..=side - size[a])
        };
    }
    Cuboid { origin, size }
}

/// Draws cutouts whose union covers a fraction of the cube inside
/// `[frac_min, frac_max]`.
fn draw_cutouts<R: Rng>(rng: &mut R, side: usize, cfg: &AugmentConfig) -> Vec<Cuboid> {
    let total = side * side * side;
    let lo = (cfg.frac_min * total as f64).ceil() as usize;
    let hi = (cfg.frac_max * total as f64).floor() as usize;
    if cfg.max_cutouts == 0 || hi == 0 || lo > hi {
        return Vec::new();
    }
    let max_edge = if side > 2 { side - 2 } else { side };
    for _ in 0..64 {
        let target = rng.random_range(cfg.frac_min..=cfg.frac_max) * total as f64;
        let n = rng.random_range(1..=cfg.max_cutouts);
        let per = target / n as f64;
        let cuboids: Vec<Cuboid> = (0..n)
            .map(|_| {
                let edge = per.cbrt();
                let a = (edge * rng.random_range(0.7..1.4)).round().clamp(1.0, max_edge as f64) as usize;
                let b = (edge * rng.random_range(0.7..1.4)).round().clamp(1.0, max_edge as f64) as usize;
                let c = (per / (a * b) as f64).round().clamp(1.0, max_edge as f64) as usize;
                place(rng, side, [a, b, c])
            })
            .collect();
        let got = covered(side, &cuboids);
        if (lo..=hi).contains(&got) {
            return cuboids;
        }
    }
    // fall back to the single box whose volume lands inside the bounds
    let target = (lo + hi) / 2;
    let mut best = [1, 1, 1];
    let mut best_err = usize::MAX;
    for a in 1..=side {
        for b in 1..=side {
            for c in 1..=side {
                let v = a * b * c;
                if (lo..=hi).contains(&v) && v.abs_diff(target) < best_err {
                    best_err = v.abs_diff(target);
                    best = [a, b, c];
                }
            }
        }
    }
    vec![place(rng, side, best)]
}

/// Random quarter-turn about z (label recorded) followed by one or more
/// inner cuboid cutouts set to zero.
pub fn augment<R: Rng>(sv: &SubVolume, rng: &mut R, cfg: &AugmentConfig) -> AugmentedView {
    let k = rng.random_range(0..4u8);
    let cutouts = draw_cutouts(rng, sv.side, cfg);
    augment_with(sv, k, &cutouts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube(side: usize) -> SubVolume {
        SubVolume {
            side,
            voxels: (0..side * side * side).map(|i| i as f32).collect(),
            labels: None,
            modality: Modality::CtLike,
            offset: [0; 3],
        }
    }

    #[test]
    fn zero_count_disables_cutouts() {
        let cfg = AugmentConfig { max_cutouts: 0, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let v = augment(&cube(8), &mut rng, &cfg);
            assert!(v.cutout_mask.iter().all(|&m| !m));
        }
    }

    #[test]
    fn identity_augmentation() {
        let sv = cube(4);
        let v = augment_with(&sv, 0, &[]);
        assert_eq!(v.voxels, sv.voxels);
        assert_eq!(v.pre_cutout, sv.voxels);
        assert!(v.cutout_mask.iter().all(|&m| !m));
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let sv = cube(5);
        let once = rotate_z(&sv.voxels, 5, 2);
        assert_ne!(once, sv.voxels);
        assert_eq!(rotate_z(&once, 5, 2), sv.voxels);
        assert_eq!(rotate_z(&rotate_z(&sv.voxels, 5, 1), 5, 3), sv.voxels);
    }

    #[test]
    fn rotation_preserves_multiset() {
        let sv = cube(4);
        for k in 1..4 {
            let mut a = augment_with(&sv, k, &[]).voxels;
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            assert_eq!(a, sv.voxels);
        }
    }

    #[test]
    fn erased_fraction_within_bounds() {
        let sv = cube(16);
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let v = augment(&sv, &mut rng, &cfg);
            let f = v.erased_fraction();
            assert!((0.1..=0.3).contains(&f), "fraction {f}");
            for ((&x, &m), &p) in v.voxels.iter().zip(&v.cutout_mask).zip(&v.pre_cutout) {
                assert_eq!(x, if m { 0.0 } else { p });
            }
            assert_eq!(rotate_z(&sv.voxels, 16, v.rot_label), v.pre_cutout);
        }
    }

    #[test]
    fn small_cubes_still_get_cutouts() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for side in [2, 4, 6] {
            let v = augment(&cube(side), &mut rng, &cfg);
            let f = v.erased_fraction();
            assert!((0.1..=0.3).contains(&f), "side {side}: {f}");
        }
    }
}
