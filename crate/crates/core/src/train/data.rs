//! Datasets of SFV1 volumes and the synthetic paired-phantom generator.

use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::volume::{gen_phantom, read_volume, write_volume, AugmentConfig, Modality, PhantomOptions, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
}

/// Every `*.sfv` file in `dir`, ordered by file name; ids are file stems.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Case>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "sfv") {
            paths.push(path);
        }
    }
    paths.sort();
    let mut cases = Vec::with_capacity(paths.len());
    for p in paths {
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        cases.push(Case { id, volume: read_volume(&p)? });
    }
    if cases.is_empty() {
        return Err(Error::Config(format!("{}: no .sfv volumes found", dir.display())));
    }
    Ok(cases)
}

/// Writes `{id}.sfv` for every case, creating `dir` if needed.
pub fn save_dataset(dir: impl AsRef<Path>, cases: &[Case]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in cases {
        write_volume(&c.volume, dir.join(format!("{}.sfv", c.id)))?;
    }
    Ok(())
}

/// Anatomy seed of case `i` in a family seeded with `seed`.
pub fn case_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// `n` registered CT-like/MR-like phantom pairs: `case{i}_ct`, `case{i}_mr`.
pub fn synthetic_pairs(
    seed: u64,
    n: usize,
    dims: [usize; 3],
    n_organs: usize,
    transfer_id: u32,
    opts: &PhantomOptions,
) -> Result<Vec<Case>> {
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let s = case_seed(seed, i);
        for m in [Modality::CtLike, Modality::MrLike] {
            out.push(Case {
                id: format!("case{i}_{}", m.tag()),
                volume: gen_phantom(s, dims, n_organs, m, transfer_id, opts)?,
            });
        }
    }
    Ok(out)
}

pub fn augment_config(cfg: &Config) -> AugmentConfig {
    AugmentConfig { frac_min: cfg.cutout_min, frac_max: cfg.cutout_max, max_cutouts: cfg.cutout_count }
}

pub fn phantom_options(cfg: &Config) -> PhantomOptions {
    PhantomOptions { noise_sigma: cfg.phantom_noise as f32, bias_field: cfg.phantom_bias }
}
