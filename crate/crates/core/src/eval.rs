//! Dice scoring, tiled inference and the cross-modality out-of-distribution
//! experiment.
//!
//! Dice conventions: two empty masks score 1, an empty mask against a
//! non-empty one scores 0. A case's mean Dice averages the foreground
//! classes present in either grid (1 when none is).

use std::io::Write;
use std::path::Path;

use crate::autograd::Graph;
use crate::config::{Config, Mode};
use crate::error::{Error, Result};
use crate::model;
use crate::params::ParamStore;
use crate::train::{self, format_sig, Case};
use crate::volume::{gen_phantom, subvolume_at, voxel_index, Modality, Volume};

/// `2|P ∩ T| / (|P| + |T|)` for the voxels labelled `class`.
pub fn dice(pred: &[u32], truth: &[u32], class: u32) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("dice of {} and {} voxels", pred.len(), truth.len())));
    }
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (x, y) = (a == class, b == class);
        p += x as usize;
        t += y as usize;
        both += (x && y) as usize;
    }
    Ok(if p + t == 0 { 1.0 } else { 2.0 * both as f64 / (p + t) as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub case_id: String,
    /// Dice of classes `1..=n_classes`, in order.
    pub per_class: Vec<f64>,
    /// `(predicted, true)` voxel counts of classes `1..=n_classes`.
    pub counts: Vec<(usize, usize)>,
    pub mean: f64,
}

pub fn dice_report(case_id: &str, pred: &[u32], truth: &[u32], n_classes: usize) -> Result<DiceReport> {
    let mut per_class = Vec::with_capacity(n_classes);
    let mut counts = Vec::with_capacity(n_classes);
    for c in 1..=n_classes as u32 {
        per_class.push(dice(pred, truth, c)?);
        counts.push((pred.iter().filter(|&&v| v == c).count(), truth.iter().filter(|&&v| v == c).count()));
    }
    let present: Vec<f64> = per_class.iter().zip(&counts).filter(|(_, &(p, t))| p + t > 0).map(|(&d, _)| d).collect();
    let mean = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(DiceReport { case_id: case_id.to_string(), per_class, counts, mean })
}

/// Row-wise argmax of `[N, K]` scores.
pub fn argmax_rows(data: &[f32], k: usize) -> Vec<u32> {
    data.chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Label prediction for a whole volume from non-overlapping `S^3` tiles.
/// The volume is edge-padded to a multiple of `S`; each tile is min-max
/// normalized and fed unaugmented to both fusion streams.
pub fn predict_volume(params: &ParamStore<f32>, cfg: &Config, volume: &Volume) -> Result<Vec<u32>> {
    let s = cfg.sub_volume;
    let tiles = volume.dims.map(|d| d.div_ceil(s));
    let padded = volume.pad_edge(tiles.map(|t| t * s));
    let mut out = vec![0u32; volume.len()];
    for tz in 0..tiles[2] {
        for ty in 0..tiles[1] {
            for tx in 0..tiles[0] {
                let offset = [tx * s, ty * s, tz * s];
                let sv = subvolume_at(&padded, s, offset)?.normalized();
                let g = Graph::<f32>::new();
                let logits = model::segment(&g, params, cfg, &sv.voxels, &sv.voxels)?;
                let labels = argmax_rows(logits.value().data(), cfg.n_classes + 1);
                for z in 0..s {
                    for y in 0..s {
                        for x in 0..s {
                            let (gx, gy, gz) = (offset[0] + x, offset[1] + y, offset[2] + z);
                            if gx < volume.dims[0] && gy < volume.dims[1] && gz < volume.dims[2] {
                                out[voxel_index(volume.dims, gx, gy, gz)] = labels[voxel_index([s; 3], x, y, z)];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Predicts and scores every case; each case must carry labels.
pub fn evaluate_cases(params: &ParamStore<f32>, cfg: &Config, cases: &[Case]) -> Result<Vec<DiceReport>> {
    cases
        .iter()
        .map(|c| {
            let truth =
                c.volume.labels.as_ref().ok_or_else(|| Error::Contract(format!("case {} has no labels", c.id)))?;
            let pred = predict_volume(params, cfg, &c.volume)?;
            dice_report(&c.id, &pred, truth, cfg.n_classes)
        })
        .collect()
}

pub fn mean_dice(reports: &[DiceReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.mean).sum::<f64>() / reports.len() as f64
}

/// `case_id,class,dice,pred_voxels,true_voxels` per class plus a `mean` row
/// per case.
pub fn write_dice_csv<W: Write>(mut out: W, reports: &[DiceReport]) -> std::io::Result<()> {
    writeln!(out, "case_id,class,dice,pred_voxels,true_voxels")?;
    for r in reports {
        for (c, (d, (p, t))) in r.per_class.iter().zip(&r.counts).enumerate() {
            writeln!(out, "{},{},{},{p},{t}", r.case_id, c + 1, format_sig(*d, 6))?;
        }
        writeln!(out, "{},mean,{},,", r.case_id, format_sig(r.mean, 6))?;
    }
    Ok(())
}

/// A family of synthetic cases sharing modality, appearance and anatomy seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub name: String,
    pub modality: Modality,
    pub family_seed: u64,
    pub transfer_id: u32,
}

impl Region {
    /// Labelled phantoms of this region, `n_organs` classes each.
    pub fn cases(&self, n: usize, dims: [usize; 3], n_organs: usize, cfg: &Config) -> Result<Vec<Case>> {
        let opts = train::phantom_options(cfg);
        (0..n)
            .map(|i| {
                let seed = train::case_seed(self.family_seed, i);
                Ok(Case {
                    id: format!("{}_{i}", self.name),
                    volume: gen_phantom(seed, dims, n_organs, self.modality, self.transfer_id, &opts)?,
                })
            })
            .collect()
    }
}

/// Layout of the out-of-distribution experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct OodSetup {
    pub ft_regions: Vec<Region>,
    pub test_regions: Vec<Region>,
    /// Unlabelled CT-like/MR-like pairs used for pre-training.
    pub pretrain_pairs: usize,
    pub ft_cases: usize,
    pub test_cases: usize,
    pub dims: [usize; 3],
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    /// Fine-tuning protocol shared by both variants. At the default lr the
    /// 300-step runs stay near chance and the comparison is noise.
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub finetune_cutouts: usize,
}

impl OodSetup {
    /// One CT-like fine-tuning region and four MR-like test regions, each
    /// with its own anatomy family and MR appearance.
    pub fn desk(seed: u64) -> Self {
        let family = |k: u64| seed.wrapping_mul(7919).wrapping_add(k);
        let test_regions = (0..4u32)
            .map(|r| Region {
                name: format!("mr-{}", (b'a' + r as u8) as char),
                modality: Modality::MrLike,
                family_seed: family(10 + r as u64),
                transfer_id: r,
            })
            .collect();
        Self {
            ft_regions: vec![Region {
                name: "ct-a".into(),
                modality: Modality::CtLike,
                family_seed: family(1),
                transfer_id: 0,
            }],
            test_regions,
            pretrain_pairs: 8,
            ft_cases: 4,
            test_cases: 4,
            dims: [16, 16, 16],
            pretrain_steps: 500,
            finetune_steps: 300,
            finetune_lr: 5e-3,
            finetune_batch: 1,
            finetune_cutouts: 0,
        }
    }

    /// Pre-training pairs cycling through the test regions' MR appearances.
    pub fn pretrain_cases(&self, seed: u64, cfg: &Config) -> Result<Vec<Case>> {
        let opts = train::phantom_options(cfg);
        let base = seed.wrapping_mul(7919).wrapping_add(100);
        let mut out = Vec::with_capacity(2 * self.pretrain_pairs);
        for i in 0..self.pretrain_pairs {
            let s = train::case_seed(base, i);
            let t = (i % self.test_regions.len().max(1)) as u32;
            for m in [Modality::CtLike, Modality::MrLike] {
                out.push(Case {
                    id: format!("pre{i}_{}", m.tag()),
                    volume: gen_phantom(s, self.dims, cfg.n_classes, m, t, &opts)?,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodReport {
    pub ft_region: String,
    pub test_region: String,
    pub variant: String,
    pub variant_dice: f64,
    pub baseline_dice: f64,
    /// `variant_dice - baseline_dice`.
    pub delta: f64,
}

pub const VARIANT_DIM: &str = "dim-pretrained";
pub const VARIANT_BASELINE: &str = "baseline";

/// Scores two fine-tuned models on one test region.
pub fn compare_on_region(
    ft_region: &str,
    test_region: &str,
    variant: (&ParamStore<f32>, &Config),
    baseline: (&ParamStore<f32>, &Config),
    cases: &[Case],
) -> Result<OodReport> {
    let variant_dice = mean_dice(&evaluate_cases(variant.0, variant.1, cases)?);
    let baseline_dice = mean_dice(&evaluate_cases(baseline.0, baseline.1, cases)?);
    Ok(OodReport {
        ft_region: ft_region.to_string(),
        test_region: test_region.to_string(),
        variant: VARIANT_DIM.to_string(),
        variant_dice,
        baseline_dice,
        delta: variant_dice - baseline_dice,
    })
}

/// Full experiment: pre-train the fusion model on both modalities (unless
/// `pretrained` is given), fine-tune it and a no-fusion, no-pre-training
/// baseline on each CT-like region, and test both on every MR-like region.
pub fn ood_experiment(
    cfg: &Config,
    setup: &OodSetup,
    seed: u64,
    pretrained: Option<&ParamStore<f32>>,
) -> Result<Vec<OodReport>> {
    let base = Config { seed, ..cfg.clone() };
    let dim_cfg = Config { use_dim: true, ..base.clone() };
    let plain_cfg = Config { use_dim: false, ..base.clone() };
    let backbone = match pretrained {
        Some(p) => p.clone(),
        None => {
            let pre_cfg = Config { mode: Mode::Pretrain, total_steps: setup.pretrain_steps, ..dim_cfg.clone() };
            let data = setup.pretrain_cases(seed, &pre_cfg)?;
            log::info!("pre-training on {} volumes for {} steps", data.len(), setup.pretrain_steps);
            train::pretrain_loop(&pre_cfg, &data, None)?.params
        }
    };
    let ft = |c: &Config| Config {
        mode: Mode::Finetune,
        total_steps: setup.finetune_steps,
        lr: setup.finetune_lr,
        batch_size: setup.finetune_batch,
        cutout_count: setup.finetune_cutouts,
        ..c.clone()
    };
    let (dim_ft, plain_ft) = (ft(&dim_cfg), ft(&plain_cfg));
    let mut reports = Vec::new();
    for region in &setup.ft_regions {
        let train_cases = region.cases(setup.ft_cases, setup.dims, cfg.n_classes, cfg)?;
        log::info!("fine-tuning on {}", region.name);
        let with_dim = train::finetune_loop(&dim_ft, Some(&backbone), &train_cases)?.params;
        let baseline = train::finetune_loop(&plain_ft, None, &train_cases)?.params;
        for test in &setup.test_regions {
            let cases = test.cases(setup.test_cases, setup.dims, cfg.n_classes, cfg)?;
            let r = compare_on_region(&region.name, &test.name, (&with_dim, &dim_ft), (&baseline, &plain_ft), &cases)?;
            log::info!("{} -> {}: {:.4} vs {:.4}", r.ft_region, r.test_region, r.variant_dice, r.baseline_dice);
            reports.push(r);
        }
    }
    Ok(reports)
}

pub const OOD_CSV_HEADER: &str = "ft_region,test_region,variant,mean_dice,delta";

/// `(ft_region, test_region, variant, mean_dice, delta)`.
pub type ReportRow = (String, String, String, f64, f64);

/// One CSV row per (fine-tune region, test region, variant); the baseline
/// row carries delta 0. Rows are sorted lexicographically.
pub fn report_rows(reports: &[OodReport]) -> Vec<ReportRow> {
    let mut rows = Vec::with_capacity(2 * reports.len());
    for r in reports {
        rows.push((r.ft_region.clone(), r.test_region.clone(), VARIANT_BASELINE.to_string(), r.baseline_dice, 0.0));
        rows.push((r.ft_region.clone(), r.test_region.clone(), r.variant.clone(), r.variant_dice, r.delta));
    }
    rows.sort_by(|a, b| (&a.0, &a.1, &a.2).cmp(&(&b.0, &b.1, &b.2)));
    rows.dedup_by(|a, b| (&a.0, &a.1, &a.2) == (&b.0, &b.1, &b.2));
    rows
}

pub fn write_report<W: Write>(mut out: W, reports: &[OodReport]) -> std::io::Result<()> {
    writeln!(out, "{OOD_CSV_HEADER}")?;
    for (ft, test, variant, dice, delta) in report_rows(reports) {
        writeln!(out, "{ft},{test},{variant},{},{}", format_sig(dice, 6), format_sig(delta, 6))?;
    }
    Ok(())
}

pub fn emit_report(reports: &[OodReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_report(&mut buf, reports).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses a report written by [`emit_report`].
pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(OOD_CSV_HEADER) {
        return Err(Error::format(0, "missing report header"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("line {}: bad number {s:?}", i + 2)));
        if f.len() != 5 {
            return Err(Error::Config(format!("line {}: expected 5 fields", i + 2)));
        }
        rows.push((f[0].to_string(), f[1].to_string(), f[2].to_string(), num(f[3])?, num(f[4])?));
    }
    Ok(rows)
}
