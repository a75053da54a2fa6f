//! Segmentation fine-tuning and the k-fold runner.
//!
//! Each step draws a labelled sub-volume, augments it twice and feeds the
//! two views to the fusion module's streams. Supervision follows view 1:
//! its labels receive the same rotation. The decoder always starts fresh;
//! projection heads are never part of the fine-tuning model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_for_finetune, LoadReport};
use super::data::augment_config;
use super::pretrain::INIT_STREAM;
use super::{adamw_step, lr_schedule, AdamState, Case};
use crate::autograd::Graph;
use crate::config::{Config, Mode};
use crate::error::{Error, Result};
use crate::eval::{argmax_rows, dice_report, evaluate_cases, mean_dice};
use crate::losses::loss_segmentation;
use crate::model;
use crate::params::ParamStore;
use crate::volume::{augment, rotate_z, sample_subvolume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Last step of the epoch (1-based).
    pub step: usize,
    pub loss: f64,
    /// Mean Dice of the training predictions seen during the epoch.
    pub dice: f64,
}

pub struct FinetuneOutcome {
    pub params: ParamStore<f32>,
    pub state: AdamState<f32>,
    pub epochs: Vec<EpochLog>,
    /// Name bookkeeping when started from a checkpoint.
    pub load: Option<LoadReport>,
}

fn check_labels(cfg: &Config, dataset: &[Case]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("fine-tuning needs at least one labelled volume".into()));
    }
    for c in dataset {
        let labels = c.volume.labels.as_ref().ok_or_else(|| Error::Contract(format!("case {} has no labels", c.id)))?;
        if let Some(&l) = labels.iter().find(|&&l| l as usize > cfg.n_classes) {
            return Err(Error::Contract(format!("case {}: label {l} exceeds n_classes {}", c.id, cfg.n_classes)));
        }
    }
    Ok(())
}

/// Trains the segmentation model for `cfg.total_steps` updates. `init`,
/// when given, supplies the backbone (embedding, fusion module, encoder).
pub fn finetune_loop(cfg: &Config, init: Option<&ParamStore<f32>>, dataset: &[Case]) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    check_labels(cfg, dataset)?;
    let seed = cfg.seed ^ INIT_STREAM;
    let (mut params, load) = match init {
        Some(p) => {
            let (store, report) = load_for_finetune(p, cfg, seed);
            log::info!(
                "loaded {} tensors, dropped {}, initialized {} fresh",
                report.loaded.len(),
                report.dropped.len(),
                report.fresh.len()
            );
            (store, Some(report))
        }
        None => (model::init_params(cfg, Mode::Finetune, seed), None),
    };
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let acfg = augment_config(cfg);
    let s = cfg.sub_volume;
    let k = cfg.n_classes + 1;
    let per_epoch = cfg.steps_per_epoch.max(1);
    let mut epochs = Vec::new();
    let (mut loss_acc, mut dice_acc, mut count) = (0.0, 0.0, 0usize);

    for step in 1..=cfg.total_steps {
        let g = Graph::<f32>::new();
        let mut total = None;
        for _ in 0..cfg.batch_size {
            let case = &dataset[rng.random_range(0..dataset.len())];
            let sv = sample_subvolume(&case.volume, s, &mut rng)?.normalized();
            let v1 = augment(&sv, &mut rng, &acfg);
            let v2 = augment(&sv, &mut rng, &acfg);
            let labels = rotate_z(sv.labels.as_deref().unwrap_or_default(), s, v1.rot_label);
            let logits = model::segment(&g, &params, cfg, &v1.voxels, &v2.voxels)?;
            let pred = argmax_rows(logits.value().data(), k);
            dice_acc += dice_report(&case.id, &pred, &labels, cfg.n_classes)?.mean;
            count += 1;
            let l = loss_segmentation(logits, &labels, cfg.seg_ce_weight, cfg.seg_dice_weight)?;
            total = Some(match total {
                None => l,
                Some(t) => l.add(t)?,
            });
        }
        let loss = total
            .ok_or_else(|| Error::Config("batch_size must be positive".into()))?
            .scale(1.0 / cfg.batch_size as f64)?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { term: "segmentation loss".into() });
        }
        loss_acc += value;
        let grads = g.backward(loss, &params)?;
        adamw_step(&mut params, &grads, &mut state, lr_schedule(step, cfg), cfg)?;
        if step % per_epoch == 0 || step == cfg.total_steps {
            let steps = (count / cfg.batch_size).max(1);
            let e = EpochLog {
                epoch: epochs.len() + 1,
                step,
                loss: loss_acc / steps as f64,
                dice: dice_acc / count as f64,
            };
            log::info!("epoch {} (step {step}): loss {:.4}, train dice {:.4}", e.epoch, e.loss, e.dice);
            epochs.push(e);
            (loss_acc, dice_acc, count) = (0.0, 0.0, 0);
        }
    }
    Ok(FinetuneOutcome { params, state, epochs, load })
}

/// Deterministic partition of `0..n` into `k` folds; the first `n % k`
/// folds hold one extra case.
pub fn kfold_splits(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::Config(format!("cannot split {n} cases into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub test_ids: Vec<String>,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KfoldReport {
    pub folds: Vec<FoldReport>,
    pub mean: f64,
}

/// Fine-tunes on `k - 1` folds and scores the held-out fold, for every fold.
pub fn kfold(cfg: &Config, dataset: &[Case], k: usize, init: Option<&ParamStore<f32>>) -> Result<KfoldReport> {
    let splits = kfold_splits(dataset.len(), k, cfg.seed)?;
    let mut folds = Vec::with_capacity(k);
    for (f, test) in splits.iter().enumerate() {
        let train: Vec<Case> = (0..dataset.len()).filter(|i| !test.contains(i)).map(|i| dataset[i].clone()).collect();
        let held: Vec<Case> = test.iter().map(|&i| dataset[i].clone()).collect();
        log::info!("fold {}/{k}: {} training, {} held-out cases", f + 1, train.len(), held.len());
        let out = finetune_loop(cfg, init, &train)?;
        let dice = mean_dice(&evaluate_cases(&out.params, cfg, &held)?);
        folds.push(FoldReport { fold: f, test_ids: held.into_iter().map(|c| c.id).collect(), dice });
    }
    let mean = folds.iter().map(|f| f.dice).sum::<f64>() / folds.len() as f64;
    Ok(KfoldReport { folds, mean })
}
