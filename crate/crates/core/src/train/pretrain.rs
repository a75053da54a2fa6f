//! Self-supervised pre-training loop.
//!
//! Each batch item is a random sub-volume seen through two augmented views
//! `x_i`, `x_j`. It is run twice, once as `(x_i, x_j)` and once as
//! `(x_j, x_i)`; every pass reconstructs and classifies the rotation of its
//! first view. The two passes give the positive pair of the contrastive
//! loss, and each pass contributes the JSD between its two fusion streams.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::augment_config;
use super::{adamw_step, lr_schedule, AdamState, Case};
use crate::autograd::{Graph, Var};
use crate::config::{Config, Mode};
use crate::error::{Error, Result};
use crate::losses::{
    feature_jsd, loss_contrast, loss_inpaint, loss_rot, total_loss, total_loss_var, LossParts, LossReport,
};
use crate::model;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::volume::{augment, sample_subvolume};

pub const LOSS_CSV_HEADER: &str = "step,lr,inpaint,contrast,rot,jsd,total";

/// Stream constant mixed into the seed for parameter initialization.
pub(crate) const INIT_STREAM: u64 = 0x5157_494E;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based update index.
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

pub struct PretrainOutcome {
    pub params: ParamStore<f32>,
    pub state: AdamState<f32>,
    pub log: Vec<StepLog>,
}

fn mean_of<'g, T: Real>(terms: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = acc.add(t)?;
    }
    acc.scale(1.0 / terms.len() as f64)
}

fn stack_rows<'g, T: Real>(rows: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let mut acc = rows[0];
    for &r in &rows[1..] {
        acc = acc.concat_rows(r)?;
    }
    Ok(acc)
}

/// Runs `cfg.total_steps` updates from `init` (or a fresh initialization
/// seeded by `cfg.seed`). The returned store holds the embedding, fusion
/// module, encoder and projection heads.
pub fn pretrain_loop(cfg: &Config, dataset: &[Case], init: Option<ParamStore<f32>>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("pre-training needs at least one volume".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("pre-training needs batch_size >= 2 for contrastive negatives".into()));
    }
    let modalities: BTreeSet<_> = dataset.iter().map(|c| c.volume.modality).collect();
    if modalities.len() < 2 {
        log::warn!("dataset holds a single modality; JSD is still computed between the two views");
    }
    let mut params = init.unwrap_or_else(|| model::init_params(cfg, Mode::Pretrain, cfg.seed ^ INIT_STREAM));
    let declared = model::param_names(cfg, Mode::Pretrain);
    let present: BTreeSet<String> = params.names().cloned().collect();
    if present != declared {
        return Err(Error::Contract("initial parameters do not match the pre-training model".into()));
    }
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let acfg = augment_config(cfg);
    let s = cfg.sub_volume;
    let mut log = Vec::with_capacity(cfg.total_steps);

    for step in 1..=cfg.total_steps {
        let g = Graph::<f32>::new();
        let mut inpaint_terms = Vec::new();
        let mut rot_rows = Vec::new();
        let mut rot_labels = Vec::new();
        let mut z_first = Vec::new();
        let mut z_second = Vec::new();
        let mut jsd_terms = Vec::new();
        for _ in 0..cfg.batch_size {
            let case = &dataset[rng.random_range(0..dataset.len())];
            let sv = sample_subvolume(&case.volume, s, &mut rng)?.normalized();
            let vi = augment(&sv, &mut rng, &acfg);
            let vj = augment(&sv, &mut rng, &acfg);
            for (pass, (a, b)) in [(&vi, &vj), (&vj, &vi)].into_iter().enumerate() {
                let (enc, proxy) = model::pretrain_forward(&g, &params, cfg, &a.voxels, &b.voxels)?;
                if a.cutout_mask.iter().any(|&m| m) {
                    inpaint_terms.push(loss_inpaint(proxy.reconstruction, &a.pre_cutout, &a.cutout_mask)?);
                }
                rot_rows.push(proxy.rot_logits);
                rot_labels.push(a.rot_label);
                if pass == 0 {
                    z_first.push(proxy.contrast);
                } else {
                    z_second.push(proxy.contrast);
                }
                if let Some(d) = enc.dim {
                    let [f1, f2] = d.stream_features;
                    jsd_terms.push(feature_jsd(f1, f2, cfg.kde_samples, &mut rng)?);
                }
            }
        }
        let zero = || g.leaf(Tensor::scalar(0.0f32));
        let inpaint = if inpaint_terms.is_empty() { zero() } else { mean_of(&inpaint_terms)? };
        let rot = loss_rot(stack_rows(&rot_rows)?, &rot_labels)?;
        let contrast = loss_contrast(stack_rows(&z_first)?, stack_rows(&z_second)?, cfg.tau)?;
        let jsd = if jsd_terms.is_empty() { zero() } else { mean_of(&jsd_terms)? };
        let parts = LossParts {
            inpaint: inpaint.item() as f64,
            contrast: contrast.item() as f64,
            rot: rot.item() as f64,
            jsd: jsd.item() as f64,
        };
        let report = total_loss(parts, cfg.jsd_sign)?;
        let total = total_loss_var(inpaint, contrast, rot, jsd, cfg.jsd_sign)?;
        let grads = g.backward(total, &params)?;
        let lr = lr_schedule(step, cfg);
        adamw_step(&mut params, &grads, &mut state, lr, cfg)?;
        log::debug!("step {step} lr {lr:.3e} total {:.5}", report.total);
        log.push(StepLog { step, lr, report });
    }
    Ok(PretrainOutcome { params, state, log })
}

/// `x` in plain decimal notation with `sig` significant digits.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (sig as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

pub fn write_loss_csv<W: Write>(mut out: W, log: &[StepLog]) -> std::io::Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for e in log {
        let r = &e.report;
        let cols = [e.lr, r.inpaint, r.contrast, r.rot, r.jsd, r.total].map(|v| format_sig(v, 9));
        writeln!(out, "{},{}", e.step, cols.join(","))?;
    }
    Ok(())
}

impl PretrainOutcome {
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &self.log).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}
