//! Optimizer, learning-rate schedule, checkpoints and the training loops.

mod checkpoint;
mod data;
mod finetune;
mod pretrain;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, load_for_finetune, save_checkpoint, Checkpoint,
    LoadReport, CHECKPOINT_VERSION,
};
pub use data::{augment_config, case_seed, load_dataset, phantom_options, save_dataset, synthetic_pairs, Case};
pub use finetune::{finetune_loop, kfold, kfold_splits, EpochLog, FinetuneOutcome, FoldReport, KfoldReport};
pub use pretrain::{format_sig, pretrain_loop, write_loss_csv, PretrainOutcome, StepLog, LOSS_CSV_HEADER};

use std::f64::consts::PI;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::{Gradient, ParamStore};
use crate::tensor::{lit, Real, Tensor};

/// Learning rate at `step`: linear warm-up from 0 to `cfg.lr` over
/// [`Config::effective_warmup`] steps, then cosine decay to 0 at
/// `cfg.total_steps`. Steps past the end give 0.
pub fn lr_schedule(step: usize, cfg: &Config) -> f64 {
    let total = cfg.total_steps;
    let warm = cfg.effective_warmup().min(total);
    if step > total {
        log::warn!("step {step} beyond total_steps {total}; learning rate clamped to 0");
        return 0.0;
    }
    if step < warm {
        return cfg.lr * step as f64 / warm as f64;
    }
    if total == warm {
        return cfg.lr;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    cfg.lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// First and second moment estimates plus the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamStore<T>) -> Self {
        let mut m = ParamStore::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        Self { step: 0, v: m.clone(), m }
    }
}

/// One AdamW update with learning rate `lr`. Weight decay is decoupled:
/// `p <- p - lr * wd * p` precedes the bias-corrected adaptive step.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradient<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &Config,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite { term: format!("gradient of {name}") });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1: T = lit(1.0 / (1.0 - b1.powi(t)));
    let c2: T = lit(1.0 / (1.0 - b2.powi(t)));
    let (lr_t, b1_t, b2_t, eps): (T, T, T, T) = (lit(lr), lit(b1), lit(b2), lit(cfg.adam_eps));
    let decay: T = lit(1.0 - lr * cfg.weight_decay);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::Contract(format!("no gradient for parameter {name}")))?;
        let m = state.m.get_mut(name).ok_or_else(|| Error::Contract(format!("no moment for {name}")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::Dimension(format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape())));
        }
        let m = m.data_mut();
        let v = state.v.get_mut(name).ok_or_else(|| Error::Contract(format!("no moment for {name}")))?.data_mut();
        for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = b1_t * m[i] + (T::one() - b1_t) * gi;
            v[i] = b2_t * v[i] + (T::one() - b2_t) * gi * gi;
            let m_hat = m[i] * c1;
            let v_hat = v[i] * c2;
            *pi = *pi * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
