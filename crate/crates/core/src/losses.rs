//! Training objectives.
//!
//! Pre-training combines three proxy losses with a Jensen-Shannon term
//! between kernel density estimates of the two fusion streams:
//!
//! ```text
//! total = inpaint + contrast + rot + jsd_sign * jsd      (jsd_sign = -1)
//! ```
//!
//! The density estimate uses an unnormalized Gaussian kernel
//! `exp(-|e - x|^2 / (2 sigma^2))` whose bandwidth `sigma` is the mean
//! nearest-neighbour distance of the samples. Both streams are evaluated on
//! the union of their samples; the two value vectors are normalized into
//! discrete distributions over that shared set, floored at `1e-12`, and
//! compared with natural-log KL divergences against their average.

use std::cmp::Ordering;
use std::rc::Rc;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Floor applied to normalized densities before taking logarithms.
pub const KL_FLOOR: f64 = 1e-12;

/// Smoothing in numerator and denominator of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Mean absolute error over voxels flagged in `mask`.
pub fn loss_inpaint<'g, T: Real>(recon: Var<'g, T>, target: &[f32], mask: &[bool]) -> Result<Var<'g, T>> {
    if recon.len() != target.len() || target.len() != mask.len() {
        return Err(Error::Dimension(format!(
            "inpaint loss on {} predictions, {} targets, {} mask flags",
            recon.len(),
            target.len(),
            mask.len()
        )));
    }
    let picked: Vec<u32> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i as u32).collect();
    if picked.is_empty() {
        return Err(Error::Contract("inpaint loss needs at least one masked voxel".into()));
    }
    let g = recon.graph();
    let flat = recon.reshape(&[recon.len()])?;
    let t = g.leaf(Tensor::from_fn(&[target.len()], |i| T::from_f64_lossy(target[i] as f64)));
    let n = picked.len();
    flat.sub(t)?.abs()?.gather(&[n], picked.into())?.mean()
}

/// Mean cross-entropy of `[B, 4]` logits against rotation labels.
pub fn loss_rot<'g, T: Real>(logits: Var<'g, T>, labels: &[u8]) -> Result<Var<'g, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != 4 || shape[0] != labels.len() {
        return Err(Error::Dimension(format!("rotation logits {shape:?} for {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 3) {
        return Err(Error::Contract(format!("rotation label {bad} outside 0..=3")));
    }
    let idx: Vec<u32> = labels.iter().enumerate().map(|(b, &l)| (b * 4 + l as usize) as u32).collect();
    logits.log_softmax(None)?.gather(&[labels.len()], idx.into())?.mean()?.neg()
}

/// NT-Xent over the `2B` views `[z1; z2]`: each view's positive is its
/// counterpart in the other half, every other view is a negative, and
/// similarities are dot products divided by `tau`.
pub fn loss_contrast<'g, T: Real>(z1: Var<'g, T>, z2: Var<'g, T>, tau: f64) -> Result<Var<'g, T>> {
    let (s1, s2) = (z1.shape(), z2.shape());
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::Dimension(format!("contrastive inputs {s1:?} and {s2:?}")));
    }
    let b = s1[0];
    if b < 2 {
        return Err(Error::Contract("contrastive loss needs a batch of at least 2".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let n = 2 * b;
    let z = z1.concat_rows(z2)?;
    let sim = z.matmul_t(z, false, true)?.scale(1.0 / tau)?;
    let mask: Rc<[bool]> = (0..n * n).map(|k| k / n != k % n).collect();
    let pos: Vec<u32> = (0..n).map(|i| (i * n + (i + b) % n) as u32).collect();
    sim.log_softmax(Some(mask))?.gather(&[n], pos.into())?.mean()?.neg()
}

/// Mean nearest-neighbour distance of the rows of `[N, d]`, shape `[1]`.
pub fn kde_bandwidth<'g, T: Real>(samples: Var<'g, T>) -> Result<Var<'g, T>> {
    let sigma = samples.nn_dist()?.mean()?;
    if sigma.item().partial_cmp(&T::zero()) != Some(Ordering::Greater) {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(sigma)
}

#[derive(Clone, Copy, Debug)]
pub struct DensityEstimate<'g, T: Real> {
    /// `[M, d]`
    pub eval_points: Var<'g, T>,
    /// Unnormalized kernel sums `[M]`.
    pub values: Var<'g, T>,
    /// Shape `[1]`.
    pub bandwidth: Var<'g, T>,
    pub sample_count: usize,
}

/// Gaussian kernel density of `samples` `[N, d]` at `eval_points` `[M, d]`:
/// `values[m] = mean_n exp(-|e_m - x_n|^2 / (2 sigma^2))`.
pub fn kde_density<'g, T: Real>(
    samples: Var<'g, T>,
    eval_points: Var<'g, T>,
    sigma: Var<'g, T>,
) -> Result<DensityEstimate<'g, T>> {
    if sigma.len() != 1 {
        return Err(Error::Dimension(format!("bandwidth must be a scalar, got {:?}", sigma.shape())));
    }
    if sigma.item().partial_cmp(&T::zero()) != Some(Ordering::Greater) {
        return Err(Error::DegenerateBandwidth);
    }
    let n = samples.shape()[0];
    let d2 = eval_points.pairwise_sq_dist(samples)?;
    let shape = d2.shape();
    let two_var = sigma.mul(sigma)?.scale(2.0)?.broadcast_scalar(&shape)?;
    let values = d2.div(two_var)?.neg()?.exp()?.sum_last()?.scale(1.0 / n as f64)?;
    Ok(DensityEstimate { eval_points, values, bandwidth: sigma, sample_count: n })
}

/// Normalizes a non-negative vector to sum 1, then floors at [`KL_FLOOR`].
fn to_distribution<'g, T: Real>(v: Var<'g, T>) -> Result<Var<'g, T>> {
    let total = v.sum()?.broadcast_scalar(&v.shape())?;
    v.div(total)?.clamp_min(KL_FLOOR)
}

/// Jensen-Shannon divergence between two non-negative weight vectors over
/// the same support, in nats.
pub fn jsd_discrete<'g, T: Real>(w1: Var<'g, T>, w2: Var<'g, T>) -> Result<Var<'g, T>> {
    if w1.shape() != w2.shape() {
        return Err(Error::Contract(format!("distributions over {:?} and {:?}", w1.shape(), w2.shape())));
    }
    let p1 = to_distribution(w1)?;
    let p2 = to_distribution(w2)?;
    let m = p1.add(p2)?.scale(0.5)?;
    let ln_m = m.ln()?;
    let kl1 = p1.mul(p1.ln()?.sub(ln_m)?)?.sum()?;
    let kl2 = p2.mul(p2.ln()?.sub(ln_m)?)?.sum()?;
    kl1.add(kl2)?.scale(0.5)
}

pub fn jsd<'g, T: Real>(d1: &DensityEstimate<'g, T>, d2: &DensityEstimate<'g, T>) -> Result<Var<'g, T>> {
    let same = d1.eval_points.id() == d2.eval_points.id()
        || d1.eval_points.value().as_ref() == d2.eval_points.value().as_ref();
    if !same {
        return Err(Error::Contract("densities evaluated at different points".into()));
    }
    jsd_discrete(d1.values, d2.values)
}

/// Random subset of at most `max` rows, kept in their original order.
pub fn subsample_rows<'g, T: Real, R: Rng>(x: Var<'g, T>, max: usize, rng: &mut R) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let (n, d) = (shape[0], shape[1]);
    if n <= max {
        return Ok(x);
    }
    let mut rows = rand::seq::index::sample(rng, n, max).into_vec();
    rows.sort_unstable();
    let idx: Vec<u32> = rows.iter().flat_map(|&r| (0..d).map(move |c| (r * d + c) as u32)).collect();
    x.gather(&[max, d], idx.into())
}

/// JSD between the kernel density estimates of two feature sets `[T, d]`,
/// each subsampled to at most `max_samples` rows, with a bandwidth per set
/// and the union of both subsamples as evaluation points.
pub fn feature_jsd<'g, T: Real, R: Rng>(
    f1: Var<'g, T>,
    f2: Var<'g, T>,
    max_samples: usize,
    rng: &mut R,
) -> Result<Var<'g, T>> {
    let s1 = subsample_rows(f1, max_samples, rng)?;
    let s2 = subsample_rows(f2, max_samples, rng)?;
    let eval = s1.concat_rows(s2)?;
    let d1 = kde_density(s1, eval, kde_bandwidth(s1)?)?;
    let d2 = kde_density(s2, eval, kde_bandwidth(s2)?)?;
    jsd(&d1, &d2)
}

/// Cross-entropy plus soft Dice over all `K` channels of `[N, K]` logits,
/// weighted by `ce_weight` and `dice_weight`.
pub fn loss_segmentation<'g, T: Real>(
    logits: Var<'g, T>,
    labels: &[u32],
    ce_weight: f64,
    dice_weight: f64,
) -> Result<Var<'g, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension(format!("segmentation logits {shape:?} for {} labels", labels.len())));
    }
    let (n, k) = (shape[0], shape[1]);
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Contract(format!("label {bad} outside {k} classes")));
    }
    let g = logits.graph();
    let pick: Vec<u32> = labels.iter().enumerate().map(|(i, &l)| (i * k + l as usize) as u32).collect();
    let ce = logits.log_softmax(None)?.gather(&[n], pick.into())?.mean()?.neg()?;
    let probs = logits.softmax(None)?;
    let mut onehot = vec![T::zero(); n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l as usize] = T::one();
    }
    let y = g.leaf(Tensor::new(vec![n, k], onehot)?);
    let ones = g.leaf(Tensor::full(&[1, n], T::one()));
    let inter = ones.matmul(probs.mul(y)?)?;
    let denom = ones.matmul(probs)?.add(ones.matmul(y)?)?.add_scalar(DICE_SMOOTH)?;
    let dice = inter.scale(2.0)?.add_scalar(DICE_SMOOTH)?.div(denom)?.mean()?;
    let dice_loss = dice.neg()?.add_scalar(1.0)?;
    ce.scale(ce_weight)?.add(dice_loss.scale(dice_weight)?)
}

/// Scalar values of the four pre-training terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub inpaint: f64,
    pub contrast: f64,
    pub rot: f64,
    pub jsd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub inpaint: f64,
    pub contrast: f64,
    pub rot: f64,
    pub jsd: f64,
    pub total: f64,
}

/// `total = inpaint + contrast + rot + jsd_sign * jsd`.
pub fn total_loss(parts: LossParts, jsd_sign: f64) -> Result<LossReport> {
    for (term, v) in [("inpaint", parts.inpaint), ("contrast", parts.contrast), ("rot", parts.rot), ("jsd", parts.jsd)]
    {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: term.into() });
        }
    }
    Ok(LossReport {
        inpaint: parts.inpaint,
        contrast: parts.contrast,
        rot: parts.rot,
        jsd: parts.jsd,
        total: parts.inpaint + parts.contrast + parts.rot + jsd_sign * parts.jsd,
    })
}

/// Differentiable counterpart of [`total_loss`].
pub fn total_loss_var<'g, T: Real>(
    inpaint: Var<'g, T>,
    contrast: Var<'g, T>,
    rot: Var<'g, T>,
    jsd: Var<'g, T>,
    jsd_sign: f64,
) -> Result<Var<'g, T>> {
    inpaint.add(contrast)?.add(rot)?.add(jsd.scale(jsd_sign)?)
}
