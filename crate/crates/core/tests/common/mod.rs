//! Shared test helpers: central finite differences in f64.
#![allow(dead_code)]

pub mod grad_cases;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinfuse::{Graph, ParamStore, Tensor, Var};

/// Relative error floor: entries with both gradients below it are compared
/// in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Replaces every tensor of `store` with U(-2, 2) values.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, t) in store.iter_mut() {
        *t = uniform(rng, t.shape(), -2.0, 2.0);
    }
}

/// Scalar probe of a possibly non-scalar output: `sum(out * w)` with a
/// fixed random `w`, so every output entry carries a distinct weight.
pub fn probe<'g>(out: Var<'g, f64>, seed: u64) -> swinfuse::Result<Var<'g, f64>> {
    if out.len() == 1 {
        return out.sum();
    }
    let mut r = rng(seed ^ 0xABCD);
    let w = out.graph().leaf(uniform(&mut r, &out.shape(), -1.0, 1.0));
    out.mul(w)?.sum()
}

#[derive(Debug, Clone, Copy)]
pub struct CheckResult {
    pub max_rel: f64,
    pub compared: usize,
}

/// Compares reverse-mode gradients of `f` against central differences
/// `h = 1e-5 (1 + |x|)` on up to `coords` random entries of every tensor
/// in `store`. Returns the largest relative error
/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn check_store<F>(store: &ParamStore<f64>, coords: usize, seed: u64, f: F) -> CheckResult
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> swinfuse::Result<Var<'g, f64>>,
{
    let eval = |s: &ParamStore<f64>| {
        let g = Graph::new();
        f(&g, s).expect("forward").item()
    };
    let g = Graph::new();
    let loss = f(&g, store).expect("forward");
    let grads = g.backward(loss, store).expect("backward");
    let mut r = rng(seed);
    let mut work = store.clone();
    let mut max_rel = 0.0f64;
    let mut compared = 0;
    for (name, t) in store.iter() {
        let n = t.len();
        for i in sample(&mut r, n, coords.min(n)) {
            let x = t.data()[i];
            let h = 1e-5 * (1.0 + x.abs());
            work.get_mut(name).unwrap().data_mut()[i] = x + h;
            let up = eval(&work);
            work.get_mut(name).unwrap().data_mut()[i] = x - h;
            let down = eval(&work);
            work.get_mut(name).unwrap().data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[name].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > max_rel {
                max_rel = rel;
            }
            compared += 1;
        }
    }
    CheckResult { max_rel, compared }
}

/// Runs [`check_store`] on `INSTANCES` fresh U(-2, 2) draws of `store`.
pub fn check_instances<F>(template: &ParamStore<f64>, coords: usize, seed: u64, f: F) -> CheckResult
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> swinfuse::Result<Var<'g, f64>>,
{
    check_draws(
        |r| {
            let mut store = template.clone();
            randomize(&mut store, r);
            store
        },
        coords,
        seed,
        f,
    )
}

/// Runs [`check_store`] on `INSTANCES` stores produced by `draw`.
pub fn check_draws<D, F>(draw: D, coords: usize, seed: u64, f: F) -> CheckResult
where
    D: Fn(&mut ChaCha8Rng) -> ParamStore<f64>,
    F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> swinfuse::Result<Var<'g, f64>>,
{
    let mut worst = CheckResult { max_rel: 0.0, compared: 0 };
    let mut r = rng(seed);
    for k in 0..INSTANCES {
        let store = draw(&mut r);
        let res = check_store(&store, coords, seed.wrapping_add(k as u64), &f);
        worst.max_rel = worst.max_rel.max(res.max_rel);
        worst.compared += res.compared;
    }
    worst
}

/// Store holding plain input tensors under the given names.
pub fn inputs(entries: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape) in entries {
        s.insert(*name, Tensor::zeros(shape));
    }
    s
}
