//! Reverse-mode gradients of a cross-attention block against central
//! finite differences, in 64-bit.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinfuse::dim::{declare_attention, mha_cross};
use swinfuse::layers::ParamBuilder;
use swinfuse::{Graph, ParamStore, Tensor};

fn loss(g: &Graph<f64>, s: &ParamStore<f64>) -> swinfuse::Result<f64> {
    Ok(forward(g, s)?.item())
}

fn forward<'g>(g: &'g Graph<f64>, s: &ParamStore<f64>) -> swinfuse::Result<swinfuse::Var<'g, f64>> {
    let (out, _) = mha_cross(g, s, "att", 2, g.param(s, "q_in")?, g.param(s, "kv_in")?, 1e-5)?;
    let w = g.leaf(Tensor::from_fn(&out.shape(), |i| ((i * 7) % 5) as f64 - 2.0));
    out.mul(w)?.sum()
}

fn main() -> swinfuse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pb = ParamBuilder::new();
    declare_attention(&mut pb, "att", 4);
    let mut store: ParamStore<f64> = pb.build(&mut rng);
    store.insert("q_in", Tensor::from_fn(&[5, 4], |_| rng.random_range(-2.0..2.0)));
    store.insert("kv_in", Tensor::from_fn(&[5, 4], |_| rng.random_range(-2.0..2.0)));

    let g = Graph::new();
    let grads = g.backward(forward(&g, &store)?, &store)?;
    println!("{:20} {:>8} {:>12}", "tensor", "entries", "max rel err");
    let mut work = store.clone();
    for (name, t) in store.iter() {
        let mut worst = 0.0f64;
        for i in 0..t.len() {
            let x = t.data()[i];
            let h = 1e-5 * (1.0 + x.abs());
            work.get_mut(name).unwrap().data_mut()[i] = x + h;
            let up = loss(&Graph::new(), &work)?;
            work.get_mut(name).unwrap().data_mut()[i] = x - h;
            let down = loss(&Graph::new(), &work)?;
            work.get_mut(name).unwrap().data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[name].data()[i];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3));
        }
        println!("{name:20} {:>8} {worst:>12.2e}", t.len());
    }
    Ok(())
}
