//! Kernel density estimates of two point clouds and their Jensen-Shannon
//! divergence as the clouds move apart.
//!
//! ```text
//! cargo run --example kde_jsd
//! ```
//! The divergence starts near 0 for overlapping clouds and approaches ln 2
//! once their supports separate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use swinfuse::losses::{jsd, kde_bandwidth, kde_density};
use swinfuse::{Graph, Tensor};

fn cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize, shift: f64) -> Tensor<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(&[n, dim], |i| normal.sample(rng) + if i % dim == 0 { shift } else { 0.0 })
}

fn main() -> swinfuse::Result<()> {
    let (n, dim) = (64, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = cloud(&mut rng, n, dim, 0.0);
    println!("{:>6}  {:>9}  {:>9}  {:>8}", "shift", "sigma_a", "sigma_b", "jsd");
    for shift in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let g = Graph::new();
        let a = g.leaf(base.clone());
        let b = g.leaf(cloud(&mut rng, n, dim, shift));
        let (sa, sb) = (kde_bandwidth(a)?, kde_bandwidth(b)?);
        let points = a.concat_rows(b)?;
        let d = jsd(&kde_density(a, points, sa)?, &kde_density(b, points, sb)?)?;
        println!("{shift:6.1}  {:9.4}  {:9.4}  {:8.5}", sa.item(), sb.item(), d.item());
    }
    println!("ln 2 = {:.5}", std::f64::consts::LN_2);
    Ok(())
}
