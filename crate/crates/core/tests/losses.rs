//! Proxy losses, kernel density estimate, Jensen-Shannon term and total.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinfuse::losses::{
    jsd, jsd_discrete, kde_bandwidth, kde_density, loss_contrast, loss_inpaint, loss_rot, total_loss, total_loss_var,
    LossParts, KL_FLOOR,
};
use swinfuse::{Error, Graph, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn jsd_oracle(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| (x / s).max(KL_FLOOR)).collect::<Vec<_>>()
    };
    let (p, q) = (norm(a), norm(b));
    let mut total = 0.0;
    for i in 0..p.len() {
        let m = 0.5 * (p[i] + q[i]);
        total += 0.5 * p[i] * (p[i] / m).ln() + 0.5 * q[i] * (q[i] / m).ln();
    }
    total
}

fn jsd_of(a: &[f64], b: &[f64]) -> f64 {
    let g = Graph::new();
    let n = a.len();
    jsd_discrete(g.leaf(t(&[n], a)), g.leaf(t(&[n], b))).unwrap().item()
}

#[test]
fn inpaint_examples() {
    let g = Graph::new();
    let target: Vec<f32> = (0..27).map(|i| (i as f32 * 0.7).sin()).collect();
    let mask: Vec<bool> = (0..27).map(|i| i % 3 == 0).collect();
    let same = g.leaf(Tensor::from_fn(&[27], |i| target[i] as f64));
    assert_eq!(loss_inpaint(same, &target, &mask).unwrap().item(), 0.0);
    let shifted = g.leaf(Tensor::from_fn(&[27], |i| target[i] as f64 + 1.0));
    assert!((loss_inpaint(shifted, &target, &mask).unwrap().item() - 1.0).abs() < 1e-6);
    assert!(loss_inpaint(same, &target, &[false; 27]).is_err());
}

#[test]
fn inpaint_matches_masked_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = 64;
        let target: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        mask[0] = true;
        let recon: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (mut sum, mut count) = (0.0, 0);
        for i in 0..n {
            if mask[i] {
                sum += (recon[i] - target[i] as f64).abs();
                count += 1;
            }
        }
        let g = Graph::new();
        let got = loss_inpaint(g.leaf(t(&[n], &recon)), &target, &mask).unwrap().item();
        assert!((got - sum / count as f64).abs() < 1e-9);
    }
}

#[test]
fn rotation_examples() {
    let g = Graph::new();
    let uniform: f64 = loss_rot(g.leaf(Tensor::zeros(&[3, 4])), &[0, 2, 3]).unwrap().item();
    assert!((uniform - 4f64.ln()).abs() < 1e-9);
    let sure = loss_rot(g.leaf(t(&[1, 4], &[0.0, 1e4, 0.0, 0.0])), &[1]).unwrap().item();
    assert!(sure.abs() < 1e-12);
    assert!(loss_rot(g.leaf(Tensor::zeros(&[1, 4])), &[4]).is_err());
}

#[test]
fn rotation_matches_log_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = 5;
    let logits: Vec<f64> = (0..4 * b).map(|_| rng.random_range(-3.0..3.0)).collect();
    let labels: Vec<u8> = (0..b).map(|_| rng.random_range(0..4)).collect();
    let want: f64 = (0..b)
        .map(|i| {
            let row = &logits[i * 4..i * 4 + 4];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[labels[i] as usize].exp() / z).ln()
        })
        .sum::<f64>()
        / b as f64;
    let g = Graph::new();
    let got = loss_rot(g.leaf(t(&[b, 4], &logits)), &labels).unwrap().item();
    assert!((got - want).abs() < 1e-9);
}

fn basis(rows: &[usize], dim: usize) -> Tensor<f64> {
    Tensor::from_fn(&[rows.len(), dim], |i| if rows[i / dim] == i % dim { 1.0 } else { 0.0 })
}

#[test]
fn contrast_closed_forms() {
    let g = Graph::new();
    let e = std::f64::consts::E;
    // matching orthonormal views: positive similarity 1, two negatives at 0
    let z = g.leaf(basis(&[0, 1], 4));
    let got = loss_contrast(z, z, 1.0).unwrap().item();
    assert!((got + (e / (e + 2.0)).ln()).abs() < 1e-9);
    // four mutually orthogonal views: every similarity is 0
    let got = loss_contrast(g.leaf(basis(&[0, 1], 4)), g.leaf(basis(&[2, 3], 4)), 1.0).unwrap().item();
    assert!((got - 3f64.ln()).abs() < 1e-9);
}

#[test]
fn contrast_vanishes_at_low_temperature() {
    let g = Graph::new();
    let z = g.leaf(basis(&[0, 1, 2], 3));
    assert!(loss_contrast(z, z, 0.01).unwrap().item() < 1e-3);
    assert!(loss_contrast(g.leaf(basis(&[0], 3)), g.leaf(basis(&[1], 3)), 0.1).is_err());
}

#[test]
fn contrast_is_symmetric_in_its_views() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let unit = |rng: &mut ChaCha8Rng| {
        let mut v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        for row in v.chunks_mut(4) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        t(&[3, 4], &v)
    };
    for _ in 0..10 {
        let (a, b) = (unit(&mut rng), unit(&mut rng));
        let g = Graph::new();
        let ab = loss_contrast(g.leaf(a.clone()), g.leaf(b.clone()), 0.1).unwrap().item();
        let ba = loss_contrast(g.leaf(b), g.leaf(a), 0.1).unwrap().item();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab >= 0.0);
    }
}

#[test]
fn bandwidth_examples() {
    let g = Graph::new();
    let s = kde_bandwidth(g.leaf(t(&[3, 1], &[0.0, 1.0, 3.0]))).unwrap().item();
    assert!((s - 4.0 / 3.0).abs() < 1e-15);
    let s = kde_bandwidth(g.leaf(t(&[2, 2], &[1.0, 1.0, 4.0, 5.0]))).unwrap().item();
    assert!((s - 5.0).abs() < 1e-15);
    let s = kde_bandwidth(g.leaf(t(&[3, 1], &[0.0, 2.5, 7.5]))).unwrap().item();
    assert!((s - 2.5 * 4.0 / 3.0).abs() < 1e-12);
    let permuted = kde_bandwidth(g.leaf(t(&[3, 1], &[7.5, 0.0, 2.5]))).unwrap().item();
    assert_eq!(s, permuted);
    assert!(matches!(kde_bandwidth(g.leaf(Tensor::full(&[3, 2], 1.0))), Err(Error::DegenerateBandwidth)));
}

#[test]
fn density_examples() {
    let g = Graph::new();
    let sample = g.leaf(t(&[1, 2], &[0.5, -1.0]));
    let sigma = g.leaf(t(&[1], &[0.7]));
    let at = |p: [f64; 2]| kde_density(sample, g.leaf(t(&[1, 2], &p)), sigma).unwrap().values.item();
    assert_eq!(at([0.5, -1.0]), 1.0);
    let r = 0.7 * (2.0 * LN_2).sqrt();
    assert!((at([0.5 + r, -1.0]) - 0.5).abs() < 1e-12);
    let mut prev = f64::INFINITY;
    for k in 0..50 {
        let v = at([0.5 + 0.1 * k as f64, -1.0]);
        assert!(v <= prev);
        prev = v;
    }
}

#[test]
fn jsd_examples() {
    assert!(jsd_of(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).abs() <= 1e-9);
    assert!((jsd_of(&[1.0, 0.0], &[0.0, 1.0]) - LN_2).abs() <= 1e-6);
    let want = jsd_oracle(&[0.5, 0.5], &[0.9, 0.1]);
    assert!((jsd_of(&[0.5, 0.5], &[0.9, 0.1]) - want).abs() <= 1e-9);
}

#[test]
fn jsd_is_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let n = rng.random_range(2..12);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0) * rng.random_range(0..2) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        if a.iter().sum::<f64>() == 0.0 {
            continue;
        }
        let (ab, ba) = (jsd_of(&a, &b), jsd_of(&b, &a));
        assert!((0.0..=LN_2 + 1e-9).contains(&ab), "{ab}");
        assert!((ab - ba).abs() <= 1e-15);
        assert!((ab - jsd_oracle(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn jsd_needs_shared_evaluation_points() {
    let g = Graph::new();
    let x = g.leaf(t(&[2, 1], &[0.0, 1.0]));
    let sigma = g.leaf(t(&[1], &[1.0]));
    let d1 = kde_density(x, g.leaf(t(&[2, 1], &[0.0, 1.0])), sigma).unwrap();
    let d2 = kde_density(x, g.leaf(t(&[2, 1], &[0.0, 2.0])), sigma).unwrap();
    assert!(matches!(jsd(&d1, &d2), Err(Error::Contract(_))));
    assert!(jsd(&d1, &d1).unwrap().item().abs() < 1e-12);
}

#[test]
fn total_composition() {
    let ones = LossParts { inpaint: 1.0, contrast: 1.0, rot: 1.0, jsd: 0.0 };
    assert_eq!(total_loss(ones, -1.0).unwrap().total, 3.0);
    let p = LossParts { inpaint: 0.5, contrast: 0.2, rot: 0.3, jsd: 0.1 };
    let minus = total_loss(p, -1.0).unwrap();
    let plus = total_loss(p, 1.0).unwrap();
    assert!((minus.total - 0.9).abs() < 1e-15);
    assert!((plus.total - 1.1).abs() < 1e-15);
    assert_eq!(minus.total, minus.inpaint + minus.contrast + minus.rot - minus.jsd);
    assert_eq!(plus.total, plus.inpaint + plus.contrast + plus.rot + plus.jsd);
    assert_eq!(
        (minus.inpaint, minus.contrast, minus.rot, minus.jsd),
        (plus.inpaint, plus.contrast, plus.rot, plus.jsd)
    );
    assert!((plus.total - minus.total - 2.0 * p.jsd).abs() < 1e-15);
    assert!(matches!(total_loss(LossParts { jsd: f64::NAN, ..p }, -1.0), Err(Error::NonFinite { .. })));

    let g = Graph::new();
    let s = |v: f64| g.leaf(t(&[1], &[v]));
    let var = total_loss_var(s(0.5), s(0.2), s(0.3), s(0.1), -1.0).unwrap().item();
    assert_eq!(var, minus.total);
}
