//! Cross-attention fusion module and attention export.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinfuse::config::FuseMode;
use swinfuse::dim::{
    attention_relevance, declare_attention, declare_params, dim_forward, export_attention, mha_cross, DimConfig,
};
use swinfuse::layers::ParamBuilder;
use swinfuse::volume::{read_volume, write_volume, Geometry, TokenGrid};
use swinfuse::{Graph, ParamStore, Tensor};

fn store_for(cfg: &DimConfig, seed: u64) -> ParamStore<f64> {
    let mut pb = ParamBuilder::new();
    declare_params(&mut pb, cfg);
    let mut store: ParamStore<f64> = pb.build(&mut ChaCha8Rng::seed_from_u64(seed));
    // non-trivial norms and biases
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    store
}

fn tied(cfg: &DimConfig, seed: u64) -> ParamStore<f64> {
    let mut store = store_for(cfg, seed);
    let names: Vec<String> = store.names().filter(|n| n.starts_with("dim.s1.")).cloned().collect();
    for n in names {
        let t = store.get(&n).unwrap().clone();
        store.insert(n.replacen("dim.s1.", "dim.s2.", 1), t);
    }
    store
}

fn grid<'g>(g: &'g Graph<f64>, t: Tensor<f64>, geometry: Geometry) -> TokenGrid<'g, f64> {
    TokenGrid { tokens: g.leaf(t), geometry }
}

fn random_tokens(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(&[t, c], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn paper_width_shapes() {
    let cfg = DimConfig { embed_dim: 48, heads: vec![3, 6, 12, 24], fuse: FuseMode::Mean, ln_eps: 1e-5 };
    let store = store_for(&cfg, 0);
    let geom = Geometry::new(4, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Graph::new();
    let a = grid(&g, random_tokens(&mut rng, 8, 48), geom);
    let b = grid(&g, random_tokens(&mut rng, 8, 48), geom);
    let out = dim_forward(&g, &store, &cfg, &a, &b).unwrap();
    assert_eq!(out.fused.tokens.shape(), vec![8, 48]);
    for s in 0..2 {
        assert_eq!(out.stream_features[s].shape(), vec![8, 384]);
        let heads: Vec<usize> = out.attention[s].iter().map(|a| a.shape()[0]).collect();
        assert_eq!(heads, vec![3, 6, 12, 24]);
        for a in &out.attention[s] {
            assert_eq!(a.shape()[1..], [8, 8]);
        }
    }
}

#[test]
fn random_configs_preserve_shape_and_normalize_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..10 {
        let c = [2, 4, 6, 8][rng.random_range(0..4)];
        let layers = rng.random_range(1..=3);
        let heads: Vec<usize> = (0..layers).map(|l| [1, 2][rng.random_range(0..2)] << l).collect();
        let cfg = DimConfig { embed_dim: c, heads, fuse: FuseMode::Mean, ln_eps: 1e-5 };
        let side = [2, 4][rng.random_range(0..2)];
        let geom = Geometry::new(side, 1).unwrap();
        let t = geom.tokens();
        let store = store_for(&cfg, k);
        let g = Graph::new();
        let a = grid(&g, random_tokens(&mut rng, t, c), geom);
        let b = grid(&g, random_tokens(&mut rng, t, c), geom);
        let out = dim_forward(&g, &store, &cfg, &a, &b).unwrap();
        assert_eq!(out.fused.tokens.shape(), vec![t, c]);
        for maps in &out.attention {
            for m in maps {
                for row in m.value().data().chunks(t) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn tied_streams_are_symmetric_under_swap() {
    for fuse in [FuseMode::Mean, FuseMode::Sum] {
        let cfg = DimConfig { embed_dim: 4, heads: vec![1, 2, 4], fuse, ln_eps: 1e-5 };
        let store = tied(&cfg, 3);
        let geom = Geometry::new(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (ta, tb) = (random_tokens(&mut rng, 8, 4), random_tokens(&mut rng, 8, 4));
        let g = Graph::new();
        let ab = dim_forward(&g, &store, &cfg, &grid(&g, ta.clone(), geom), &grid(&g, tb.clone(), geom)).unwrap();
        let ba = dim_forward(&g, &store, &cfg, &grid(&g, tb, geom), &grid(&g, ta, geom)).unwrap();
        assert_eq!(ab.fused.tokens.value().data(), ba.fused.tokens.value().data());
    }
}

#[test]
fn permutation_equivariance() {
    let cfg = DimConfig { embed_dim: 4, heads: vec![1, 2], fuse: FuseMode::Mean, ln_eps: 1e-5 };
    let store = store_for(&cfg, 5);
    let geom = Geometry::new(4, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let (ta, tb) = (random_tokens(&mut rng, 8, 4), random_tokens(&mut rng, 8, 4));
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        let permute = |t: &Tensor<f64>| Tensor::from_fn(&[8, 4], |i| t.data()[perm[i / 4] * 4 + i % 4]);
        let g = Graph::new();
        let base = dim_forward(&g, &store, &cfg, &grid(&g, ta.clone(), geom), &grid(&g, tb.clone(), geom)).unwrap();
        let moved =
            dim_forward(&g, &store, &cfg, &grid(&g, permute(&ta), geom), &grid(&g, permute(&tb), geom)).unwrap();
        let expect = permute(&base.fused.tokens.value());
        for (x, y) in moved.fused.tokens.value().data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_inputs_with_zero_biases_fuse_to_zero() {
    let cfg = DimConfig { embed_dim: 4, heads: vec![1, 2], fuse: FuseMode::Mean, ln_eps: 1e-5 };
    let mut store = store_for(&cfg, 7);
    for (name, t) in store.iter_mut() {
        if name.ends_with(".bias") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let geom = Geometry::new(4, 2).unwrap();
    let g = Graph::new();
    let z = || grid(&g, Tensor::zeros(&[8, 4]), geom);
    let out = dim_forward(&g, &store, &cfg, &z(), &z()).unwrap();
    assert!(out.fused.tokens.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_projections_give_self_attention() {
    let d = 4;
    let mut pb = ParamBuilder::new();
    declare_attention(&mut pb, "a", d);
    let mut store: ParamStore<f64> = pb.build(&mut ChaCha8Rng::seed_from_u64(0));
    let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    for p in ["q", "k", "v", "o"] {
        store.insert(format!("a.{p}.weight"), eye.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tokens(&mut rng, 5, d);
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let (out, _) = mha_cross(&g, &store, "a", 1, xv, xv, 1e-5).unwrap();

    // oracle: x + softmax(n n^T / sqrt(d)) n with n = layer_norm(x)
    let n: Vec<Vec<f64>> = x
        .data()
        .chunks(d)
        .map(|r| {
            let m = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64;
            r.iter().map(|v| (v - m) / (var + 1e-5).sqrt()).collect()
        })
        .collect();
    for i in 0..5 {
        let s: Vec<f64> = (0..5).map(|j| (0..d).map(|c| n[i][c] * n[j][c]).sum::<f64>() / (d as f64).sqrt()).collect();
        let mx = s.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..d {
            let mix: f64 = (0..5).map(|j| e[j] / z * n[j][c]).sum();
            let want = x.data()[i * d + c] + mix;
            assert!((out.value().data()[i * d + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn single_token_weight_is_one() {
    let mut pb = ParamBuilder::new();
    declare_attention(&mut pb, "a", 4);
    let store: ParamStore<f64> = pb.build(&mut ChaCha8Rng::seed_from_u64(1));
    let g = Graph::new();
    let q = g.leaf(Tensor::from_fn(&[1, 4], |i| i as f64));
    let kv = g.leaf(Tensor::from_fn(&[1, 4], |i| -(i as f64)));
    let (_, attn) = mha_cross(&g, &store, "a", 2, q, kv, 1e-5).unwrap();
    assert_eq!(attn.value().data(), &[1.0, 1.0]);
}

#[test]
fn relevance_examples() {
    let geom = Geometry::new(4, 2).unwrap();
    let uniform = Tensor::<f64>::full(&[1, 8, 8], 1.0 / 8.0);
    let v = attention_relevance(&uniform, 0, geom).unwrap();
    assert!(v.voxels.iter().all(|&x| x == 1.0));

    let mut peaked = vec![0.0; 64];
    for i in 0..8 {
        peaked[i * 8] = 1.0;
    }
    let v = attention_relevance(&Tensor::new(vec![1, 8, 8], peaked).unwrap(), 0, geom).unwrap();
    let (arg, _) = v.voxels.iter().enumerate().fold((0, f32::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
    assert_eq!(geom.token_of_voxel(arg % 4, (arg / 4) % 4, arg / 16), 0);
    assert!(attention_relevance(&uniform, 1, geom).is_err());
}

#[test]
fn exported_map_round_trips() {
    let cfg = DimConfig { embed_dim: 4, heads: vec![1, 2], fuse: FuseMode::Mean, ln_eps: 1e-5 };
    let store = store_for(&cfg, 9);
    let geom = Geometry::new(4, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = Graph::new();
    let a = grid(&g, random_tokens(&mut rng, 8, 4), geom);
    let b = grid(&g, random_tokens(&mut rng, 8, 4), geom);
    let out = dim_forward(&g, &store, &cfg, &a, &b).unwrap();
    let map = export_attention(&out, 1, 1, 1, geom).unwrap();
    assert_eq!(map.dims, [4, 4, 4]);
    assert!(map.voxels.contains(&1.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.sfv");
    write_volume(&map, &path).unwrap();
    assert_eq!(read_volume(&path).unwrap(), map);
    assert!(export_attention(&out, 2, 0, 0, geom).is_err());
    assert!(export_attention(&out, 0, 2, 0, geom).is_err());
}
