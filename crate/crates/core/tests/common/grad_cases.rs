//! Gradient-check cases shared by the gradient tests and the acceptance run.

use rand_chacha::ChaCha8Rng;

use super::{check_draws, check_instances, inputs, probe, rng, uniform, CheckResult};
use swinfuse::config::FuseMode;
use swinfuse::decoder::{decoder_forward, DecoderConfig};
use swinfuse::dim::{declare_attention, dim_forward, mha_cross, DimConfig};
use swinfuse::encoder::{encoder_forward, window_attention, EncoderConfig};
use swinfuse::layers::ParamBuilder;
use swinfuse::losses::{
    feature_jsd, jsd, kde_bandwidth, kde_density, loss_contrast, loss_inpaint, loss_rot, loss_segmentation,
};
use swinfuse::volume::{Geometry, TokenGrid};
use swinfuse::{Graph, ParamStore, Tensor, Var};

fn x<'g>(g: &'g Graph<f64>, s: &ParamStore<f64>, name: &str) -> Var<'g, f64> {
    g.param(s, name).unwrap()
}

pub fn matmul() -> CheckResult {
    let s = inputs(&[("a", &[3, 4]), ("b", &[4, 5])]);
    check_instances(&s, 8, 1, |g, s| probe(x(g, s, "a").matmul(x(g, s, "b"))?, 1))
}

pub fn batched_transposed_matmul() -> CheckResult {
    let s = inputs(&[("a", &[2, 3, 4]), ("b", &[2, 5, 3])]);
    check_instances(&s, 8, 2, |g, s| probe(x(g, s, "a").matmul_t(x(g, s, "b"), true, true)?, 2))
}

pub fn softmax() -> CheckResult {
    let s = inputs(&[("a", &[3, 6])]);
    check_instances(&s, 10, 3, |g, s| probe(x(g, s, "a").softmax(None)?, 3))
}

pub fn masked_log_softmax() -> CheckResult {
    let s = inputs(&[("a", &[3, 6])]);
    let mask: std::rc::Rc<[bool]> = (0..18).map(|k| k % 4 != 1).collect();
    check_instances(&s, 10, 4, move |g, s| probe(x(g, s, "a").log_softmax(Some(mask.clone()))?, 4))
}

pub fn layer_norm() -> CheckResult {
    let s = inputs(&[("a", &[4, 6]), ("g", &[6]), ("b", &[6])]);
    check_instances(&s, 8, 5, |g, s| probe(x(g, s, "a").layer_norm(x(g, s, "g"), x(g, s, "b"), 1e-5)?, 5))
}

pub fn gelu() -> CheckResult {
    let s = inputs(&[("a", &[24])]);
    check_instances(&s, 12, 6, |g, s| probe(x(g, s, "a").gelu()?, 6))
}

pub fn cross_attention() -> CheckResult {
    let mut pb = ParamBuilder::new();
    declare_attention(&mut pb, "att", 4);
    let mut s: ParamStore<f64> = pb.build(&mut rng(0));
    s.insert("q_in", Tensor::zeros(&[5, 4]));
    s.insert("kv_in", Tensor::zeros(&[5, 4]));
    check_instances(&s, 4, 7, |g, s| {
        let (out, _) = mha_cross(g, s, "att", 2, x(g, s, "q_in"), x(g, s, "kv_in"), 1e-5)?;
        probe(out, 7)
    })
}

pub fn shifted_window_attention() -> CheckResult {
    let cfg =
        EncoderConfig { embed_dim: 4, stages: 1, window: 2, depth: 2, heads: vec![2], mlp_ratio: 2, ln_eps: 1e-5 };
    let mut pb = ParamBuilder::new();
    swinfuse::encoder::declare_params(&mut pb, &cfg, 4);
    let mut s: ParamStore<f64> = pb.build(&mut rng(1));
    s.insert("tok", Tensor::zeros(&[64, 4]));
    check_instances(&s, 3, 8, |g, s| {
        let (out, _) = window_attention(g, s, "enc.s0.b1.attn", x(g, s, "tok"), 4, 2, 1, 2)?;
        probe(out, 8)
    })
}

pub fn fusion_module() -> CheckResult {
    let cfg = DimConfig { embed_dim: 4, heads: vec![1, 2], fuse: FuseMode::Mean, ln_eps: 1e-5 };
    let mut pb = ParamBuilder::new();
    swinfuse::dim::declare_params(&mut pb, &cfg);
    let mut s: ParamStore<f64> = pb.build(&mut rng(2));
    s.insert("p1", Tensor::zeros(&[8, 4]));
    s.insert("p2", Tensor::zeros(&[8, 4]));
    let geometry = Geometry::new(4, 2).unwrap();
    check_instances(&s, 3, 9, move |g, s| {
        let a = TokenGrid { tokens: x(g, s, "p1"), geometry };
        let b = TokenGrid { tokens: x(g, s, "p2"), geometry };
        probe(dim_forward(g, s, &cfg, &a, &b)?.fused.tokens, 9)
    })
}

/// Weights come from the model initializer and only the tokens are drawn from
/// U(-2, 2): with every weight in U(-2, 2) the stacked blocks reach outputs
/// near 1e5 and central differences lose the digits needed for 1e-4.
pub fn encoder_decoder() -> CheckResult {
    let enc =
        EncoderConfig { embed_dim: 4, stages: 2, window: 2, depth: 2, heads: vec![1, 2], mlp_ratio: 2, ln_eps: 1e-5 };
    let dec = DecoderConfig { embed_dim: 4, stages: 2, patch: 2, n_classes: 2 };
    let mut pb = ParamBuilder::new();
    swinfuse::encoder::declare_params(&mut pb, &enc, 4);
    swinfuse::decoder::declare_params(&mut pb, &dec);
    let image: Vec<f32> = (0..512).map(|i| ((i * 37) % 11) as f32 / 10.0).collect();
    let draw = |r: &mut ChaCha8Rng| {
        let mut s: ParamStore<f64> = pb.build(r);
        s.insert("tok", uniform(r, &[64, 4], -2.0, 2.0));
        s
    };
    check_draws(draw, 2, 10, |g, s| {
        let feats = encoder_forward(g, s, &enc, x(g, s, "tok"), 4)?;
        probe(decoder_forward(g, s, &dec, &feats, &image)?, 10)
    })
}

pub fn inpainting_loss() -> CheckResult {
    let s = inputs(&[("r", &[27])]);
    let target: Vec<f32> = (0..27).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
    let mask: Vec<bool> = (0..27).map(|i| i % 3 != 0).collect();
    check_instances(&s, 12, 11, |g, s| loss_inpaint(x(g, s, "r"), &target, &mask))
}

pub fn rotation_loss() -> CheckResult {
    let s = inputs(&[("l", &[3, 4])]);
    check_instances(&s, 12, 12, |g, s| loss_rot(x(g, s, "l"), &[0, 3, 1]))
}

pub fn contrastive_loss() -> CheckResult {
    let s = inputs(&[("z1", &[3, 5]), ("z2", &[3, 5])]);
    check_instances(&s, 15, 13, |g, s| loss_contrast(x(g, s, "z1"), x(g, s, "z2"), 0.5))
}

pub fn feature_jsd_loss() -> CheckResult {
    let s = inputs(&[("f1", &[6, 3]), ("f2", &[6, 3])]);
    check_instances(&s, 18, 14, |g, s| feature_jsd(x(g, s, "f1"), x(g, s, "f2"), 64, &mut rng(0)))
}

pub fn kernel_density_jsd() -> CheckResult {
    let s = inputs(&[("f1", &[6, 3]), ("f2", &[6, 3])]);
    check_instances(&s, 18, 15, |g, s| {
        let (a, b) = (x(g, s, "f1"), x(g, s, "f2"));
        let eval = a.concat_rows(b)?;
        let d1 = kde_density(a, eval, kde_bandwidth(a)?)?;
        let d2 = kde_density(b, eval, kde_bandwidth(b)?)?;
        jsd(&d1, &d2)
    })
}

pub fn segmentation_loss() -> CheckResult {
    let s = inputs(&[("l", &[10, 3])]);
    let labels = [0u32, 1, 2, 2, 1, 0, 0, 1, 2, 0];
    check_instances(&s, 15, 16, move |g, s| loss_segmentation(x(g, s, "l"), &labels, 1.0, 1.0))
}

pub type Case = (&'static str, fn() -> CheckResult);

pub const ALL: &[Case] = &[
    ("matmul", matmul),
    ("batched transposed matmul", batched_transposed_matmul),
    ("softmax", softmax),
    ("masked log_softmax", masked_log_softmax),
    ("layer_norm", layer_norm),
    ("gelu", gelu),
    ("cross attention", cross_attention),
    ("shifted window attention", shifted_window_attention),
    ("fusion module", fusion_module),
    ("encoder and decoder", encoder_decoder),
    ("inpainting loss", inpainting_loss),
    ("rotation loss", rotation_loss),
    ("contrastive loss", contrastive_loss),
    ("feature JSD", feature_jsd_loss),
    ("JSD of kernel densities", kernel_density_jsd),
    ("segmentation loss", segmentation_loss),
];
