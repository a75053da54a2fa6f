//! Schedule, optimizer, checkpoints, head surgery and the training loops.

use std::collections::BTreeSet;

use swinfuse::model::{init_params, is_backbone, param_names};
use swinfuse::params::Gradient;
use swinfuse::train::{
    adamw_step, checkpoint_from_bytes, checkpoint_to_bytes, kfold, kfold_splits, load_checkpoint, load_for_finetune,
    lr_schedule, pretrain_loop, save_checkpoint, synthetic_pairs, write_loss_csv, AdamState, Checkpoint,
    LOSS_CSV_HEADER,
};
use swinfuse::volume::PhantomOptions;
use swinfuse::{Config, Error, Mode, ParamStore, Tensor};

fn long_run() -> Config {
    Config { total_steps: 3000, ..Config::default() }
}

#[test]
fn schedule_examples() {
    let c = long_run();
    assert_eq!(c.effective_warmup(), 500);
    assert_eq!(lr_schedule(0, &c), 0.0);
    assert_eq!(lr_schedule(500, &c), 4e-4);
    assert!((lr_schedule(1750, &c) - 2e-4).abs() <= 1e-12);
    assert!(lr_schedule(3000, &c).abs() <= 1e-18);
}

#[test]
fn schedule_is_continuous_at_the_warmup_boundary() {
    for c in [long_run(), Config::default()] {
        let w = c.effective_warmup();
        let slope = c.lr / w as f64;
        let peak = lr_schedule(w, &c);
        assert_eq!(peak, c.lr);
        assert!((peak - lr_schedule(w - 1, &c) - slope).abs() < 1e-15);
        assert!(peak - lr_schedule(w + 1, &c) < slope);
    }
}

#[test]
fn short_runs_scale_the_warmup() {
    let c = Config::default();
    assert_eq!(c.total_steps, 500);
    assert_eq!(c.effective_warmup(), 100);
    assert_eq!(lr_schedule(100, &c), c.lr);
}

fn one(name: &str, v: f64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.insert(name, Tensor::from_f64(&[1], &[v]).unwrap());
    p
}

fn grad(name: &str, v: f64) -> Gradient<f64> {
    let mut g = Gradient::new();
    g.insert(name.to_string(), Tensor::from_f64(&[1], &[v]).unwrap());
    g
}

#[test]
fn decay_only_step_scales_parameters() {
    let c = Config { weight_decay: 1e-5, ..Config::default() };
    let mut p = one("w", 3.0);
    let mut st = AdamState::new(&p);
    adamw_step(&mut p, &grad("w", 0.0), &mut st, 0.5, &c).unwrap();
    assert_eq!(p.get("w").unwrap().data()[0], 3.0 * (1.0 - 0.5 * 1e-5));
}

#[test]
fn momentless_adam_is_normalized_sgd() {
    let c = Config { weight_decay: 0.0, beta1: 0.0, beta2: 0.0, ..Config::default() };
    let mut p = one("w", 1.0);
    let mut st = AdamState::new(&p);
    for g in [0.3, -2.0, 5e-3, 7.0] {
        let before = p.get("w").unwrap().data()[0];
        adamw_step(&mut p, &grad("w", g), &mut st, 0.1, &c).unwrap();
        let want = before - 0.1 * g / (g.abs() + c.adam_eps);
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-15);
    }
}

#[test]
fn quadratic_decreases_monotonically() {
    let c = Config::default();
    let mut p = one("w", 5.0);
    let mut st = AdamState::new(&p);
    let loss = |p: &ParamStore<f64>| (p.get("w").unwrap().data()[0] - 1.0).powi(2);
    let mut prev = loss(&p);
    for _ in 0..100 {
        let x = p.get("w").unwrap().data()[0];
        adamw_step(&mut p, &grad("w", 2.0 * (x - 1.0)), &mut st, 0.01, &c).unwrap();
        let now = loss(&p);
        assert!(now < prev);
        prev = now;
    }
}

#[test]
fn nan_gradient_names_the_parameter() {
    let mut p = one("w", 1.0);
    let mut st = AdamState::new(&p);
    match adamw_step(&mut p, &grad("w", f64::NAN), &mut st, 0.1, &Config::default()) {
        Err(Error::NonFinite { term }) => assert!(term.contains('w')),
        other => panic!("{other:?}"),
    }
}

#[test]
fn kfold_partitions() {
    let folds = kfold_splits(10, 5, 7).unwrap();
    assert!(folds.iter().all(|f| f.len() == 2));
    let all: BTreeSet<usize> = folds.iter().flatten().copied().collect();
    assert_eq!(all.len(), 10);
    assert_eq!(folds, kfold_splits(10, 5, 7).unwrap());
    assert!(kfold_splits(3, 5, 0).is_err());
}

#[test]
fn kfold_mean_is_the_fold_average() {
    let cfg = Config { mode: Mode::Finetune, total_steps: 1, batch_size: 1, ..Config::default() };
    let cases: Vec<_> =
        synthetic_pairs(4, 3, [16; 3], 3, 0, &PhantomOptions::default()).unwrap().into_iter().step_by(2).collect();
    let r = kfold(&cfg, &cases, 3, None).unwrap();
    assert_eq!(r.folds.len(), 3);
    let mean = r.folds.iter().map(|f| f.dice).sum::<f64>() / 3.0;
    assert!((r.mean - mean).abs() <= 1e-12);
    assert!(r.folds.iter().all(|f| (0.0..=1.0).contains(&f.dice)));
}

fn sample_checkpoint(cfg: &Config) -> Checkpoint {
    let params = init_params::<f32>(cfg, Mode::Pretrain, 3);
    let mut moments = AdamState::new(&params);
    moments.step = 17;
    for (_, t) in moments.m.iter_mut() {
        t.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = (i as f32).sin());
    }
    Checkpoint { fingerprint: cfg.fingerprint(), params, moments: Some(moments) }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let cfg = Config::default();
    let ck = sample_checkpoint(&cfg);
    let bytes = checkpoint_to_bytes(&ck).unwrap();
    let back = checkpoint_from_bytes(&bytes).unwrap();
    let bits = |s: &ParamStore<f32>| {
        s.iter().map(|(n, t)| (n.clone(), t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())).collect::<Vec<_>>()
    };
    assert_eq!(bits(&back.params), bits(&ck.params));
    assert_eq!(back, ck);
    assert_eq!(checkpoint_to_bytes(&back).unwrap(), bytes);

    let bare = Checkpoint { moments: None, ..ck };
    assert_eq!(checkpoint_from_bytes(&checkpoint_to_bytes(&bare).unwrap()).unwrap(), bare);
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let mut params = ParamStore::new();
    params.insert("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5));
    params.insert("b", Tensor::from_fn(&[4], |i| -(i as f32)));
    let moments = Some(AdamState::new(&params));
    let bytes = checkpoint_to_bytes(&Checkpoint { fingerprint: [7; 32], params, moments }).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    for cut in 0..bytes.len() {
        match checkpoint_from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("cut at {cut}: {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn fingerprint_mismatch_needs_force() {
    let cfg = Config::default();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.sfck");
    let ck = sample_checkpoint(&cfg);
    save_checkpoint(&path, &ck.params, &cfg, None).unwrap();
    assert_eq!(load_checkpoint(&path, &cfg, false).unwrap().params, ck.params);

    let other = Config { embed_dim: 16, ..cfg.clone() };
    assert!(matches!(load_checkpoint(&path, &other, false), Err(Error::Contract(_))));
    assert!(load_checkpoint(&path, &other, true).is_ok());

    // optimizer settings are not part of the architecture
    let tuned = Config { lr: 1e-3, seed: 9, ..cfg };
    assert!(load_checkpoint(&path, &tuned, false).is_ok());
}

#[test]
fn head_surgery_keeps_exactly_the_backbone() {
    let cfg = Config::default();
    let pre = init_params::<f32>(&cfg, Mode::Pretrain, 1);
    let (store, report) = load_for_finetune(&pre, &cfg, 2);

    let pre_names: BTreeSet<String> = pre.names().cloned().collect();
    let heads: BTreeSet<String> = pre_names.iter().filter(|n| n.starts_with("heads.")).cloned().collect();
    let backbone: BTreeSet<String> = pre_names
        .iter()
        .filter(|n| n.starts_with("embed.") || n.starts_with("dim.") || n.starts_with("enc."))
        .cloned()
        .collect();
    assert!(!heads.is_empty() && !backbone.is_empty());
    assert_eq!(report.dropped, heads);
    assert_eq!(report.loaded, backbone);
    assert_eq!(&report.loaded | &report.dropped, pre_names);

    let ft_names: BTreeSet<String> = store.names().cloned().collect();
    assert_eq!(ft_names, param_names(&cfg, Mode::Finetune));
    assert_eq!(&ft_names - &report.loaded, report.fresh);
    assert!(report.fresh.iter().all(|n| n.starts_with("dec.")));
    for n in &report.loaded {
        assert!(is_backbone(n));
        assert_eq!(store.get(n), pre.get(n));
    }
}

#[test]
fn pretraining_is_complete_and_deterministic() {
    let cfg = Config { total_steps: 3, ..Config::default() };
    let data = synthetic_pairs(0, 1, [16; 3], 3, 0, &PhantomOptions::default()).unwrap();
    let a = pretrain_loop(&cfg, &data, None).unwrap();
    let b = pretrain_loop(&cfg, &data, None).unwrap();
    let names: BTreeSet<String> = a.params.names().cloned().collect();
    assert_eq!(names, param_names(&cfg, Mode::Pretrain));
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);

    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &a.log).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOSS_CSV_HEADER));
    assert_eq!(lines.count(), 3);
}
