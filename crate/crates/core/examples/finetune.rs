//! Segmentation fine-tuning on a single labelled phantom, then Dice on it.
//!
//! ```text
//! cargo run --example finetune -- [steps] [lr] [init.sfck]
//! ```
//! Defaults: 300 steps at lr 5e-3, batch 1, no cutouts. With an `init`
//! checkpoint (e.g. from the `pretrain` example) the backbone is loaded and
//! the projection heads are dropped.

use std::time::Instant;

use swinfuse::eval::{evaluate_cases, mean_dice};
use swinfuse::train::{finetune_loop, load_checkpoint, phantom_options, Case};
use swinfuse::volume::{gen_phantom, Modality};
use swinfuse::{Config, Mode};

fn main() -> swinfuse::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5e-3);
    let cfg =
        Config { mode: Mode::Finetune, total_steps: steps, batch_size: 1, lr, cutout_count: 0, ..Config::default() };
    let init = args.next().map(|p| load_checkpoint(p, &cfg, false)).transpose()?;

    let volume = gen_phantom(0, [16, 16, 16], cfg.n_classes, Modality::CtLike, 0, &phantom_options(&cfg))?;
    let data = vec![Case { id: "phantom0".into(), volume }];

    let t0 = Instant::now();
    let out = finetune_loop(&cfg, init.as_ref().map(|c| &c.params), &data)?;
    if let Some(report) = &out.load {
        println!("loaded {} backbone tensors, dropped {}", report.loaded.len(), report.dropped.len());
    }
    for e in &out.epochs {
        println!("epoch {:2}  step {:4}  loss {:.4}  train dice {:.4}", e.epoch, e.step, e.loss, e.dice);
    }
    let reports = evaluate_cases(&out.params, &cfg, &data)?;
    println!("per-class dice {:?}", reports[0].per_class);
    println!("dice on the training phantom {:.4}", mean_dice(&reports));
    println!("{:.2} s/step", t0.elapsed().as_secs_f64() / steps as f64);
    Ok(())
}
