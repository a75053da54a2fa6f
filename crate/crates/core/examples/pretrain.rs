//! Self-supervised pre-training on synthetic CT-like/MR-like pairs.
//!
//! ```text
//! cargo run --example pretrain -- [steps] [out_dir]
//! ```
//! Writes `pretrain.sfck` and `pretrain.csv` into `out_dir` (default: a
//! temporary directory) and prints the first and last loss rows.

use std::path::PathBuf;
use std::time::Instant;

use swinfuse::train::{phantom_options, pretrain_loop, save_checkpoint, synthetic_pairs};
use swinfuse::Config;

fn main() -> swinfuse::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("swinfuse-pretrain"));
    std::fs::create_dir_all(&out).map_err(|e| swinfuse::Error::Io { path: out.clone(), source: e })?;

    let cfg = Config { total_steps: steps, ..Config::default() };
    let data = synthetic_pairs(0, 8, [24, 24, 24], cfg.n_classes, 0, &phantom_options(&cfg))?;
    println!("{} volumes, {} steps, batch {}", data.len(), steps, cfg.batch_size);

    let t0 = Instant::now();
    let outcome = pretrain_loop(&cfg, &data, None)?;
    let secs = t0.elapsed().as_secs_f64();
    for e in outcome.log.iter().take(3).chain(outcome.log.iter().rev().take(3).rev()) {
        let r = e.report;
        println!(
            "step {:4}  lr {:.2e}  inpaint {:.4}  contrast {:.4}  rot {:.4}  jsd {:.4}  total {:.4}",
            e.step, e.lr, r.inpaint, r.contrast, r.rot, r.jsd, r.total
        );
    }
    println!("{:.2} s/step", secs / steps as f64);

    save_checkpoint(out.join("pretrain.sfck"), &outcome.params, &cfg, Some(&outcome.state))?;
    outcome.write_log(out.join("pretrain.csv"))?;
    println!("wrote {}", out.display());
    Ok(())
}
