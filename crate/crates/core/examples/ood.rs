//! Out-of-distribution experiment: fine-tune on a CT-like region, test on
//! four MR-like regions, DIM-pretrained model against a plain baseline.
//!
//! ```text
//! cargo run --example ood -- [seed] [out.csv]
//! ```

use std::time::Instant;

use swinfuse::eval::{emit_report, ood_experiment, OodSetup};
use swinfuse::{Config, Mode};

fn main() -> swinfuse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("swinfuse-ood.csv").display().to_string());

    let cfg = Config { mode: Mode::Finetune, seed, ..Config::default() };
    let setup = OodSetup::desk(seed);
    let t0 = Instant::now();
    let reports = ood_experiment(&cfg, &setup, seed, None)?;
    for r in &reports {
        println!(
            "{} -> {}: pretrained {:.4}  baseline {:.4}  delta {:+.4}",
            r.ft_region, r.test_region, r.variant_dice, r.baseline_dice, r.delta
        );
    }
    let wins = reports.iter().filter(|r| r.delta > 0.0).count();
    println!("{wins} of {} test regions improved ({:.0} s)", reports.len(), t0.elapsed().as_secs_f64());
    emit_report(&reports, &out)?;
    println!("wrote {out}");
    Ok(())
}
