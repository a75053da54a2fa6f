//! Command-line front end: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime failures,
//! which are reported as a single `error: ...` line on stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::autograd::Graph;
use crate::config::{Config, Mode};
use crate::dim::export_attention;
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate_cases, mean_dice, ood_experiment, write_dice_csv, OodSetup};
use crate::model;
use crate::params::ParamStore;
use crate::train::{
    finetune_loop, kfold, load_checkpoint, load_dataset, phantom_options, pretrain_loop, save_checkpoint, save_dataset,
    synthetic_pairs,
};
use crate::volume::{read_volume, subvolume_at, write_volume, Geometry, Volume};

#[derive(Parser, Debug)]
#[command(name = "swinfuse", version, about = "Multi-modal pre-training and segmentation pipeline")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every random draw; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    /// Load checkpoints whose architecture fingerprint differs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write paired CT-like/MR-like phantoms `case{i}_ct.sfv`, `case{i}_mr.sfv`.
    GenData {
        /// Volume extents `X,Y,Z`.
        #[arg(long, value_parser = parse_dims)]
        dims: [usize; 3],
        /// Number of labelled structures.
        #[arg(long)]
        organs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs.
        #[arg(long, default_value_t = 4)]
        cases: usize,
        /// MR appearance variant.
        #[arg(long, default_value_t = 0)]
        transfer_id: u32,
    },
    /// Self-supervised pre-training.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Segmentation fine-tuning, optionally from a pre-training checkpoint.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train only on volumes of one modality.
        #[arg(long, value_parser = ["ct", "mr"])]
        modality: Option<String>,
    },
    /// K-fold cross-validated fine-tuning.
    Kfold {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Per-fold CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-case Dice of a fine-tuned checkpoint.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Out-of-distribution experiment (fine-tune CT-like, test MR-like).
    Ood {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention relevance map of one fusion layer and head.
    ExportAttn {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        /// Fusion stream (0 or 1).
        #[arg(long, default_value_t = 0)]
        stream: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad extent {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|_| "expected three extents X,Y,Z".to_string())
}

/// Entry point of the binary.
pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn resolve(path: Option<&Path>, global: &Global, mode: Mode) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    cfg.mode = mode;
    cfg.validate()?;
    Ok(cfg)
}

fn echo(cfg: &Config) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(cfg.canonical().as_bytes());
    let _ = out.flush();
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::GenData { dims, organs, out, cases, transfer_id } => {
            let cfg = resolve(None, g, Mode::Pretrain)?;
            let data = synthetic_pairs(cfg.seed, cases, dims, organs, transfer_id, &phantom_options(&cfg))?;
            save_dataset(&out, &data)?;
            println!("wrote {} volumes to {}", data.len(), out.display());
        }
        Command::Pretrain { config, data, out, log } => {
            let cfg = resolve(config.as_deref(), g, Mode::Pretrain)?;
            let cases = load_dataset(&data)?;
            echo(&cfg);
            let outcome = pretrain_loop(&cfg, &cases, None)?;
            save_checkpoint(&out, &outcome.params, &cfg, Some(&outcome.state))?;
            if let Some(path) = log {
                outcome.write_log(path)?;
            }
            if let Some(last) = outcome.log.last() {
                println!("final total loss {:.6}", last.report.total);
            }
        }
        Command::Finetune { config, init, data, out, modality } => {
            let cfg = resolve(config.as_deref(), g, Mode::Finetune)?;
            let mut cases = load_dataset(&data)?;
            if let Some(m) = modality {
                cases.retain(|c| c.volume.modality.tag() == m);
            }
            let init = init.map(|p| load_checkpoint(p, &cfg, g.force)).transpose()?;
            echo(&cfg);
            let outcome = finetune_loop(&cfg, init.as_ref().map(|c| &c.params), &cases)?;
            save_checkpoint(&out, &outcome.params, &cfg, Some(&outcome.state))?;
            for e in &outcome.epochs {
                println!("epoch {} step {} loss {:.6} dice {:.6}", e.epoch, e.step, e.loss, e.dice);
            }
        }
        Command::Kfold { config, init, data, k, out } => {
            let cfg = resolve(config.as_deref(), g, Mode::Finetune)?;
            let cases = load_dataset(&data)?;
            let init = init.map(|p| load_checkpoint(p, &cfg, g.force)).transpose()?;
            echo(&cfg);
            let report = kfold(&cfg, &cases, k, init.as_ref().map(|c| &c.params))?;
            let mut text = String::from("fold,test_ids,dice\n");
            for f in &report.folds {
                text.push_str(&format!("{},{},{:.6}\n", f.fold, f.test_ids.join(";"), f.dice));
            }
            print!("{text}");
            println!("mean dice {:.6}", report.mean);
            if let Some(path) = out {
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Eval { config, checkpoint, data, out } => {
            let cfg = resolve(config.as_deref(), g, Mode::Finetune)?;
            let ck = load_checkpoint(&checkpoint, &cfg, g.force)?;
            let cases = load_dataset(&data)?;
            echo(&cfg);
            let reports = evaluate_cases(&ck.params, &cfg, &cases)?;
            write_file(&out, |b| write_dice_csv(b, &reports))?;
            println!("mean dice {:.6} over {} cases", mean_dice(&reports), reports.len());
        }
        Command::Ood { config, out } => {
            let cfg = resolve(config.as_deref(), g, Mode::Finetune)?;
            echo(&cfg);
            let reports = ood_experiment(&cfg, &OodSetup::desk(cfg.seed), cfg.seed, None)?;
            emit_report(&reports, &out)?;
            for r in &reports {
                println!("{} -> {}: delta {:+.4}", r.ft_region, r.test_region, r.delta);
            }
        }
        Command::ExportAttn { config, checkpoint, input, layer, head, stream, out } => {
            let cfg = resolve(config.as_deref(), g, Mode::Pretrain)?;
            if !cfg.use_dim {
                return Err(Error::Config("export-attn needs use_dim=true".into()));
            }
            let ck = load_checkpoint(&checkpoint, &cfg, g.force)?;
            let volume = read_volume(&input)?;
            echo(&cfg);
            let map = export_map(&ck.params, &cfg, &volume, stream, layer, head)?;
            write_volume(&map, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

/// Relevance map of the central sub-volume of `volume`.
fn export_map(
    params: &ParamStore<f32>,
    cfg: &Config,
    volume: &Volume,
    stream: usize,
    layer: usize,
    head: usize,
) -> Result<Volume> {
    let s = cfg.sub_volume;
    let offset = volume.dims.map(|d| d.saturating_sub(s) / 2);
    let sv = subvolume_at(volume, s, offset)?.normalized();
    let graph = Graph::<f32>::new();
    let enc = model::encode(&graph, params, cfg, &sv.voxels, &sv.voxels)?;
    let dim = enc.dim.ok_or_else(|| Error::Contract("model has no fusion module".into()))?;
    let mut map = export_attention(&dim, stream, layer, head, Geometry::new(s, cfg.patch)?)?;
    map.modality = volume.modality;
    Ok(map)
}
