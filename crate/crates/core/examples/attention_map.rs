//! Cross-attention relevance maps of the fusion module for a CT-like/MR-like
//! pair, one SFV1 volume per (stream, layer).
//!
//! ```text
//! cargo run --example attention_map -- [pretrain.sfck] [out_dir]
//! ```
//! Without a checkpoint the freshly initialized model is used.

use std::path::PathBuf;

use swinfuse::dim::export_attention;
use swinfuse::model::{encode, init_params};
use swinfuse::train::{load_checkpoint, phantom_options, synthetic_pairs};
use swinfuse::volume::{subvolume_at, write_volume, Geometry};
use swinfuse::{Config, Graph, Mode};

fn main() -> swinfuse::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = Config::default();
    let params = match args.next().filter(|a| a != "-") {
        Some(path) => load_checkpoint(path, &cfg, false)?.params,
        None => init_params::<f32>(&cfg, Mode::Pretrain, cfg.seed),
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("swinfuse-attention"));
    std::fs::create_dir_all(&out).map_err(|source| swinfuse::Error::Io { path: out.clone(), source })?;

    let pair = synthetic_pairs(3, 1, [cfg.sub_volume; 3], cfg.n_classes, 0, &phantom_options(&cfg))?;
    let view = |i: usize| subvolume_at(&pair[i].volume, cfg.sub_volume, [0; 3]).map(|s| s.normalized().voxels);
    let (ct, mr) = (view(0)?, view(1)?);

    let g = Graph::<f32>::new();
    let enc = encode(&g, &params, &cfg, &ct, &mr)?;
    let dim = enc.dim.expect("default config uses the fusion module");
    let geom = Geometry::new(cfg.sub_volume, cfg.patch)?;
    for stream in 0..2 {
        for (layer, &heads) in cfg.dim_heads.iter().enumerate() {
            let map = export_attention(&dim, stream, layer, 0, geom)?;
            let mean = map.voxels.iter().map(|&v| v as f64).sum::<f64>() / map.voxels.len() as f64;
            let path = out.join(format!("attn_s{}_l{layer}.sfv", stream + 1));
            write_volume(&map, &path)?;
            println!(
                "stream {} layer {layer} ({heads} heads): head 0 mean relevance {mean:.3} -> {}",
                stream + 1,
                path.display()
            );
        }
    }
    Ok(())
}
