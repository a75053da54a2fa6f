//! Paired CT-like/MR-like phantoms written to and read back from SFV1 files.
//!
//! ```text
//! cargo run --example phantoms -- [seed] [out_dir]
//! ```
//! Prints the mean intensity of every label in both modalities: the labels
//! are shared, the appearance is not.

use std::path::PathBuf;

use swinfuse::train::{save_dataset, synthetic_pairs};
use swinfuse::volume::{read_volume, PhantomOptions, Volume};

fn label_means(v: &Volume, n_labels: usize) -> Vec<f64> {
    let labels = v.labels.as_ref().expect("phantoms carry labels");
    let mut sum = vec![0.0; n_labels];
    let mut count = vec![0usize; n_labels];
    for (&x, &l) in v.voxels.iter().zip(labels) {
        sum[l as usize] += x as f64;
        count[l as usize] += 1;
    }
    sum.iter().zip(&count).map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect()
}

fn main() -> swinfuse::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("swinfuse-phantoms"));

    let organs = 3;
    let data = synthetic_pairs(seed, 2, [24, 20, 16], organs, 1, &PhantomOptions::default())?;
    save_dataset(&out, &data)?;
    println!("wrote {} volumes to {}", data.len(), out.display());

    for case in &data {
        let path = out.join(format!("{}.sfv", case.id));
        let back = read_volume(&path)?;
        assert_eq!(back, case.volume, "SFV1 round trip");
        let bytes =
            std::fs::metadata(&path).map_err(|source| swinfuse::Error::Io { path: path.clone(), source })?.len();
        let means: Vec<String> = label_means(&back, organs + 1).iter().map(|m| format!("{m:7.3}")).collect();
        println!("{:10} {:?} {:6} bytes  label means [{}]", case.id, back.dims, bytes, means.join(" "));
    }
    Ok(())
}
