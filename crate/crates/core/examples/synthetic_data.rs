//! Writes a synthetic blob dataset to disk and reports how faint the blobs are.
//!
//! `cargo run --release -p pstnet --example synthetic_data -- <out_dir> [n] [size] [seed]`

use std::path::PathBuf;

use pstnet::data::{contrast, load_folder, synth_dataset};
use pstnet::DataConfig;

fn main() -> pstnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let n = args.next().map_or(20, |s| s.parse().expect("n"));
    let size = args.next().map_or(96, |s| s.parse().expect("size"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));

    let split = synth_dataset(n, size, seed, &out)?;
    let pairs = load_folder(&out, &DataConfig::default())?;
    let c: Vec<f64> = pairs.iter().map(contrast).collect();
    let fg: f64 = pairs.iter().map(|p| p.mask.mean().unwrap_or(0.0) as f64).sum::<f64>() / pairs.len() as f64;
    println!(
        "{} images ({} train, {} test) in {}",
        pairs.len(),
        split.train.len(),
        split.test.len(),
        out.display()
    );
    println!(
        "foreground/background contrast {:.3}..{:.3}, mean foreground fraction {fg:.3}",
        c.iter().cloned().fold(f64::INFINITY, f64::min),
        c.iter().cloned().fold(0.0, f64::max)
    );
    Ok(())
}
