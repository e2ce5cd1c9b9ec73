//! Directional ablation on synthetic blobs: full model against each removed module.
//!
//! `cargo run --release -p pstnet --example ablation -- [images] [size] [epochs] [seeds]`

use pstnet::data::{synth_samples, SynthParams};
use pstnet::harness::ablate;
use pstnet::{Ablation, ExperimentConfig};

fn main() -> pstnet::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (n, size, epochs, seeds) = (arg(0, 200), arg(1, 96), arg(2, 20), arg(3, 5));

    let mut cfg = ExperimentConfig::toy();
    cfg.train.epochs = epochs;
    cfg.train.decay_every = epochs.max(1) * 3 / 4;
    cfg.train.input_size = size;
    cfg.ablate.variants = vec![Ablation::None, Ablation::NoFcam, Ablation::NoFsam, Ablation::NoCpm];
    cfg.ablate.seeds = (0..seeds as u64).collect();

    let data = synth_samples(n, size, 2024, &SynthParams::default());
    let n_test = n / 5;
    let (train, test) = data.split_at(n - n_test);
    let report = ablate(&cfg, train, test, None, true)?;
    print!("{}", report.table());
    Ok(())
}
