//! Stops training halfway, saves, reloads and finishes; the result matches an uninterrupted run.

use pstnet::data::{preprocess, synth_samples, SynthParams};
use pstnet::harness::{Checkpoint, Trainer};
use pstnet::ExperimentConfig;

fn main() -> pstnet::Result<()> {
    let mut cfg = ExperimentConfig::toy();
    cfg.train.input_size = 64;
    cfg.train.batch_size = 4;
    let raw = synth_samples(12, 64, 5, &SynthParams::default());
    let data: Vec<_> = raw.iter().map(|p| preprocess(p, 64, &cfg.data)).collect();

    let mut straight = Trainer::new(&cfg)?;
    for _ in 0..4 {
        straight.run_epoch(&data)?;
    }

    let mut first = Trainer::new(&cfg)?;
    for _ in 0..2 {
        first.run_epoch(&data)?;
    }
    let bytes = first.checkpoint().to_bytes();
    println!("checkpoint after epoch {}: {} bytes", first.epoch, bytes.len());
    let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes)?)?;
    for _ in 0..2 {
        resumed.run_epoch(&data)?;
    }
    let same = straight.store.iter().zip(resumed.store.iter()).all(|(a, b)| a.1.value == b.1.value);
    println!("resumed parameters identical to the uninterrupted run: {same}");
    Ok(())
}
