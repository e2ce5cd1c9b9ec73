//! Scores a folder of 8-bit prediction maps against masks and writes the per-image CSV.
//!
//! `cargo run --release -p pstnet --example score_maps -- <pred_dir> <mask_dir> [report.csv]`

use std::path::PathBuf;

use pstnet::metrics::evaluate_dataset;
use pstnet::MetricOptions;

fn main() -> pstnet::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let [preds, masks, rest @ ..] = args.as_slice() else {
        eprintln!("usage: score_maps <pred_dir> <mask_dir> [report.csv]");
        std::process::exit(2);
    };
    let report = evaluate_dataset(preds, masks, &MetricOptions::new())?;
    for m in report.per_image.iter().filter(|m| m.empty_gt) {
        println!("{}: empty mask, weighted F-beta reported as 0", m.id);
    }
    if let Some(path) = rest.first() {
        report.write(path)?;
    }
    println!("{}", report.summary());
    Ok(())
}
