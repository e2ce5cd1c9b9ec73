//! Prints the toy experiment config as JSON, ready for `pstnet train --config`.
//!
//! `cargo run -p pstnet --example toy_config > toy.json`

fn main() {
    println!("{}", pstnet::ExperimentConfig::toy().to_json());
}
