//! The 2-D DCT filters behind the frequency channel attention: selection order, orthogonality,
//! and what the grouped query extracts from a feature map.

use ndarray::Array3;
use pstnet::fcam::{dct2d, dct_basis, zigzag, FcamConfig};

fn main() -> pstnet::Result<()> {
    let cfg = FcamConfig::default();
    let plan = cfg.plan();
    println!("{} groups pooled to {0}x{0}: {:?}", plan.pool_size, plan.components);
    println!("first 10 zigzag components: {:?}", zigzag(10, 7));

    let worst = (0..49)
        .flat_map(|a| (a + 1..49).map(move |b| (a, b)))
        .map(|(a, b)| {
            let ba = dct_basis(7, 7, a / 7, a % 7).unwrap();
            let bb = dct_basis(7, 7, b / 7, b % 7).unwrap();
            (&ba * &bb).sum().abs()
        })
        .fold(0.0, f64::max);
    println!("largest inner product between distinct 7x7 bases: {worst:.2e}");

    // a pure (0, 2) pattern only lights up its own coefficient
    let pattern = dct_basis(7, 7, 0, 2)?;
    let x = Array3::from_shape_fn((1, 7, 7), |(_, i, j)| pattern[[i, j]]);
    for &(u, v) in &plan.components {
        println!("  ({u}, {v}) -> {:+.4}", dct2d(x.view(), u, v)?[0]);
    }
    Ok(())
}
