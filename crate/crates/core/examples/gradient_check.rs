//! Finite-difference check of the whole toy network in double precision.

use ndarray::{ArrayD, IxDyn};
use pstnet::losses::{pixel_weights, total_loss, LossTerms, LossWeights};
use pstnet::pstnet_autograd::{Ctx, GradCheck, Graph, Mode, ParamId};
use pstnet::{Ablation, ModelConfig, PstNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pstnet::Result<()> {
    let (net, mut store) = PstNet::build::<f64>(&ModelConfig::toy(), Ablation::None, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Offsets start at exactly zero, where bilinear sampling has a kink and one-sided and
    // central differences disagree. Nudge every all-zero tensor off that point first.
    let zero: Vec<ParamId> = store.trainable().filter(|&id| store.get(id).iter().all(|&v| v == 0.0)).collect();
    for id in zero {
        let v = store.get(id).mapv(|_| rng.random_range(-0.05..0.05));
        store.set(id, v);
    }
    let image = ArrayD::from_shape_simple_fn(IxDyn(&[1, 3, 64, 64]), || rng.random_range(-1.0..1.0));
    let gt = ArrayD::from_shape_fn(IxDyn(&[1, 1, 64, 64]), |i| {
        if (20..44).contains(&i[2]) && (16..40).contains(&i[3]) {
            1.0
        } else {
            0.0
        }
    });
    let weights = pixel_weights(&gt, 5.0, 15)?;
    let loss_cfg = LossWeights::default();
    let ids: Vec<ParamId> = store.trainable().collect();

    let loss_at = |params: &[ArrayD<f64>], track: bool| {
        let mut s = store.clone();
        for (&id, p) in ids.iter().zip(params) {
            s.set(id, p.clone());
        }
        let g = Graph::new();
        let ctx = Ctx::new(&g, &s, Mode::Train).track_params(track);
        let out = net.forward(&ctx, ctx.constant(image.clone())).expect("forward");
        let (loss, _) = total_loss([out.p1, out.p2, out.p3], &gt, &weights, &loss_cfg, LossTerms::ALL).expect("loss");
        if !track {
            return (loss.item(), Vec::new());
        }
        let grads = g.backward(loss);
        let by_id: std::collections::HashMap<_, _> = ctx.param_grads(&grads).into_iter().collect();
        let flat = ids
            .iter()
            .zip(params)
            .map(|(id, p)| by_id.get(id).cloned().unwrap_or_else(|| ArrayD::zeros(p.raw_dim())))
            .collect();
        (loss.item(), flat)
    };
    let point: Vec<ArrayD<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();
    let (loss, analytic) = loss_at(&point, true);
    let result = GradCheck::default().directional(&point, &analytic, 6, |p| loss_at(p, false).0);
    println!(
        "loss {loss:.5}, {} parameter tensors, directional relative error {:.2e}",
        ids.len(),
        result.rel_error
    );
    Ok(())
}
