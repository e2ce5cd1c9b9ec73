//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any fails.
//!
//! `cargo test --release -p pstnet --test acceptance -- 1 3 6` runs a subset.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, IxDyn};
use pstnet::cpm::{Cpm, FcaNoDct};
use pstnet::data::{synth_samples, to_gray_image, SynthParams};
use pstnet::encoder::{FeaturePyramid, ShuntedAttention};
use pstnet::fcam::{dct2d, dct_basis, full_attention, multispectral_query, Fcam, FcamConfig};
use pstnet::fsam::{warp, Fsam, FsamConfig};
use pstnet::harness::{ablate, evaluate, train, TrainConfig, TrainOptions};
use pstnet::losses::{dice_loss, focal_loss, pixel_weights, total_loss, wbce, LossTerms, LossWeights};
use pstnet::metrics::{self, evaluate_dataset, MetricOptions};
use pstnet::pstnet_autograd::gradcheck::{analytic_gradient, evaluate as eval_scalar};
use pstnet::pstnet_autograd::{Ctx, GradCheck, GradCheckResult, Graph, Mode, ParamBuilder, ParamId, ParamStore, Var};
use pstnet::{Ablation, ExperimentConfig, ModelConfig, PstNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET_SECS: f64 = 300.0;
const DCT_TOL: f64 = 1e-12;
const BASIS_TOL: f64 = 1e-9;
const WARP_TOL: f64 = 1e-12;
const ATTENTION_TOL: f64 = 1e-5;
const PERFECT_LOSS_MAX: f64 = 1e-3;
const CLIP_SLACK: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-6;
const OVERFIT_DICE: f64 = 0.95;
const OVERFIT_BUDGET_SECS: f64 = 600.0;
const ABLATION_MIN_WINS: usize = 3;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(lo..hi))
}

fn random_mask(shape: &[usize], seed: u64) -> ArrayD<f64> {
    random(shape, seed, 0.0, 1.0).mapv(|v| if v > 0.6 { 1.0 } else { 0.0 })
}

/// Gives every all-zero trainable tensor (attention scales, offset predictors, biases) small
/// random values so the check leaves the degenerate starting point and warps sample between
/// grid points.
fn perturb_zero_params(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.trainable().collect();
    for id in ids {
        if store.get(id).iter().all(|&v| v == 0.0) {
            let v = store.get(id).mapv(|_| rng.random_range(-0.05..0.05));
            store.set(id, v);
        }
    }
}

type LossFn<'a> = dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64> + 'a;
type Criterion = (usize, &'static str, fn() -> Outcome);

type Objective<'a> = dyn for<'g> Fn(&Ctx<'g, f64>, &[Var<'g, f64>]) -> Var<'g, f64> + 'a;

/// Pins a closure to the higher-ranked signature the checker needs.
fn objective<F: for<'g> Fn(&Ctx<'g, f64>, &[Var<'g, f64>]) -> Var<'g, f64>>(f: F) -> F {
    f
}

/// Checks d objective / d (inputs, trainable parameters) by central differences: `coords`
/// coordinates per tensor plus `dirs` random directions through all of them at once.
fn module_gradcheck(
    store: &ParamStore<f64>,
    inputs: &[ArrayD<f64>],
    f: &Objective<'_>,
    coords: usize,
    dirs: usize,
) -> (GradCheckResult, GradCheckResult) {
    let ids: Vec<ParamId> = store.trainable().collect();
    let n_in = inputs.len();
    let mut point: Vec<ArrayD<f64>> = inputs.to_vec();
    point.extend(ids.iter().map(|&id| store.get(id).clone()));

    let analytic = {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, Mode::Train);
        let vars: Vec<Var<'_, f64>> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&ctx, &vars);
        let grads = g.backward(out);
        let by_param: HashMap<ParamId, ArrayD<f64>> = ctx.param_grads(&grads).into_iter().collect();
        let mut a: Vec<ArrayD<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| ArrayD::zeros(x.raw_dim())))
            .collect();
        a.extend(
            ids.iter()
                .map(|id| by_param.get(id).cloned().unwrap_or_else(|| ArrayD::zeros(store.get(*id).raw_dim()))),
        );
        a
    };
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let mut s = store.clone();
        for (k, &id) in ids.iter().enumerate() {
            s.set(id, xs[n_in + k].clone());
        }
        let g = Graph::new();
        let ctx = Ctx::new(&g, &s, Mode::Train).track_params(false);
        let vars: Vec<Var<'_, f64>> = xs[..n_in].iter().map(|x| g.constant(x.clone())).collect();
        f(&ctx, &vars).item()
    };
    let gc = GradCheck::default().coords(coords);
    (gc.compare(&point, &analytic, eval), gc.directional(&point, &analytic, dirs, eval))
}

fn weighted_sum<'g>(ctx: &Ctx<'g, f64>, y: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    y.mul(ctx.constant(random(&y.shape(), seed, -1.0, 1.0))).sum_all()
}

fn grad_line(name: &str, (c, d): (GradCheckResult, GradCheckResult), worst: &mut f64) -> String {
    *worst = worst.max(c.rel_error).max(d.rel_error);
    format!("{name} {:.1e}/{:.1e}", c.rel_error, d.rel_error)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();

    // frequency attention
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FcamConfig {
            n_groups: 4,
            ..FcamConfig::default()
        };
        let fcam = Fcam::new(&mut ParamBuilder::new(&mut store, &mut rng), "fcam", 8, &cfg).map_err(|e| e.to_string())?;
        perturb_zero_params(&mut store, 2);
        let x = random(&[2, 8, 14, 14], 3, -1.0, 1.0);
        let f = objective(|ctx, v| {
            let out = fcam.forward(ctx, v[0], (28, 28)).unwrap();
            weighted_sum(ctx, out.feature, 4).add(weighted_sum(ctx, out.p1_logits, 5))
        });
        parts.push(grad_line("fcam", module_gradcheck(&store, &[x], &f, 8, 6), &mut worst));
    }
    // multi-scale alignment, warps included
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let chans = [6, 8, 10, 12];
        let cfg = FsamConfig {
            channel_width: 6,
            ..FsamConfig::default()
        };
        let fsam = Fsam::new(&mut ParamBuilder::new(&mut store, &mut rng), "fsam", chans, &cfg);
        perturb_zero_params(&mut store, 7);
        let levels: Vec<ArrayD<f64>> = chans
            .iter()
            .enumerate()
            .map(|(i, &c)| random(&[2, c, 16 >> i, 16 >> i], 10 + i as u64, -1.0, 1.0))
            .collect();
        let f = objective(|ctx, v| {
            let pyramid = FeaturePyramid {
                levels: [v[0], v[1], v[2], v[3]],
            };
            let out = fsam.forward(ctx, &pyramid, (32, 32)).unwrap();
            weighted_sum(ctx, out.g, 8).add(weighted_sum(ctx, out.p2_logits, 9))
        });
        parts.push(grad_line("fsam", module_gradcheck(&store, &levels, &f, 8, 6), &mut worst));

        let feat = random(&[1, 3, 7, 9], 20, -1.0, 1.0);
        let offsets = random(&[1, 2, 7, 9], 21, -2.3, 2.3);
        let w = objective(|ctx, v| weighted_sum(ctx, warp(v[0], v[1]), 22));
        let empty = ParamStore::<f64>::new();
        parts.push(grad_line("warp", module_gradcheck(&empty, &[feat, offsets], &w, 64, 6), &mut worst));
    }
    // cross perception
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let cpm = Cpm::new(&mut ParamBuilder::new(&mut store, &mut rng), "cpm", 6);
        perturb_zero_params(&mut store, 31);
        let r1 = random(&[2, 6, 10, 10], 32, -1.0, 1.0);
        let r2 = random(&[2, 6, 10, 10], 33, -1.0, 1.0);
        let f = objective(|ctx, v| {
            let out = cpm.forward(ctx, v[0], v[1], (20, 20)).unwrap();
            weighted_sum(ctx, out.z, 34).add(weighted_sum(ctx, out.p3_logits, 35))
        });
        parts.push(grad_line("cpm", module_gradcheck(&store, &[r1, r2], &f, 8, 6), &mut worst));
    }
    // the three loss terms and their deep-supervised sum
    {
        let logits = random(&[2, 1, 16, 16], 40, -3.0, 3.0);
        let gt = random_mask(&[2, 1, 16, 16], 41);
        let weights = pixel_weights(&gt, 5.0, 15).map_err(|e| e.to_string())?;
        let cfg = LossWeights::default();
        let gc = GradCheck::default().coords(64);
        let mut run = |name: &str, f: &LossFn<'_>| {
            let a = analytic_gradient(std::slice::from_ref(&logits), &f);
            let c = gc.compare(std::slice::from_ref(&logits), &a, |xs| eval_scalar(xs, &f));
            let d = gc.directional(std::slice::from_ref(&logits), &a, 4, |xs| eval_scalar(xs, &f));
            parts.push(grad_line(name, (c, d), &mut worst));
        };
        run("wbce", &|_, v| wbce(v[0], &gt, &weights).unwrap());
        run("dice", &|_, v| dice_loss(v[0].sigmoid(), &gt, cfg.dice_smooth).unwrap());
        run("focal", &|_, v| {
            focal_loss(v[0].sigmoid(), &gt, cfg.focal_alpha, cfg.focal_gamma).unwrap()
        });
        run("total", &|_, v| {
            total_loss([v[0], v[0].scale(0.5), v[0].neg()], &gt, &weights, &cfg, LossTerms::ALL)
                .unwrap()
                .0
        });
    }
    // full toy model on a 96x96 input
    {
        let cfg = ModelConfig::toy();
        let (net, mut store) = PstNet::build::<f64>(&cfg, Ablation::None, 50).map_err(|e| e.to_string())?;
        perturb_zero_params(&mut store, 51);
        let image = random(&[1, 3, 96, 96], 52, -1.5, 1.5);
        let gt = random_mask(&[1, 1, 96, 96], 53);
        let weights = pixel_weights(&gt, 5.0, 15).map_err(|e| e.to_string())?;
        let loss_cfg = LossWeights::default();
        let f = objective(|ctx, v| {
            let out = net.forward(ctx, v[0]).unwrap();
            let (loss, _) = total_loss([out.p1, out.p2, out.p3], &gt, &weights, &loss_cfg, LossTerms::ALL).unwrap();
            loss.add(weighted_sum(ctx, out.combined, 54).scale(1e-3))
        });
        parts.push(grad_line("model", module_gradcheck(&store, &[image], &f, 1, 8), &mut worst));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("worst rel err {worst:.1e} (coord/dir: {}), {secs:.0}s", parts.join(", "));
    ensure(worst <= GRAD_TOL, || format!("tolerance {GRAD_TOL:e} exceeded: {detail}"))?;
    ensure(secs <= GRAD_BUDGET_SECS, || format!("over {GRAD_BUDGET_SECS}s: {detail}"))?;
    Ok(detail)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = Array3::from_shape_simple_fn((1, 7, 7), || rng.random_range(-1.0..1.0));
        let (u, v) = (rng.random_range(0..7), rng.random_range(0..7));
        let fast = dct2d(x.view(), u, v).map_err(|e| e.to_string())?[0];
        let mut naive = 0.0;
        for i in 0..7 {
            for j in 0..7 {
                let cu = (std::f64::consts::PI * u as f64 * (i as f64 + 0.5) / 7.0).cos();
                let cv = (std::f64::consts::PI * v as f64 * (j as f64 + 0.5) / 7.0).cos();
                naive += x[[0, i, j]] * cu * cv;
            }
        }
        worst = worst.max((fast - naive).abs());
    }
    ensure(worst <= DCT_TOL, || format!("dct2d vs double loop: {worst:e}"))?;

    // the grouped query used by the module agrees with the per-channel transform
    let plan = FcamConfig {
        n_groups: 4,
        ..FcamConfig::default()
    }
    .plan();
    let qp = random(&[2, 8, 7, 7], 101, -1.0, 1.0);
    let g = Graph::new();
    let q = multispectral_query(g.constant(qp.clone()), &plan.filters::<f64>(8).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?
        .to_array();
    let gc = plan.group_channels(8);
    let mut worst_query = 0.0f64;
    for b in 0..2 {
        let planes = qp.slice(s![b, .., .., ..]).into_dimensionality().expect("3-d");
        for c in 0..8 {
            let (u, v) = plan.components[c / gc];
            let expect = dct2d(planes, u, v).map_err(|e| e.to_string())?[c];
            worst_query = worst_query.max((q[[b, c]] - expect).abs());
        }
    }
    ensure(worst_query <= DCT_TOL, || format!("grouped query vs dct2d: {worst_query:e}"))?;

    let bases: Vec<Array2<f64>> = (0..64).map(|k| dct_basis(8, 8, k / 8, k % 8).unwrap()).collect();
    let mut worst_ip = 0.0f64;
    for a in 0..64 {
        for b in (a + 1)..64 {
            worst_ip = worst_ip.max((&bases[a] * &bases[b]).sum().abs());
        }
    }
    ensure(worst_ip <= BASIS_TOL, || format!("basis inner product {worst_ip:e}"))?;
    Ok(format!(
        "dct err {worst:.1e}, query err {worst_query:.1e}, max |<B,B'>| {worst_ip:.1e} over 2016 pairs"
    ))
}

fn criterion_3() -> Outcome {
    let g = Graph::<f64>::new();
    let x = random(&[2, 3, 9, 11], 200, -1.0, 1.0);
    let zero = g.constant(ArrayD::zeros(IxDyn(&[2, 2, 9, 11])));
    let out = warp(g.constant(x.clone()), zero).to_array();
    let err = out.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(err <= WARP_TOL, || format!("zero-offset warp error {err:e}"))?;

    let (dy, dx) = (2isize, -3isize);
    let mut off = ArrayD::zeros(IxDyn(&[2, 2, 9, 11]));
    off.slice_mut(s![.., 0, .., ..]).fill(dy as f64);
    off.slice_mut(s![.., 1, .., ..]).fill(dx as f64);
    let shifted = warp(g.constant(x.clone()), g.constant(off)).to_array();
    let mut checked = 0;
    for b in 0..2 {
        for c in 0..3 {
            for y in 0..9isize {
                for xx in 0..11isize {
                    let (sy, sx) = (y + dy, xx + dx);
                    if (0..9).contains(&sy) && (0..11).contains(&sx) {
                        let got = shifted[[b, c, y as usize, xx as usize]];
                        let want = x[[b, c, sy as usize, sx as usize]];
                        ensure(got == want, || format!("shift mismatch at ({y},{xx}): {got} vs {want}"))?;
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(format!("zero-offset err {err:.1e}; {checked} interior pixels recovered exactly"))
}

/// Textbook multi-head attention: per head `softmax(q k^T / sqrt(d)) v`, heads concatenated,
/// then the output projection.
#[allow(clippy::too_many_arguments)]
fn plain_attention(
    x: &Array2<f64>,
    wq: &Array2<f64>,
    bq: &[f64],
    wk: &Array2<f64>,
    bk: &[f64],
    wv: &Array2<f64>,
    bv: &[f64],
    wo: &Array2<f64>,
    bo: &[f64],
    heads: usize,
) -> Array2<f64> {
    let lin = |w: &Array2<f64>, b: &[f64]| {
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        y
    };
    let (q, k, v) = (lin(wq, bq), lin(wk, bk), lin(wv, bv));
    let (n, c) = x.dim();
    let d = c / heads;
    let mut merged = Array2::<f64>::zeros((n, c));
    for h in 0..heads {
        let cols = s![.., h * d..(h + 1) * d];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) / (d as f64).sqrt();
        for mut row in scores.rows_mut() {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            row.mapv_inplace(|s| (s - m).exp());
            let z = row.sum();
            row.mapv_inplace(|s| s / z);
        }
        merged.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
    }
    let mut out = merged.dot(&wo.t());
    for mut row in out.rows_mut() {
        row.iter_mut().zip(bo).for_each(|(v, bb)| *v += bb);
    }
    out
}

fn criterion_4() -> Outcome {
    let (dim, heads, h, w) = (16, 4, 6, 5);
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let attn = ShuntedAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), "attn", dim, heads, &[1, 1]);
    let ids: Vec<ParamId> = store.trainable().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let v = random(store.get(id).shape(), 310 + k as u64, -0.5, 0.5);
        store.set(id, v);
    }
    let p2 = |name: &str| store.by_name(name).unwrap().clone().into_dimensionality::<ndarray::Ix2>().unwrap();
    let p1 = |name: &str| store.by_name(name).unwrap().iter().cloned().collect::<Vec<f64>>();
    // each group of heads owns a key/value projection; stacking them gives one plain projection
    let (group_dim, per_group, d) = (dim / 2, heads / 2, dim / heads);
    let mut wk = Array2::zeros((dim, dim));
    let mut wv = Array2::zeros((dim, dim));
    let mut bk = vec![0.0; dim];
    let mut bv = vec![0.0; dim];
    for gi in 0..2 {
        let kw = p2(&format!("attn.kv{gi}.kv.weight"));
        let kb = p1(&format!("attn.kv{gi}.kv.bias"));
        for j in 0..per_group * d {
            let row = gi * group_dim + j;
            wk.row_mut(row).assign(&kw.row(j));
            wv.row_mut(row).assign(&kw.row(group_dim + j));
            bk[row] = kb[j];
            bv[row] = kb[group_dim + j];
        }
    }
    let x = random(&[2, h * w, dim], 320, -1.0, 1.0);
    let g = Graph::new();
    let ctx = Ctx::new(&g, &store, Mode::Eval);
    let got = attn
        .forward(&ctx, ctx.constant(x.clone()), h, w)
        .map_err(|e| e.to_string())?
        .to_array();
    let mut worst = 0.0f64;
    for b in 0..2 {
        let xb = x.slice(s![b, .., ..]).to_owned().into_dimensionality().unwrap();
        let want = plain_attention(
            &xb,
            &p2("attn.q.weight"),
            &p1("attn.q.bias"),
            &wk,
            &bk,
            &wv,
            &bv,
            &p2("attn.proj.weight"),
            &p1("attn.proj.bias"),
            heads,
        );
        let gb = got.slice(s![b, .., ..]);
        worst = gb.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure(worst <= ATTENTION_TOL, || format!("shunted vs plain attention: {worst:e}"))?;

    // alpha = 0 makes both channel attentions the identity
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(330);
    let fcam = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let fcam = Fcam::new(
            &mut pb,
            "fcam",
            8,
            &FcamConfig {
                n_groups: 4,
                ..FcamConfig::default()
            },
        )
        .map_err(|e| e.to_string())?;
        (fcam, FcaNoDct::new(&mut pb, "cpm_att", 8))
    };
    let xs = random(&[2, 8, 14, 14], 331, -2.0, 2.0);
    let g = Graph::new();
    let ctx = Ctx::new(&g, &store, Mode::Eval);
    let xv = ctx.constant(xs.clone());
    ensure(
        ctx.param(fcam.0.alpha).item() == 0.0 && ctx.param(fcam.1.alpha).item() == 0.0,
        || "alpha does not start at 0".into(),
    )?;
    let f_out = fcam.0.forward(&ctx, xv, (28, 28)).map_err(|e| e.to_string())?.feature.to_array();
    let c_out = fcam.1.forward(&ctx, xv).map_err(|e| e.to_string())?.to_array();
    let q = random(&[2, 8], 332, -1.0, 1.0);
    let direct = full_attention(xv, ctx.constant(q), ctx.scalar(0.0).reshape(&[1]))
        .map_err(|e| e.to_string())?
        .to_array();
    ensure(f_out == xs && c_out == xs && direct == xs, || {
        "alpha = 0 attention is not the identity".into()
    })?;
    Ok(format!("max |shunted - plain| {worst:.1e}; alpha = 0 outputs equal inputs exactly"))
}

fn criterion_5() -> Outcome {
    let gt = random_mask(&[2, 1, 32, 32], 400);
    let weights = pixel_weights(&gt, 5.0, 15).map_err(|e| e.to_string())?;
    let g = Graph::new();
    let logits = g.constant(gt.mapv(|v| if v > 0.5 { 30.0 } else { -30.0 }));
    let (_, breakdown) =
        total_loss([logits, logits, logits], &gt, &weights, &LossWeights::default(), LossTerms::ALL).map_err(|e| e.to_string())?;
    ensure(breakdown.total <= PERFECT_LOSS_MAX, || {
        format!("perfect-prediction loss {}", breakdown.total)
    })?;

    let sched = TrainConfig::default().schedule();
    let lrs = [sched.at(0), sched.at(45), sched.at(90)];
    ensure(lrs == [1e-4, 1e-5, 1e-6], || format!("schedule {lrs:?}"))?;

    let mut cfg = ExperimentConfig::toy();
    cfg.train.input_size = 64;
    cfg.train.batch_size = 4;
    cfg.train.epochs = 3;
    let data = synth_samples(8, 64, 401, &SynthParams::default());
    let run = train(&cfg, &data, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let max_clipped = run.steps.iter().map(|s| s.clipped_norm).fold(0.0, f64::max);
    let max_raw = run.steps.iter().map(|s| s.grad_norm).fold(0.0, f64::max);
    ensure(max_clipped <= cfg.train.grad_clip + CLIP_SLACK, || {
        format!("clipped norm {max_clipped}")
    })?;
    ensure(max_raw > cfg.train.grad_clip, || "clipping never engaged".into())?;
    Ok(format!(
        "perfect loss {:.1e}; lr {lrs:?}; {} steps, raw |g| up to {max_raw:.1}, clipped max {max_clipped:.6}",
        breakdown.total,
        run.steps.len()
    ))
}

// ---- literal metric definitions, pixel by pixel ----

fn oracle_dice_iou(p: &Array2<f64>, g: &Array2<f64>) -> (f64, f64) {
    let (mut tp, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for y in 0..p.nrows() {
        for x in 0..p.ncols() {
            tp += p[[y, x]] * g[[y, x]];
            sp += p[[y, x]];
            sg += g[[y, x]];
        }
    }
    if sp + sg == 0.0 {
        return (1.0, 1.0);
    }
    (2.0 * tp / (sp + sg), tp / (sp + sg - tp))
}

fn oracle_mae(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for y in 0..p.nrows() {
        for x in 0..p.ncols() {
            s += (p[[y, x]] - g[[y, x]]).abs();
        }
    }
    s / p.len() as f64
}

fn oracle_wfb(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let (h, w) = g.dim();
    let eps = f64::EPSILON;
    let fg: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| g[[y, x]] == 1.0)
        .collect();
    if fg.is_empty() {
        return 0.0;
    }
    let e = Array2::from_shape_fn((h, w), |(y, x)| (p[[y, x]] - g[[y, x]]).abs());
    // brute-force distance transform; the first nearest pixel in row-major order wins ties
    let mut dst = Array2::<f64>::zeros((h, w));
    let mut et = e.clone();
    for y in 0..h {
        for x in 0..w {
            if g[[y, x]] == 1.0 {
                continue;
            }
            let mut best = (f64::INFINITY, (0, 0));
            for &(fy, fx) in &fg {
                let d = ((fy as f64 - y as f64).powi(2) + (fx as f64 - x as f64).powi(2)).sqrt();
                if d < best.0 {
                    best = (d, (fy, fx));
                }
            }
            dst[[y, x]] = best.0;
            et[[y, x]] = e[best.1];
        }
    }
    let mut k = Array2::<f64>::zeros((7, 7));
    for i in 0..7 {
        for j in 0..7 {
            let (a, b) = (i as f64 - 3.0, j as f64 - 3.0);
            k[[i, j]] = (-(a * a + b * b) / (2.0 * 25.0)).exp();
        }
    }
    let ks = k.sum();
    k /= ks;
    let mut ea = Array2::<f64>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for i in -3..=3isize {
                for j in -3..=3isize {
                    let (sy, sx) = (y + i, x + j);
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        acc += k[[(i + 3) as usize, (j + 3) as usize]] * et[[sy as usize, sx as usize]];
                    }
                }
            }
            ea[[y as usize, x as usize]] = acc;
        }
    }
    let (mut sum_fg, mut ew_fg, mut ew_bg, mut n_fg) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut m = e[[y, x]];
            if g[[y, x]] == 1.0 && ea[[y, x]] < e[[y, x]] {
                m = ea[[y, x]];
            }
            let b = if g[[y, x]] == 1.0 {
                1.0
            } else {
                2.0 - ((0.5f64).ln() / 5.0 * dst[[y, x]]).exp()
            };
            let ew = m * b;
            if g[[y, x]] == 1.0 {
                sum_fg += 1.0;
                ew_fg += ew;
                n_fg += 1.0;
            } else {
                ew_bg += ew;
            }
        }
    }
    let tpw = sum_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let pr = tpw / (eps + tpw + ew_bg);
    2.0 * r * pr / (eps + r + pr)
}

fn oracle_object(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let x = values.iter().sum::<f64>() / n;
    let sigma = if values.len() > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn oracle_ssim(p: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> f64 {
    let eps = f64::EPSILON;
    let n = p.len() as f64;
    let x = p.sum() / n;
    let y = g.sum() / n;
    let mut sx2 = 0.0;
    let mut sy2 = 0.0;
    let mut sxy = 0.0;
    for (a, b) in p.iter().zip(g.iter()) {
        sx2 += (a - x) * (a - x);
        sy2 += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    sx2 /= n - 1.0 + eps;
    sy2 /= n - 1.0 + eps;
    sxy /= n - 1.0 + eps;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + eps)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn oracle_s_measure(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let (rows, cols) = g.dim();
    let y = g.mean().unwrap();
    if y == 0.0 {
        return 1.0 - p.mean().unwrap();
    }
    if y == 1.0 {
        return p.mean().unwrap();
    }
    let fg: Vec<f64> = p.iter().zip(g.iter()).filter(|(_, &gv)| gv == 1.0).map(|(&pv, _)| pv).collect();
    let bg: Vec<f64> = p
        .iter()
        .zip(g.iter())
        .filter(|(_, &gv)| gv == 0.0)
        .map(|(&pv, _)| 1.0 - pv)
        .collect();
    let s_object = y * oracle_object(&fg) + (1.0 - y) * oracle_object(&bg);

    // 1-based centroid as in the reference implementation
    let total = g.sum();
    let mut sx = 0.0;
    let mut sy = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            sx += g[[r, c]] * (c + 1) as f64;
            sy += g[[r, c]] * (r + 1) as f64;
        }
    }
    let cx = (sx / total).round() as usize;
    let cy = (sy / total).round() as usize;
    let area = (rows * cols) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((cols - cx) * cy) as f64 / area;
    let w3 = (cx * (rows - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quads = [
        (w1, s![0..cy, 0..cx]),
        (w2, s![0..cy, cx..cols]),
        (w3, s![cy..rows, 0..cx]),
        (w4, s![cy..rows, cx..cols]),
    ];
    let mut s_region = 0.0;
    for (wq, sl) in quads {
        let pq = p.slice(sl);
        if pq.is_empty() {
            continue;
        }
        s_region += wq * oracle_ssim(pq, g.slice(sl));
    }
    let q = 0.5 * s_object + 0.5 * s_region;
    if q < 0.0 {
        0.0
    } else {
        q
    }
}

fn oracle_e_single(fm: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let n = g.len() as f64;
    let gsum = g.sum();
    let mut total = 0.0;
    if gsum == 0.0 {
        total = fm.iter().map(|v| 1.0 - v).sum();
    } else if gsum == n {
        total = fm.sum();
    } else {
        let mu_f = fm.sum() / n;
        let mu_g = gsum / n;
        for (f, gv) in fm.iter().zip(g.iter()) {
            let af = f - mu_f;
            let ag = gv - mu_g;
            let align = 2.0 * (ag * af) / (ag * ag + af * af + f64::EPSILON);
            total += (align + 1.0) * (align + 1.0) / 4.0;
        }
    }
    total / n
}

fn oracle_e_measure(p: &Array2<f64>, g: &Array2<f64>) -> (f64, f64) {
    let mut scores = Vec::new();
    for k in 0..256 {
        let t = (k as f64 + 0.5) / 256.0;
        let fm = p.mapv(|v| if v >= t { 1.0 } else { 0.0 });
        scores.push(oracle_e_single(&fm, g));
    }
    (scores.iter().sum::<f64>() / 256.0, scores.iter().cloned().fold(f64::MIN, f64::max))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let opts = MetricOptions::new();
    let mut worst = [0.0f64; 7];
    for case in 0..50 {
        let density = rng.random_range(0.1..0.7);
        let g = Array2::from_shape_simple_fn((8, 8), || if rng.random_bool(density) { 1.0 } else { 0.0 });
        // mix of noisy-correct and arbitrary predictions
        let p = if case % 2 == 0 {
            g.mapv(|v| (0.7 * v + rng.random_range(0.0..0.3f64)).clamp(0.0, 1.0))
        } else {
            Array2::from_shape_simple_fn((8, 8), || rng.random_range(0.0..1.0))
        };
        let m = metrics::score_image("case", p.view(), g.view(), &opts).map_err(|e| e.to_string())?;
        let (od, oi) = oracle_dice_iou(&p, &g);
        let (oem, oex) = oracle_e_measure(&p, &g);
        let oracle = [od, oi, oracle_wfb(&p, &g), oracle_s_measure(&p, &g), oem, oex, oracle_mae(&p, &g)];
        for (k, (a, b)) in m.columns().iter().zip(oracle).enumerate() {
            worst[k] = worst[k].max((a - b).abs());
        }
        let (bd, bi) = metrics::dice_iou(p.view(), g.view(), Some(0.5)).map_err(|e| e.to_string())?;
        ensure(bd >= bi - 1e-15, || format!("case {case}: binarised dice {bd} < iou {bi}"))?;
    }
    let max_err = worst.iter().cloned().fold(0.0, f64::max);
    ensure(max_err <= METRIC_TOL, || format!("oracle mismatch per column {worst:?}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let masks = dir.path().join("masks");
    std::fs::create_dir_all(&masks).map_err(|e| e.to_string())?;
    for p in synth_samples(5, 48, 601, &SynthParams::default()) {
        let m = p.mask.mapv(|v| if v > 0.5 { 255u8 } else { 0 });
        to_gray_image(&m)
            .save(masks.join(format!("{}.png", p.id)))
            .map_err(|e| e.to_string())?;
    }
    let report = evaluate_dataset(&masks, &masks, &opts).map_err(|e| e.to_string())?;
    let perfect = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
    let gap = report.means.iter().zip(perfect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(gap <= METRIC_TOL, || format!("ground truth vs itself: {:?}", report.means))?;
    Ok(format!(
        "50 cases, max oracle diff {max_err:.1e}; gt vs gt means {:?}",
        report.means
    ))
}

fn overfit_run() -> Result<(f64, Vec<f64>), String> {
    let mut cfg = ExperimentConfig::toy();
    cfg.train.max_steps = Some(200);
    cfg.train.epochs = 200;
    cfg.train.decay_every = 200;
    let data = synth_samples(8, 96, 7, &SynthParams::default());
    let run = train(&cfg, &data, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let t = &run.trainer;
    let report = evaluate(&t.net, &t.store, &data, cfg.train.input_size, &cfg.data, &MetricOptions::new()).map_err(|e| e.to_string())?;
    Ok((report.mdice(), run.steps.iter().map(|s| s.loss.total).collect()))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let (dice, losses) = overfit_run()?;
    let secs = start.elapsed().as_secs_f64();
    let (dice_again, losses_again) = overfit_run()?;
    ensure(losses.len() == 200, || format!("{} steps", losses.len()))?;
    ensure(losses == losses_again && dice == dice_again, || "repeat run diverged".into())?;
    ensure(dice >= OVERFIT_DICE, || format!("train mDice {dice:.4} < {OVERFIT_DICE}"))?;
    ensure(secs <= OVERFIT_BUDGET_SECS, || format!("run took {secs:.0}s"))?;
    Ok(format!("train mDice {dice:.4} after 200 steps in {secs:.0}s; repeat run identical"))
}

fn criterion_8() -> Outcome {
    let mut cfg = ExperimentConfig::toy();
    cfg.train.epochs = 20;
    cfg.ablate.variants = vec![Ablation::None, Ablation::NoFcam, Ablation::NoFsam, Ablation::NoCpm];
    cfg.ablate.seeds = (0..5).collect();
    let data = synth_samples(200, cfg.train.input_size, 2024, &SynthParams::default());
    let (train_set, test_set) = data.split_at(160);
    let report = ablate(&cfg, train_set, test_set, None, false).map_err(|e| e.to_string())?;
    let wins: Vec<(Ablation, usize)> = [Ablation::NoFcam, Ablation::NoFsam, Ablation::NoCpm]
        .iter()
        .map(|&v| (v, report.wins_over(v)))
        .collect();
    let means: Vec<String> = report
        .variants()
        .iter()
        .map(|&v| format!("{} {:.4}", v.label(), report.mean(v).unwrap()[0]))
        .collect();
    let detail = format!(
        "wins of Final over {}; mean mDice {}",
        wins.iter()
            .map(|(v, w)| format!("{} {w}/5", v.label()))
            .collect::<Vec<_>>()
            .join(", "),
        means.join(", ")
    );
    ensure(wins.iter().all(|&(_, w)| w >= ABLATION_MIN_WINS), || detail.clone())?;
    Ok(detail)
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pstnet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    ensure(out.status.success(), || {
        format!("`pstnet {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(stdout)
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |sub: &str| dir.path().join(sub).to_string_lossy().to_string();
    let mut cfg = ExperimentConfig::toy();
    cfg.train.epochs = 2;
    cfg.train.input_size = 64;
    cfg.save(dir.path().join("config.json")).map_err(|e| e.to_string())?;

    cli(&["synth", "--n", "10", "--size", "64", "--seed", "3", "--out", &p("data")])?;
    cli(&[
        "train",
        "--config",
        &p("config.json"),
        "--data",
        &p("data"),
        "--out",
        &p("run"),
        "--quiet",
    ])?;
    let ckpt = p("run/model.ckpt");
    cli(&[
        "predict",
        "--ckpt",
        &ckpt,
        "--images",
        &p("data/images"),
        "--out",
        &p("preds"),
        "--gts",
        &p("data/masks"),
    ])?;
    cli(&["eval", "--ckpt", &ckpt, "--data", &p("data"), "--report", &p("report_ckpt.csv")])?;
    let summary = cli(&["eval", "--preds", &p("preds"), "--data", &p("data"), "--report", &p("report.csv")])?;

    let header = "id,mDic,mIoU,wFb,Sa,mEe,maxEe,MAE";
    let report = std::fs::read_to_string(dir.path().join("report.csv")).map_err(|e| e.to_string())?;
    ensure(report.lines().next() == Some(header), || {
        format!("report header {:?}", report.lines().next())
    })?;
    ensure(report.lines().count() == 12, || {
        format!("{} report lines for 10 images", report.lines().count())
    })?;
    let maps = std::fs::read_dir(dir.path().join("preds")).map_err(|e| e.to_string())?.count();
    ensure(Path::new(&p("preds/overlays/0000.png")).exists() && maps == 11, || {
        format!("{maps} prediction entries")
    })?;
    Ok(format!(
        "synth, train, predict, eval exited 0; {}",
        summary.lines().nth(1).unwrap_or_default().trim()
    ))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 9] = [
        (1, "gradient integrity", criterion_1),
        (2, "DCT correctness", criterion_2),
        (3, "alignment identity", criterion_3),
        (4, "degenerate attention", criterion_4),
        (5, "loss sanity", criterion_5),
        (6, "metric oracles", criterion_6),
        (7, "tiny overfit", criterion_7),
        (8, "directional ablation", criterion_8),
        (9, "pipeline round trip", criterion_9),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} PASS [{name}] ({secs:.0}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} FAIL [{name}] ({secs:.0}s) {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
