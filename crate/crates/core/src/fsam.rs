//! Feature supplementary alignment: a cascade of subtraction units next to a cascade of
//! offset-aligned upsample-add fusions, merged at stride 4.

use pstnet_autograd::{Conv2d, ConvSpec, Ctx, ParamBuilder, Real, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::layers::{conv, Cbs, LogitHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// Subtraction and alignment cascades run side by side on the projected levels.
    Parallel,
    /// Each subtraction consumes the output of the preceding alignment.
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FsamConfig {
    pub channel_width: usize,
    pub wiring: Wiring,
}

impl Default for FsamConfig {
    fn default() -> Self {
        FsamConfig {
            channel_width: 32,
            wiring: Wiring::Parallel,
        }
    }
}

/// Bilinear sampling of `feature` at `(h + d0, w + d1)`; samples outside the grid read zero.
pub fn warp<'g, T: Real>(feature: Var<'g, T>, offsets: Var<'g, T>) -> Var<'g, T> {
    feature.warp(offsets)
}

fn ensure_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")))
    }
}

/// `|f_a(a) - f_b(b)|`, one CBS unit per operand.
#[derive(Debug, Clone)]
pub struct Subtraction {
    pub fa: Cbs,
    pub fb: Cbs,
}

impl Subtraction {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut pb = pb.sub(name);
        Subtraction {
            fa: Cbs::new(&mut pb, "fa", channels),
            fb: Cbs::new(&mut pb, "fb", channels),
        }
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
        ensure_same(&a.shape(), &b.shape(), "subtraction operands")?;
        Ok(self.fa.forward(ctx, a).sub(self.fb.forward(ctx, b)).abs())
    }
}

/// 3x3 conv on `concat(coarse_up, fine)` producing two 2-channel offset fields.
#[derive(Debug, Clone)]
pub struct OffsetPredictor {
    pub conv: Conv2d,
}

impl OffsetPredictor {
    /// Zero initialised: alignment starts as plain upsample-add.
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        OffsetPredictor {
            conv: Conv2d::zeros(pb, name, ConvSpec::same(2 * channels, 4, 3)),
        }
    }

    /// `(delta_coarse, delta_fine)`, each `[B, 2, H, W]`.
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, coarse_up: Var<'g, T>, fine: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        ensure_same(&coarse_up.shape(), &fine.shape(), "offset inputs")?;
        let d = self.conv.forward(ctx, Var::concat(&[coarse_up, fine], 1));
        Ok((d.narrow(1, 0, 2), d.narrow(1, 2, 2)))
    }
}

/// `warp(up(coarse), delta_c) + warp(fine, delta_f)`.
#[derive(Debug, Clone)]
pub struct FeatureAlign {
    pub offsets: OffsetPredictor,
}

impl FeatureAlign {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        FeatureAlign {
            offsets: OffsetPredictor::new(pb, name, channels),
        }
    }

    /// `coarse` must be at half or equal the resolution of `fine`.
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, coarse: Var<'g, T>, fine: Var<'g, T>) -> Result<Var<'g, T>> {
        let (cb, cc, ch, cw) = coarse.dims4();
        let (fb, fc, fh, fw) = fine.dims4();
        let adjacent = (ch * 2 == fh && cw * 2 == fw) || (ch == fh && cw == fw);
        if cb != fb || cc != fc || !adjacent {
            return Err(Error::Shape(format!(
                "alignment needs adjacent scales, got {:?} and {:?}",
                coarse.shape(),
                fine.shape()
            )));
        }
        let up = coarse.resize_bilinear(fh, fw);
        let (dc, df) = self.offsets.forward(ctx, up, fine)?;
        Ok(warp(up, dc).add(warp(fine, df)))
    }
}

pub struct FsamOutput<'g, T: Real> {
    pub g: Var<'g, T>,
    pub p2_logits: Var<'g, T>,
    /// Subtraction cascade at strides 16, 8, 4.
    pub subtraction: [Var<'g, T>; 3],
    /// Alignment cascade at strides 16, 8, 4.
    pub aligned: [Var<'g, T>; 3],
}

#[derive(Debug, Clone)]
pub struct Fsam {
    pub config: FsamConfig,
    pub proj: Vec<Conv2d>,
    pub su: Vec<Subtraction>,
    pub fa: Vec<FeatureAlign>,
    pub fuse: Cbs,
    pub head: LogitHead,
}

fn up_to<'g, T: Real>(x: Var<'g, T>, like: Var<'g, T>) -> Var<'g, T> {
    let (_, _, h, w) = like.dims4();
    x.resize_bilinear(h, w)
}

/// 1x1 projections of the four levels to a common width.
pub(crate) fn level_projections<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: [usize; 4], width: usize) -> Vec<Conv2d> {
    channels
        .iter()
        .enumerate()
        .map(|(i, &c)| conv(pb, &format!("proj{}", i + 1), ConvSpec::pointwise(c, width)))
        .collect()
}

impl Fsam {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, level_channels: [usize; 4], config: &FsamConfig) -> Self {
        let mut pb = pb.sub(name);
        let cu = config.channel_width;
        Fsam {
            config: config.clone(),
            proj: level_projections(&mut pb, level_channels, cu),
            su: (1..=3).map(|i| Subtraction::new(&mut pb, &format!("su{i}"), cu)).collect(),
            fa: (1..=3).map(|i| FeatureAlign::new(&mut pb, &format!("fa{i}"), cu)).collect(),
            fuse: Cbs::new(&mut pb, "fuse", cu),
            head: LogitHead::new(&mut pb, "head", cu),
        }
    }

    pub fn forward<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, T>,
        pyramid: &FeaturePyramid<'g, T>,
        out_size: (usize, usize),
    ) -> Result<FsamOutput<'g, T>> {
        let p: Vec<Var<'g, T>> = pyramid.levels.iter().zip(&self.proj).map(|(x, c)| c.forward(ctx, *x)).collect();
        let (x1, x2, x3, x4) = (p[0], p[1], p[2], p[3]);
        let (s, a) = match self.config.wiring {
            Wiring::Parallel => {
                let s1 = self.su[0].forward(ctx, up_to(x4, x3), x3)?;
                let s2 = self.su[1].forward(ctx, up_to(s1, x2), x2)?;
                let s3 = self.su[2].forward(ctx, up_to(s2, x1), x1)?;
                let a3 = self.fa[0].forward(ctx, x4, x3)?;
                let a2 = self.fa[1].forward(ctx, a3, x2)?;
                let a1 = self.fa[2].forward(ctx, a2, x1)?;
                ([s1, s2, s3], [a3, a2, a1])
            }
            Wiring::Interleaved => {
                let a3 = self.fa[0].forward(ctx, x4, x3)?;
                let s1 = self.su[0].forward(ctx, a3, x3)?;
                let a2 = self.fa[1].forward(ctx, s1, x2)?;
                let s2 = self.su[1].forward(ctx, a2, x2)?;
                let a1 = self.fa[2].forward(ctx, s2, x1)?;
                let s3 = self.su[2].forward(ctx, a1, x1)?;
                ([s1, s2, s3], [a3, a2, a1])
            }
        };
        let g = self.fuse.forward(ctx, s[2].add(a[2]));
        Ok(FsamOutput {
            p2_logits: self.head.forward(ctx, g, out_size),
            g,
            subtraction: s,
            aligned: a,
        })
    }
}

/// Replacement fusion without subtraction or alignment: progressive upsample-add of the
/// projected levels followed by one CBS.
#[derive(Debug, Clone)]
pub struct PlainFusion {
    pub proj: Vec<Conv2d>,
    pub fuse: Cbs,
    pub head: LogitHead,
}

impl PlainFusion {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, level_channels: [usize; 4], width: usize) -> Self {
        let mut pb = pb.sub(name);
        PlainFusion {
            proj: level_projections(&mut pb, level_channels, width),
            fuse: Cbs::new(&mut pb, "fuse", width),
            head: LogitHead::new(&mut pb, "head", width),
        }
    }

    pub fn forward<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, T>,
        pyramid: &FeaturePyramid<'g, T>,
        out_size: (usize, usize),
    ) -> (Var<'g, T>, Var<'g, T>) {
        let p: Vec<Var<'g, T>> = pyramid.levels.iter().zip(&self.proj).map(|(x, c)| c.forward(ctx, *x)).collect();
        let mut t = p[3];
        for lvl in p[..3].iter().rev() {
            t = up_to(t, *lvl).add(*lvl);
        }
        let g = self.fuse.forward(ctx, t);
        (g, self.head.forward(ctx, g, out_size))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use pstnet_autograd::{Graph, Mode, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    /// CBS whose conv is the identity and whose BN is inert in eval mode: f(x) = silu(x / sqrt(1 + 1e-5)).
    fn identity_cbs(store: &mut ParamStore<f64>, cbs: &Cbs, channels: usize) {
        let mut w = ArrayD::zeros(IxDyn(&[channels, channels, 3, 3]));
        for c in 0..channels {
            w[[c, c, 1, 1]] = 1.0;
        }
        store.set(cbs.conv.weight, w);
    }

    #[test]
    fn subtraction_hand_table_and_symmetry() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let su = Subtraction::new(&mut ParamBuilder::new(&mut store, &mut rng), "su", 1);
        identity_cbs(&mut store, &su.fa, 1);
        identity_cbs(&mut store, &su.fb, 1);
        let a = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 4.0, -2.0, 0.0]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![3.0, 4.0, 1.0, -5.0]).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let (va, vb) = (ctx.constant(a.clone()), ctx.constant(b.clone()));
        let ab = su.forward(&ctx, va, vb).unwrap().to_array();
        let ba = su.forward(&ctx, vb, va).unwrap().to_array();
        assert_eq!(ab, ba);
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        let f = |x: f64| {
            let y = x * s;
            y / (1.0 + (-y).exp())
        };
        for ((o, x), y) in ab.iter().zip(a.iter()).zip(b.iter()) {
            assert!((o - (f(*x) - f(*y)).abs()).abs() < 1e-12);
        }
        let zero = su.forward(&ctx, va, va).unwrap().to_array();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(su.forward(&ctx, va, ctx.constant(ArrayD::zeros(IxDyn(&[1, 1, 2, 3])))).is_err());
    }

    #[test]
    fn warp_shift_and_ramp() {
        let g = Graph::<f64>::new();
        let img = random(&[1, 2, 6, 5], 1);
        // shifted[h] = img[h - 1] ; sampling shifted at h + 1 recovers img[h]
        let mut shifted = ArrayD::zeros(IxDyn(&[1, 2, 6, 5]));
        for c in 0..2 {
            for h in 1..6 {
                for w in 0..5 {
                    shifted[[0, c, h, w]] = img[[0, c, h - 1, w]];
                }
            }
        }
        let mut d = ArrayD::zeros(IxDyn(&[1, 2, 6, 5]));
        d.index_axis_mut(ndarray::Axis(1), 0).fill(1.0);
        let out = warp(g.constant(shifted), g.constant(d)).to_array();
        for c in 0..2 {
            for h in 0..5 {
                for w in 0..5 {
                    assert_eq!(out[[0, c, h, w]], img[[0, c, h, w]]);
                }
            }
            // the last row samples outside the grid
            assert!((0..5).all(|w| out[[0, c, 5, w]] == 0.0));
        }
        let ramp = ArrayD::from_shape_fn(IxDyn(&[1, 1, 1, 6]), |i| (3 * i[3]) as f64);
        let mut half = ArrayD::zeros(IxDyn(&[1, 2, 1, 6]));
        half.index_axis_mut(ndarray::Axis(1), 1).fill(0.5);
        let out = warp(g.constant(ramp), g.constant(half)).to_array();
        for w in 0..5 {
            assert_eq!(out[[0, 0, 0, w]], 3.0 * w as f64 + 1.5);
        }
    }

    /// Literal sum over every source pixel of the separable tent kernel.
    fn warp_oracle(f: &ArrayD<f64>, d: &ArrayD<f64>) -> ArrayD<f64> {
        let s = f.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = ArrayD::zeros(IxDyn(s));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let py = y as f64 + d[[bi, 0, y, x]].clamp(-(h as f64), h as f64);
                        let px = x as f64 + d[[bi, 1, y, x]].clamp(-(w as f64), w as f64);
                        let mut acc = 0.0;
                        for yy in 0..h {
                            for xx in 0..w {
                                let k = (1.0 - (py - yy as f64).abs()).max(0.0) * (1.0 - (px - xx as f64).abs()).max(0.0);
                                acc += f[[bi, ci, yy, xx]] * k;
                            }
                        }
                        out[[bi, ci, y, x]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn align_matches_scalar_loop_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fa = FeatureAlign::new(&mut ParamBuilder::new(&mut store, &mut rng), "fa", 2);
        store.set(fa.offsets.conv.weight, random(&[4, 4, 3, 3], 6).mapv(|v| 0.8 * v));
        store.set(fa.offsets.conv.bias.unwrap(), random(&[4], 7));
        let coarse = random(&[1, 2, 2, 2], 8);
        let fine = random(&[1, 2, 4, 4], 9);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let (vc, vf) = (ctx.constant(coarse), ctx.constant(fine.clone()));
        let out = fa.forward(&ctx, vc, vf).unwrap().to_array();
        let up = vc.resize_bilinear(4, 4).to_array();
        let (dc, df) = fa.offsets.forward(&ctx, ctx.constant(up.clone()), vf).unwrap();
        let expected = warp_oracle(&up, &dc.to_array()) + warp_oracle(&fine, &df.to_array());
        for (o, e) in out.iter().zip(expected.iter()) {
            assert!((o - e).abs() < 1e-10);
        }
        assert!(dc.to_array().iter().any(|v| v.abs() > 0.1));
        // zero predictor: plain upsample-add
        let mut zero = store.clone();
        zero.set(fa.offsets.conv.weight, ArrayD::zeros(IxDyn(&[4, 4, 3, 3])));
        zero.set(fa.offsets.conv.bias.unwrap(), ArrayD::zeros(IxDyn(&[4])));
        let ctx = Ctx::new(&g, &zero, Mode::Eval);
        let plain = fa.forward(&ctx, vc, vf).unwrap().to_array();
        let expected = &up + &fine;
        for (o, e) in plain.iter().zip(expected.iter()) {
            assert!((o - e).abs() < 1e-14);
        }
        assert!(fa.forward(&ctx, vc, ctx.constant(ArrayD::zeros(IxDyn(&[1, 2, 8, 8])))).is_err());
    }

    #[test]
    fn zero_offset_predictor_outputs_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let op = OffsetPredictor::new(&mut ParamBuilder::new(&mut store, &mut rng), "o", 3);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let a = ctx.constant(random(&[2, 3, 4, 4], 1));
        let (dc, dp) = op.forward(&ctx, a, a).unwrap();
        assert_eq!(dc.shape(), vec![2, 2, 4, 4]);
        assert!(dc.to_array().iter().chain(dp.to_array().iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn equal_levels_with_tied_units_leave_only_alignment() {
        let cu = 4;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fsam = Fsam::new(
            &mut ParamBuilder::new(&mut store, &mut rng),
            "fsam",
            [cu; 4],
            &FsamConfig {
                channel_width: cu,
                wiring: Wiring::Parallel,
            },
        );
        // identical projections and tied CBS weights in each subtraction unit
        let w = store.get(fsam.proj[0].weight).clone();
        for p in &fsam.proj {
            store.set(p.weight, w.clone());
        }
        for su in &fsam.su {
            let w = store.get(su.fa.conv.weight).clone();
            store.set(su.fb.conv.weight, w);
        }
        // a spatially constant map is invariant under bilinear upsampling
        let level = |s: usize| ArrayD::from_shape_fn(IxDyn(&[1, cu, s, s]), |i| 0.3 * i[1] as f64 - 0.2);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let pyr = FeaturePyramid {
            levels: [
                ctx.constant(level(8)),
                ctx.constant(level(4)),
                ctx.constant(level(2)),
                ctx.constant(level(1)),
            ],
        };
        let out = fsam.forward(&ctx, &pyr, (32, 32)).unwrap();
        assert!(out.subtraction[0].to_array().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(out.g.shape(), vec![1, cu, 8, 8]);
        assert_eq!(out.p2_logits.shape(), vec![1, 1, 32, 32]);
        let ladder: Vec<_> = out.aligned.iter().map(|a| a.shape()[2]).collect();
        assert_eq!(ladder, vec![2, 4, 8]);
        let ladder: Vec<_> = out.subtraction.iter().map(|a| a.shape()[2]).collect();
        assert_eq!(ladder, vec![2, 4, 8]);
    }
}
