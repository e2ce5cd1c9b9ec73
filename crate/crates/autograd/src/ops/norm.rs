//! Layer normalisation, batch normalisation (training statistics) and softmax.

use ndarray::{ArrayD, IxDyn};

use crate::graph::Var;
use crate::ops::conv::dims4;
use crate::real::Real;

/// Batch statistics produced by a training-mode batch norm, for running-average updates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    /// Number of values each statistic was computed over.
    pub count: usize,
}

impl<'g, T: Real> Var<'g, T> {
    /// Normalises over the last axis, then applies `gamma` and `beta` (both `[D]`).
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
        let x = self.value();
        let d = *x.shape().last().expect("rank >= 1");
        let rows = x.len() / d;
        let gv = gamma.value();
        let bv = beta.value();
        let (gs, bs) = (
            gv.as_slice().expect("contiguous").to_vec(),
            bv.as_slice().expect("contiguous").to_vec(),
        );
        let xs = x.as_slice().expect("contiguous");
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        let dn = T::from_usize(d).expect("width");
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = (var + eps).sqrt().recip();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                y[r * d + j] = xh * gs[j] + bs[j];
            }
        }
        let shape = x.shape().to_vec();
        let out = ArrayD::from_shape_vec(IxDyn(&shape), y).expect("shape");
        self.graph.record(out, &[self, gamma, beta], move |g| {
            let gs_out = g.as_slice().expect("contiguous");
            let mut gx = vec![T::zero(); rows * d];
            let mut ggamma = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            for r in 0..rows {
                let go = &gs_out[r * d..(r + 1) * d];
                let xh = &xhat[r * d..(r + 1) * d];
                let mut mean_dxh = T::zero();
                let mut mean_dxh_xh = T::zero();
                for j in 0..d {
                    let dxh = go[j] * gs[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[j];
                    ggamma[j] += go[j] * xh[j];
                    gbeta[j] += go[j];
                }
                mean_dxh /= dn;
                mean_dxh_xh /= dn;
                for j in 0..d {
                    let dxh = go[j] * gs[j];
                    gx[r * d + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                }
            }
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&shape), gx).expect("shape")),
                Some(ArrayD::from_shape_vec(IxDyn(&[d]), ggamma).expect("shape")),
                Some(ArrayD::from_shape_vec(IxDyn(&[d]), gbeta).expect("shape")),
            ]
        })
    }

    /// Training-mode batch norm over `(B, H, W)` for each channel of `[B, C, H, W]`.
    pub fn batch_norm_train(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> (Var<'g, T>, BatchStats<T>) {
        let x = self.value();
        let (b, c, h, w) = dims4(&x);
        let hw = h * w;
        let count = b * hw;
        let cn = T::from_usize(count).expect("count");
        let xs = x.as_slice().expect("contiguous");
        let gv: Vec<T> = gamma.value().iter().copied().collect();
        let bv: Vec<T> = beta.value().iter().copied().collect();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                mean[ci] += plane.iter().copied().sum::<T>();
            }
        }
        for m in &mut mean {
            *m /= cn;
        }
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                let m = mean[ci];
                var[ci] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
        }
        for v in &mut var {
            *v /= cn;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for i in off..off + hw {
                    let xh = (xs[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    y[i] = xh * gv[ci] + bv[ci];
                }
            }
        }
        let stats = BatchStats { mean, var, count };
        let shape = [b, c, h, w];
        let out = ArrayD::from_shape_vec(IxDyn(&shape), y).expect("shape");
        let var_out = self.graph.record(out, &[self, gamma, beta], move |g| {
            let gs = g.as_slice().expect("contiguous");
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    for i in off..off + hw {
                        ggamma[ci] += gs[i] * xhat[i];
                        gbeta[ci] += gs[i];
                    }
                }
            }
            // mean over the normalised axes of dxhat and dxhat * xhat
            let mean_dxh: Vec<T> = (0..c).map(|ci| gbeta[ci] * gv[ci] / cn).collect();
            let mean_dxh_xh: Vec<T> = (0..c).map(|ci| ggamma[ci] * gv[ci] / cn).collect();
            let mut gx = vec![T::zero(); b * c * hw];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    for i in off..off + hw {
                        let dxh = gs[i] * gv[ci];
                        gx[i] = inv_std[ci] * (dxh - mean_dxh[ci] - xhat[i] * mean_dxh_xh[ci]);
                    }
                }
            }
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&shape), gx).expect("shape")),
                Some(ArrayD::from_shape_vec(IxDyn(&[c]), ggamma).expect("shape")),
                Some(ArrayD::from_shape_vec(IxDyn(&[c]), gbeta).expect("shape")),
            ]
        });
        (var_out, stats)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_last(self) -> Var<'g, T> {
        let x = self.value();
        let d = *x.shape().last().expect("rank >= 1");
        let xs = x.as_slice().expect("contiguous");
        let mut y = vec![T::zero(); x.len()];
        for (src, dst) in xs.chunks(d).zip(y.chunks_mut(d)) {
            let m = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - m).exp();
                s += *o;
            }
            for o in dst.iter_mut() {
                *o /= s;
            }
        }
        let shape = x.shape().to_vec();
        let out = ArrayD::from_shape_vec(IxDyn(&shape), y).expect("shape");
        let y_keep = out.clone();
        self.graph.record(out, &[self], move |g| {
            let gs = g.as_slice().expect("contiguous");
            let ys = y_keep.as_slice().expect("contiguous");
            let mut gx = vec![T::zero(); ys.len()];
            for ((go, yy), dst) in gs.chunks(d).zip(ys.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: T = go.iter().zip(yy).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    dst[j] = yy[j] * (go[j] - dot);
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), gx).expect("shape"))]
        })
    }
}
