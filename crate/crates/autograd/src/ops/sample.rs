//! Spatial resampling: bilinear resize, adaptive average pooling and offset-field warping.

use ndarray::{ArrayD, IxDyn};

use crate::graph::Var;
use crate::ops::conv::dims4;
use crate::real::Real;

/// Source taps of a half-pixel-centred (align-corners false) bilinear resize along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn bilinear_taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: T::lit(src - lo as f64),
            }
        })
        .collect()
}

/// PyTorch-style adaptive pooling bins `[floor(i*n/m), ceil((i+1)*n/m))`.
fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

impl<'g, T: Real> Var<'g, T> {
    /// Bilinear resize of `[B, C, H, W]` to `out_h x out_w`, align-corners false.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'g, T> {
        let x = self.value();
        let (b, c, h, w) = dims4(&x);
        if (h, w) == (out_h, out_w) {
            return self;
        }
        let ty = bilinear_taps::<T>(h, out_h);
        let tx = bilinear_taps::<T>(w, out_w);
        let xs = x.as_slice().expect("contiguous");
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        for p in 0..b * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, t_y) in ty.iter().enumerate() {
                let (r0, r1) = (&src[t_y.lo * w..(t_y.lo + 1) * w], &src[t_y.hi * w..(t_y.hi + 1) * w]);
                let fy = t_y.frac;
                for (ox, t_x) in tx.iter().enumerate() {
                    let fx = t_x.frac;
                    let top = r0[t_x.lo] * (T::one() - fx) + r0[t_x.hi] * fx;
                    let bot = r1[t_x.lo] * (T::one() - fx) + r1[t_x.hi] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[b, c, out_h, out_w]), out).expect("shape");
        self.graph.record(out, &[self], move |g| {
            let gs = g.as_slice().expect("contiguous");
            let mut gx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let go = &gs[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, t_y) in ty.iter().enumerate() {
                    let fy = t_y.frac;
                    for (ox, t_x) in tx.iter().enumerate() {
                        let fx = t_x.frac;
                        let gv = go[oy * out_w + ox];
                        let (gt, gb) = (gv * (T::one() - fy), gv * fy);
                        dst[t_y.lo * w + t_x.lo] += gt * (T::one() - fx);
                        dst[t_y.lo * w + t_x.hi] += gt * fx;
                        dst[t_y.hi * w + t_x.lo] += gb * (T::one() - fx);
                        dst[t_y.hi * w + t_x.hi] += gb * fx;
                    }
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), gx).expect("shape"))]
        })
    }

    /// Adaptive average pooling of `[B, C, H, W]` to `out_h x out_w`.
    pub fn adaptive_avg_pool2d(self, out_h: usize, out_w: usize) -> Var<'g, T> {
        let x = self.value();
        let (b, c, h, w) = dims4(&x);
        let by = adaptive_bins(h, out_h);
        let bx = adaptive_bins(w, out_w);
        let xs = x.as_slice().expect("contiguous");
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        for p in 0..b * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1)) in by.iter().enumerate() {
                for (ox, &(x0, x1)) in bx.iter().enumerate() {
                    let mut s = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s += src[yy * w + xx];
                        }
                    }
                    let n = T::from_usize((y1 - y0) * (x1 - x0)).expect("count");
                    out[(p * out_h + oy) * out_w + ox] = s / n;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[b, c, out_h, out_w]), out).expect("shape");
        self.graph.record(out, &[self], move |g| {
            let gs = g.as_slice().expect("contiguous");
            let mut gx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1)) in by.iter().enumerate() {
                    for (ox, &(x0, x1)) in bx.iter().enumerate() {
                        let n = T::from_usize((y1 - y0) * (x1 - x0)).expect("count");
                        let gv = gs[(p * out_h + oy) * out_w + ox] / n;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                dst[yy * w + xx] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), gx).expect("shape"))]
        })
    }

    /// Samples `self` (`[B, C, H, W]`) at `(h + d_0, w + d_1)` for every pixel with a bilinear
    /// kernel; `offsets` is `[B, 2, H, W]` in pixels. Corners that fall outside the grid
    /// contribute zero. Offsets are clamped to `[-H, H] x [-W, W]`; clamped entries get no
    /// gradient.
    pub fn warp(self, offsets: Var<'g, T>) -> Var<'g, T> {
        let f = self.value();
        let d = offsets.value();
        let (b, c, h, w) = dims4(&f);
        let (db, two, dh, dw) = dims4(&d);
        assert!(
            db == b && two == 2 && dh == h && dw == w,
            "offset field {:?} does not match feature {:?}",
            d.shape(),
            f.shape()
        );
        let hw = h * w;
        let fs = f.as_slice().expect("contiguous");
        let ds = d.as_slice().expect("contiguous");
        let (hmax, wmax) = (T::from_usize(h).expect("h"), T::from_usize(w).expect("w"));
        // per (batch, pixel) sampling geometry
        let mut geo: Vec<Sample<T>> = Vec::with_capacity(b * hw);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let raw_y = ds[(bi * 2) * hw + i];
                    let raw_x = ds[(bi * 2 + 1) * hw + i];
                    let oy = raw_y.max(-hmax).min(hmax);
                    let ox = raw_x.max(-wmax).min(wmax);
                    let py = T::from_usize(y).expect("y") + oy;
                    let px = T::from_usize(x).expect("x") + ox;
                    let y0 = py.floor();
                    let x0 = px.floor();
                    geo.push(Sample {
                        y0: y0.to_isize().expect("finite offset"),
                        x0: x0.to_isize().expect("finite offset"),
                        fy: py - y0,
                        fx: px - x0,
                        pass_y: raw_y == oy,
                        pass_x: raw_x == ox,
                    });
                }
            }
        }
        let inside = move |yy: isize, xx: isize| -> Option<usize> {
            (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| yy as usize * w + xx as usize)
        };
        let mut out = vec![T::zero(); b * c * hw];
        for bi in 0..b {
            for i in 0..hw {
                let s = &geo[bi * hw + i];
                let corners = s.corners(inside);
                for ci in 0..c {
                    let plane = &fs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let mut acc = T::zero();
                    for (idx, wgt) in corners.iter().flatten() {
                        acc += plane[*idx] * *wgt;
                    }
                    out[(bi * c + ci) * hw + i] = acc;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).expect("shape");
        self.graph.record(out, &[self, offsets], move |g| {
            let gs = g.as_slice().expect("contiguous");
            let fs = f.as_slice().expect("contiguous");
            let mut gf = vec![T::zero(); b * c * hw];
            let mut gd = vec![T::zero(); b * 2 * hw];
            for bi in 0..b {
                for i in 0..hw {
                    let s = &geo[bi * hw + i];
                    let corners = s.corners(inside);
                    let mut gy = T::zero();
                    let mut gxo = T::zero();
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let gv = gs[base + i];
                        if gv == T::zero() {
                            continue;
                        }
                        let val = |k: usize| corners[k].map_or(T::zero(), |(idx, _)| fs[base + idx]);
                        let (v00, v01, v10, v11) = (val(0), val(1), val(2), val(3));
                        for (idx, wgt) in corners.iter().flatten() {
                            gf[base + *idx] += gv * *wgt;
                        }
                        let one = T::one();
                        gy += gv * ((v10 - v00) * (one - s.fx) + (v11 - v01) * s.fx);
                        gxo += gv * ((v01 - v00) * (one - s.fy) + (v11 - v10) * s.fy);
                    }
                    if s.pass_y {
                        gd[(bi * 2) * hw + i] = gy;
                    }
                    if s.pass_x {
                        gd[(bi * 2 + 1) * hw + i] = gxo;
                    }
                }
            }
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), gf).expect("shape")),
                Some(ArrayD::from_shape_vec(IxDyn(&[b, 2, h, w]), gd).expect("shape")),
            ]
        })
    }
}

struct Sample<T> {
    y0: isize,
    x0: isize,
    fy: T,
    fx: T,
    pass_y: bool,
    pass_x: bool,
}

impl<T: Real> Sample<T> {
    /// Order: (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1).
    fn corners(&self, inside: impl Fn(isize, isize) -> Option<usize>) -> [Option<(usize, T)>; 4] {
        let one = T::one();
        let w = [
            (one - self.fy) * (one - self.fx),
            (one - self.fy) * self.fx,
            self.fy * (one - self.fx),
            self.fy * self.fx,
        ];
        let pos = [
            (self.y0, self.x0),
            (self.y0, self.x0 + 1),
            (self.y0 + 1, self.x0),
            (self.y0 + 1, self.x0 + 1),
        ];
        let mut out = [None; 4];
        for k in 0..4 {
            out[k] = inside(pos[k].0, pos[k].1).map(|idx| (idx, w[k]));
        }
        out
    }
}
