//! 2-d convolution: dense (im2col + GEMM) and depthwise (direct loops).

use ndarray::{ArrayD, IxDyn};

use crate::graph::Var;
use crate::real::{gemm_slices, Real};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1);
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "kernel {kh}x{kw} larger than padded input {h}x{w}"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.ho * self.wo
    }

    /// Input column for output column `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn src(&self, out: usize, k: usize, size: usize) -> Option<usize> {
        let i = (out * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < size).then_some(i as usize)
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let n = self.n();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * n;
                    for oy in 0..self.ho {
                        let dst = &mut col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        match self.src(oy, ky, self.h) {
                            None => dst.fill(T::zero()),
                            Some(iy) => {
                                let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.src(ox, kx, self.w) {
                                        Some(ix) => src_row[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], x: &mut [T]) {
        let n = self.n();
        for ci in 0..self.cin {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * n;
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.h) else {
                            continue;
                        };
                        let src = &col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for (ox, &v) in src.iter().enumerate() {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                dst_row[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'g, T: Real> Var<'g, T> {
    /// Dense convolution. `self` is `[B, Cin, H, W]`, `weight` is `[Cout, Cin, kh, kw]`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (b, cin, h, wd) = dims4(&x);
        let (cout, wcin, kh, kw) = dims4(&w);
        assert_eq!(cin, wcin, "conv2d channel mismatch: input {cin}, weight {wcin}");
        let geo = Geometry::new(cin, h, wd, kh, kw, stride, pad);
        let (k, n) = (geo.k(), geo.n());
        let xs = x.as_slice().expect("contiguous");
        let ws = w.as_slice().expect("contiguous");
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, cout, geo.ho, geo.wo]));
        {
            let os = out.as_slice_mut().expect("contiguous");
            let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
            for bi in 0..b {
                let xb = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                let colb: &[T] = if geo.is_pointwise() {
                    xb
                } else {
                    geo.im2col(xb, &mut col);
                    &col
                };
                gemm_slices(
                    cout,
                    k,
                    n,
                    ws,
                    false,
                    colb,
                    false,
                    T::zero(),
                    &mut os[bi * cout * n..(bi + 1) * cout * n],
                );
            }
            if let Some(bias) = &bias {
                let bv = bias.value();
                let bs = bv.as_slice().expect("contiguous");
                for (plane, &bb) in os.chunks_mut(n).zip(bs.iter().cycle()) {
                    for o in plane {
                        *o += bb;
                    }
                }
            }
        }
        let has_bias = bias.is_some();
        let parents: Vec<Var<'g, T>> = match bias {
            Some(bv) => vec![self, weight, bv],
            None => vec![self, weight],
        };
        self.graph.record(out, &parents, move |g| {
            let gs = g.as_slice().expect("contiguous");
            let xs = x.as_slice().expect("contiguous");
            let ws = w.as_slice().expect("contiguous");
            let mut gx = vec![T::zero(); b * cin * h * wd];
            let mut gw = vec![T::zero(); cout * k];
            let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
            let mut gcol = vec![T::zero(); k * n];
            for bi in 0..b {
                let gb = &gs[bi * cout * n..(bi + 1) * cout * n];
                let xb = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                let colb: &[T] = if geo.is_pointwise() {
                    xb
                } else {
                    geo.im2col(xb, &mut col);
                    &col
                };
                // dW += dY col^T
                gemm_slices(cout, n, k, gb, false, colb, true, T::one(), &mut gw);
                let gxb = &mut gx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                if geo.is_pointwise() {
                    gemm_slices(k, cout, n, ws, true, gb, false, T::zero(), gxb);
                } else {
                    gemm_slices(k, cout, n, ws, true, gb, false, T::zero(), &mut gcol);
                    geo.col2im(&gcol, gxb);
                }
            }
            let mut grads = vec![
                Some(ArrayD::from_shape_vec(IxDyn(&[b, cin, h, wd]), gx).expect("shape")),
                Some(ArrayD::from_shape_vec(IxDyn(&[cout, cin, kh, kw]), gw).expect("shape")),
            ];
            if has_bias {
                let mut gbias = vec![T::zero(); cout];
                for (i, plane) in gs.chunks(n).enumerate() {
                    gbias[i % cout] += plane.iter().copied().sum::<T>();
                }
                grads.push(Some(ArrayD::from_shape_vec(IxDyn(&[cout]), gbias).expect("shape")));
            }
            grads
        })
    }

    /// Depthwise convolution: `weight` is `[C, 1, kh, kw]`, one filter per channel.
    pub fn depthwise_conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (b, c, h, wd) = dims4(&x);
        let (wc, one, kh, kw) = dims4(&w);
        assert!(wc == c && one == 1, "depthwise weight must be [C,1,kh,kw]");
        let geo = Geometry::new(1, h, wd, kh, kw, stride, pad);
        let (ho, wo) = (geo.ho, geo.wo);
        let xs = x.as_slice().expect("contiguous");
        let ws = w.as_slice().expect("contiguous");
        let bias_vals: Option<Vec<T>> = bias.as_ref().map(|bv| bv.value().iter().copied().collect());
        let mut out = vec![T::zero(); b * c * ho * wo];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xs[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                let filt = &ws[ci * kh * kw..(ci + 1) * kh * kw];
                let dst = &mut out[(bi * c + ci) * ho * wo..(bi * c + ci + 1) * ho * wo];
                let b0 = bias_vals.as_ref().map_or(T::zero(), |bv| bv[ci]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b0;
                        for ky in 0..kh {
                            let Some(iy) = geo.src(oy, ky, h) else { continue };
                            for kx in 0..kw {
                                if let Some(ix) = geo.src(ox, kx, wd) {
                                    acc += plane[iy * wd + ix] * filt[ky * kw + kx];
                                }
                            }
                        }
                        dst[oy * wo + ox] = acc;
                    }
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[b, c, ho, wo]), out).expect("shape");
        let has_bias = bias.is_some();
        let parents: Vec<Var<'g, T>> = match bias {
            Some(bv) => vec![self, weight, bv],
            None => vec![self, weight],
        };
        self.graph.record(out, &parents, move |g| {
            let gs = g.as_slice().expect("contiguous");
            let xs = x.as_slice().expect("contiguous");
            let ws = w.as_slice().expect("contiguous");
            let mut gx = vec![T::zero(); b * c * h * wd];
            let mut gw = vec![T::zero(); c * kh * kw];
            let mut gb = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * h * wd;
                    let plane = &xs[off..off + h * wd];
                    let gplane = &mut gx[off..off + h * wd];
                    let filt = &ws[ci * kh * kw..(ci + 1) * kh * kw];
                    let gfilt = &mut gw[ci * kh * kw..(ci + 1) * kh * kw];
                    let go = &gs[(bi * c + ci) * ho * wo..(bi * c + ci + 1) * ho * wo];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = go[oy * wo + ox];
                            gb[ci] += gv;
                            for ky in 0..kh {
                                let Some(iy) = geo.src(oy, ky, h) else { continue };
                                for kx in 0..kw {
                                    if let Some(ix) = geo.src(ox, kx, wd) {
                                        gfilt[ky * kw + kx] += gv * plane[iy * wd + ix];
                                        gplane[iy * wd + ix] += gv * filt[ky * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                Some(ArrayD::from_shape_vec(IxDyn(&[b, c, h, wd]), gx).expect("shape")),
                Some(ArrayD::from_shape_vec(IxDyn(&[c, 1, kh, kw]), gw).expect("shape")),
            ];
            if has_bias {
                grads.push(Some(ArrayD::from_shape_vec(IxDyn(&[c]), gb).expect("shape")));
            }
            grads
        })
    }
}

pub(crate) fn dims4<T>(a: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}
