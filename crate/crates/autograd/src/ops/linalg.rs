//! Batched matrix products and dense layers.

use ndarray::{ArrayD, Axis, IxDyn};

use crate::graph::Var;
use crate::real::{gemm_slices, Real};

/// Batched product of row-major `[batch, r, c]` buffers with optional transposes.
fn bmm_raw<T: Real>(a: &ArrayD<T>, trans_a: bool, b: &ArrayD<T>, trans_b: bool) -> ArrayD<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(sa.len() == 3 && sb.len() == 3, "bmm expects 3-d operands, got {sa:?} and {sb:?}");
    assert_eq!(sa[0], sb[0], "bmm batch mismatch");
    let batch = sa[0];
    let (m, ka) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    assert_eq!(ka, kb, "bmm inner dimension mismatch: {sa:?} x {sb:?}");
    let a_s = a.as_slice().expect("contiguous");
    let b_s = b.as_slice().expect("contiguous");
    let mut out = ArrayD::<T>::zeros(IxDyn(&[batch, m, n]));
    let o_s = out.as_slice_mut().expect("contiguous");
    let (la, lb, lo) = (m * ka, ka * n, m * n);
    for i in 0..batch {
        gemm_slices(
            m,
            ka,
            n,
            &a_s[i * la..(i + 1) * la],
            trans_a,
            &b_s[i * lb..(i + 1) * lb],
            trans_b,
            T::zero(),
            &mut o_s[i * lo..(i + 1) * lo],
        );
    }
    out
}

impl<'g, T: Real> Var<'g, T> {
    /// `op(a) @ op(b)` over a shared leading batch dimension.
    pub fn bmm(self, other: Var<'g, T>, trans_a: bool, trans_b: bool) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = bmm_raw(&a, trans_a, &b, trans_b);
        self.graph.record(out, &[self, other], move |g| {
            let (ga, gb) = match (trans_a, trans_b) {
                (false, false) => (bmm_raw(g, false, &b, true), bmm_raw(&a, true, g, false)),
                (false, true) => (bmm_raw(g, false, &b, false), bmm_raw(g, true, &a, false)),
                (true, false) => (bmm_raw(&b, false, g, true), bmm_raw(&a, false, g, false)),
                (true, true) => (bmm_raw(&b, true, g, true), bmm_raw(g, true, &a, true)),
            };
            vec![Some(ga), Some(gb)]
        })
    }

    /// `x @ w^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let xs = x.shape().to_vec();
        let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
        assert_eq!(*xs.last().expect("rank >= 1"), in_f, "linear input width");
        let rows = x.len() / in_f;
        let mut y = vec![T::zero(); rows * out_f];
        gemm_slices(
            rows,
            in_f,
            out_f,
            x.as_slice().expect("contiguous"),
            false,
            w.as_slice().expect("contiguous"),
            true,
            T::zero(),
            &mut y,
        );
        if let Some(b) = &bias {
            let bv = b.value();
            let bs = bv.as_slice().expect("contiguous");
            for row in y.chunks_mut(out_f) {
                for (o, &bb) in row.iter_mut().zip(bs) {
                    *o += bb;
                }
            }
        }
        let mut ys = xs.clone();
        *ys.last_mut().expect("rank >= 1") = out_f;
        let out = ArrayD::from_shape_vec(IxDyn(&ys), y).expect("linear shape");
        let parents: Vec<Var<'g, T>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        let has_bias = parents.len() == 3;
        self.graph.record(out, &parents, move |g| {
            let gs = g.as_slice().expect("contiguous");
            let mut gx = vec![T::zero(); rows * in_f];
            gemm_slices(
                rows,
                out_f,
                in_f,
                gs,
                false,
                w.as_slice().expect("contiguous"),
                false,
                T::zero(),
                &mut gx,
            );
            let mut gw = vec![T::zero(); out_f * in_f];
            gemm_slices(
                out_f,
                rows,
                in_f,
                gs,
                true,
                x.as_slice().expect("contiguous"),
                false,
                T::zero(),
                &mut gw,
            );
            let mut grads = vec![
                Some(ArrayD::from_shape_vec(IxDyn(&xs), gx).expect("shape")),
                Some(ArrayD::from_shape_vec(IxDyn(&[out_f, in_f]), gw).expect("shape")),
            ];
            if has_bias {
                let g2 = g.view().into_shape_with_order((rows, out_f)).expect("2-d view");
                grads.push(Some(g2.sum_axis(Axis(0)).into_dyn()));
            }
            grads
        })
    }
}
