//! Reshapes, permutations, slicing, concatenation and reductions.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::graph::Var;
use crate::real::Real;

impl<'g, T: Real> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {old:?} -> {shape:?}: {e}"));
        self.graph.record(out, &[self], move |g| {
            let gx = g.clone().into_shape_with_order(IxDyn(&old)).expect("gradient reshape");
            vec![Some(gx)]
        })
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let out = x.view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph.record(out, &[self], move |g| {
            let gx = g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned();
            vec![Some(gx)]
        })
    }

    /// Numpy-style broadcast to `shape`; the gradient is summed back.
    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        if x.shape() == shape {
            return self;
        }
        let old = x.shape().to_vec();
        let out = x
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {old:?} to {shape:?}"))
            .to_owned();
        self.graph
            .record(out, &[self], move |g| vec![Some(crate::ops::elementwise::sum_to_shape(g, &old))])
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let out = x.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        self.graph.record(out, &[self], move |g| {
            let mut gx = ArrayD::<T>::zeros(IxDyn(&shape));
            gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g);
            vec![Some(gx)]
        })
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        parts[0].graph.record(out, parts, move |g| {
            let mut offset = 0;
            sizes
                .iter()
                .map(|&s| {
                    let part = g.slice_axis(Axis(axis), Slice::from(offset..offset + s)).to_owned();
                    offset += s;
                    Some(part)
                })
                .collect()
        })
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.raw_dim();
        let out = ArrayD::from_elem(IxDyn(&[]), x.sum());
        self.graph.record(out, &[self], move |g| {
            let gv = *g.iter().next().expect("scalar grad");
            vec![Some(ArrayD::from_elem(shape, gv))]
        })
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum_all().scale(T::one() / T::from_usize(n).expect("count"))
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdim(self, axes: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let in_shape = x.raw_dim();
        let mut out = (*x).clone();
        for &ax in axes {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        self.graph.record(out, &[self], move |g| {
            let gx = g.broadcast(in_shape.clone()).expect("broadcast gradient").to_owned();
            vec![Some(gx)]
        })
    }

    pub fn mean_keepdim(self, axes: &[usize]) -> Var<'g, T> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_keepdim(axes).scale(T::one() / T::from_usize(count).expect("count"))
    }

    /// Sum over `axes`, dropping them.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'g, T> {
        let shape = self.shape();
        let kept: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        self.sum_keepdim(axes).reshape(&kept)
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'g, T> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(T::one() / T::from_usize(count).expect("count"))
    }
}
