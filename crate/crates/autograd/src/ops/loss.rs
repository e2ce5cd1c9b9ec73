//! Numerically stable logistic losses.

use ndarray::{ArrayD, Zip};

use crate::graph::Var;
use crate::ops::elementwise::sigmoid;
use crate::real::Real;

impl<'g, T: Real> Var<'g, T> {
    /// Pointwise binary cross-entropy between `sigmoid(self)` and a constant `target`:
    /// `max(z, 0) - z t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(self, target: &ArrayD<T>) -> Var<'g, T> {
        let z = self.value();
        assert_eq!(z.shape(), target.shape(), "bce target shape");
        let t = target.clone();
        let mut out = ArrayD::<T>::zeros(z.raw_dim());
        Zip::from(&mut out).and(&*z).and(&t).for_each(|o, &zv, &tv| {
            *o = zv.max(T::zero()) - zv * tv + (-zv.abs()).exp().ln_1p();
        });
        self.graph.record(out, &[self], move |g| {
            let mut dz = ArrayD::<T>::zeros(z.raw_dim());
            Zip::from(&mut dz)
                .and(g)
                .and(&*z)
                .and(&t)
                .for_each(|d, &gv, &zv, &tv| *d = gv * (sigmoid(zv) - tv));
            vec![Some(dz)]
        })
    }
}
