use ndarray::{ArrayD, Zip};
use pstnet_autograd::{ParamId, ParamStore, Real};

/// Step decay: `base * decay_rate^(epoch / decay_every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.decay_every) as i32;
        // dividing by the inverse keeps decimal rates exact (1e-4 / 100 == 1e-6, 1e-4 * 0.01 is not)
        self.base / (1.0 / self.decay_rate).powi(k)
    }
}

pub fn grad_norm<T: Real>(grads: &[(ParamId, ArrayD<T>)]) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients jointly when their global norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [(ParamId, ArrayD<T>)], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / (norm + 1e-6));
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    /// First and second moments, indexed by parameter; `None` until the parameter first has a gradient.
    pub m: Vec<Option<ArrayD<T>>>,
    pub v: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// One update of the parameters that received gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, ArrayD<T>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        let decay = T::lit(1.0 - lr * self.weight_decay);
        for (id, g) in grads {
            let m = self.m[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = store.get_mut(*id);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p = *p * decay - step * *m / ((*v * inv_bc2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use pstnet_autograd::Role;

    #[test]
    fn schedule_boundaries() {
        let s = LrSchedule {
            base: 1e-4,
            decay_rate: 0.1,
            decay_every: 45,
        };
        assert_eq!(s.at(0), 1e-4);
        assert_eq!(s.at(44), 1e-4);
        assert_eq!(s.at(45), 1e-5);
        assert_eq!(s.at(90), 1e-6);
        assert_eq!(s.at(134), 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![
            (ParamId(0), ArrayD::from_elem(IxDyn(&[4]), 3.0f64)),
            (ParamId(1), ArrayD::from_elem(IxDyn(&[1]), 4.0)),
        ];
        let before = clip_grad_norm(&mut g, 0.5);
        assert!((before - (36.0f64 + 16.0).sqrt()).abs() < 1e-12);
        assert!(grad_norm(&g) <= 0.5 + 1e-6);
        let mut small = vec![(ParamId(0), ArrayD::from_elem(IxDyn(&[1]), 0.1f64))];
        clip_grad_norm(&mut small, 0.5);
        assert_eq!(small[0].1[[0]], 0.1);
    }

    /// First step from zero moments moves each coordinate by `lr * sign(g)` (up to eps), after
    /// the decoupled decay `p * (1 - lr * wd)`.
    #[test]
    fn first_adamw_step_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert(
            "w",
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap(),
            Role::Trainable,
        );
        let mut opt = AdamW::new(store.len(), 0.1);
        let g = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -5.0, 0.0]).unwrap();
        opt.step(&mut store, &[(id, g)], 0.01);
        let p = store.get(id);
        let expect = [1.0 * 0.999 - 0.01, -2.0 * 0.999 + 0.01, 0.5 * 0.999];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", ArrayD::from_elem(IxDyn(&[2]), 3.0), Role::Trainable);
        let mut opt = AdamW::new(1, 0.0);
        for _ in 0..2000 {
            let g = store.get(id).mapv(|w| 2.0 * (w - 1.0));
            opt.step(&mut store, &[(id, g)], 0.01);
        }
        assert!(store.get(id).iter().all(|w| (w - 1.0).abs() < 1e-3));
    }
}
