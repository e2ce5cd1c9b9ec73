//! Central finite-difference gradient checks in `f64`.

use ndarray::ArrayD;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};

/// Outcome of comparing analytic and numeric gradients over a set of coordinates.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckResult {
    /// `|a - n| / max(|a|, |n|)` over the checked coordinates (2-norms).
    pub rel_error: f64,
    pub max_abs_diff: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub checked: usize,
}

impl GradCheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }

    fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let diff = pairs.iter().map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let an = pairs.iter().map(|(a, _)| a * a).sum::<f64>().sqrt();
        let nn = pairs.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
        let max_abs_diff = pairs.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let denom = an.max(nn);
        let rel_error = if denom < 1e-12 { diff } else { diff / denom };
        GradCheckResult {
            rel_error,
            max_abs_diff,
            analytic_norm: an,
            numeric_norm: nn,
            checked: pairs.len(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates checked per input; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-6,
            max_coords: Some(64),
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn all_coords(mut self) -> Self {
        self.max_coords = None;
        self
    }

    pub fn coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }

    fn pick(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match self.max_coords {
            Some(k) if k < len => {
                let mut idx = sample(rng, len, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        }
    }

    /// Compares `analytic` against central differences of `eval` at `inputs`.
    pub fn compare(
        &self,
        inputs: &[ArrayD<f64>],
        analytic: &[ArrayD<f64>],
        mut eval: impl FnMut(&[ArrayD<f64>]) -> f64,
    ) -> GradCheckResult {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
        let mut pairs = Vec::new();
        for (k, grad) in analytic.iter().enumerate() {
            for idx in self.pick(inputs[k].len(), &mut rng) {
                let orig = inputs[k].as_slice().expect("contiguous")[idx];
                work[k].as_slice_mut().expect("contiguous")[idx] = orig + self.eps;
                let up = eval(&work);
                work[k].as_slice_mut().expect("contiguous")[idx] = orig - self.eps;
                let down = eval(&work);
                work[k].as_slice_mut().expect("contiguous")[idx] = orig;
                let numeric = (up - down) / (2.0 * self.eps);
                pairs.push((grad.as_slice().expect("contiguous")[idx], numeric));
            }
        }
        GradCheckResult::from_pairs(&pairs)
    }

    /// Directional derivative along `n_dirs` random directions spanning all inputs at once.
    pub fn directional(
        &self,
        inputs: &[ArrayD<f64>],
        analytic: &[ArrayD<f64>],
        n_dirs: usize,
        mut eval: impl FnMut(&[ArrayD<f64>]) -> f64,
    ) -> GradCheckResult {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let mut pairs = Vec::new();
        for _ in 0..n_dirs {
            let dirs: Vec<ArrayD<f64>> = inputs.iter().map(|x| x.mapv(|_| rng.random_range(-1.0..1.0))).collect();
            let along = |s: f64| -> Vec<ArrayD<f64>> { inputs.iter().zip(&dirs).map(|(x, d)| x + &(d * s)).collect() };
            let numeric = (eval(&along(self.eps)) - eval(&along(-self.eps))) / (2.0 * self.eps);
            let a: f64 = analytic.iter().zip(&dirs).map(|(g, d)| (g * d).sum()).sum();
            pairs.push((a, numeric));
        }
        GradCheckResult::from_pairs(&pairs)
    }

    /// Builds `f` on fresh graphs with every input as a tracked leaf and checks the gradient of
    /// its (scalar) output with respect to all inputs.
    pub fn run<F>(&self, inputs: &[ArrayD<f64>], f: F) -> GradCheckResult
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
    {
        let analytic = analytic_gradient(inputs, &f);
        self.compare(inputs, &analytic, |xs| evaluate(xs, &f))
    }
}

/// Value of `f` at `inputs`, without recording pullbacks.
pub fn evaluate<F>(inputs: &[ArrayD<f64>], f: &F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let leaves: Vec<Var<'_, f64>> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    f(&g, &leaves).sum_all().item()
}

/// Gradient of `sum(f(inputs))` with respect to each input.
pub fn analytic_gradient<F>(inputs: &[ArrayD<f64>], f: &F) -> Vec<ArrayD<f64>>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let leaves: Vec<Var<'_, f64>> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&g, &leaves).sum_all();
    let grads = g.backward(out);
    leaves
        .iter()
        .zip(inputs)
        .map(|(l, x)| grads.get(*l).cloned().unwrap_or_else(|| ArrayD::zeros(x.raw_dim())))
        .collect()
}
