//! Broadcasting arithmetic and pointwise nonlinearities.

use ndarray::{ArrayD, Axis, Zip};

use crate::graph::Var;
use crate::real::Real;

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
pub fn sum_to_shape<T: Real>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut r = g.clone();
    while r.ndim() > shape.len() {
        r = r.sum_axis(Axis(0));
    }
    for (ax, &dim) in shape.iter().enumerate() {
        if dim == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    assert_eq!(r.shape(), shape, "cannot reduce gradient to shape {shape:?}");
    r
}

// Named methods rather than operator traits: chains like `a.mul(b).add(c)` read in graph order.
#[allow(clippy::should_implement_trait)]
impl<'g, T: Real> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = &*a + &*b;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.record(out, &[self, other], move |g| {
            vec![Some(sum_to_shape(g, &sa)), Some(sum_to_shape(g, &sb))]
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = &*a - &*b;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.record(out, &[self, other], move |g| {
            let gb = sum_to_shape(g, &sb).mapv(|v| -v);
            vec![Some(sum_to_shape(g, &sa)), Some(gb)]
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = &*a * &*b;
        self.graph.record(out, &[self, other], move |g| {
            let ga = sum_to_shape(&(g * &*b), a.shape());
            let gb = sum_to_shape(&(g * &*a), b.shape());
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = &*a / &*b;
        self.graph.record(out, &[self, other], move |g| {
            let ga = sum_to_shape(&(g / &*b), a.shape());
            let gb_full = -(g * &*a) / (&*b * &*b);
            let gb = sum_to_shape(&gb_full, b.shape());
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let out = self.value().mapv(|v| v * c);
        self.graph.record(out, &[self], move |g| vec![Some(g.mapv(|v| v * c))])
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let out = self.value().mapv(|v| v + c);
        self.graph.record(out, &[self], move |g| vec![Some(g.clone())])
    }

    /// Applies `f` pointwise with derivative `df(x, y)` where `y = f(x)`.
    pub fn map_pointwise(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let x = self.value();
        let y = x.mapv(f);
        let y_keep = y.clone();
        self.graph.record(y, &[self], move |g| {
            let mut dx = ArrayD::<T>::zeros(x.raw_dim());
            Zip::from(&mut dx)
                .and(g)
                .and(&*x)
                .and(&y_keep)
                .for_each(|d, &gv, &xv, &yv| *d = gv * df(xv, yv));
            vec![Some(dx)]
        })
    }

    pub fn abs(self) -> Var<'g, T> {
        self.map_pointwise(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn exp(self) -> Var<'g, T> {
        self.map_pointwise(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.map_pointwise(|x| x.ln(), |x, _| x.recip())
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.map_pointwise(|x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn square(self) -> Var<'g, T> {
        self.map_pointwise(|x| x * x, |x, _| x + x)
    }

    pub fn powf(self, p: T) -> Var<'g, T> {
        self.map_pointwise(
            move |x| x.powf(p),
            move |x, _| {
                if p == T::zero() {
                    T::zero()
                } else {
                    p * x.powf(p - T::one())
                }
            },
        )
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.map_pointwise(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    T::one()
                }
            },
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.map_pointwise(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(self) -> Var<'g, T> {
        self.map_pointwise(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g, T> {
        self.map_pointwise(gelu, gelu_grad)
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T, _y: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}
