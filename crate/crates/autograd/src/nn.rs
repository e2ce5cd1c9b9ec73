//! Forward context and the standard layers built on top of the tape.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

use crate::graph::{Gradients, Graph, Var};
use crate::params::{Init, ParamBuilder, ParamId, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending replacement of a buffer (running statistics), applied after the step.
#[derive(Debug, Clone)]
pub struct BufferUpdate<T> {
    pub id: ParamId,
    pub value: ArrayD<T>,
}

/// Binds a parameter store to one graph for the duration of a forward pass.
pub struct Ctx<'g, T: Real> {
    pub graph: &'g Graph<T>,
    pub store: &'g ParamStore<T>,
    pub mode: Mode,
    track_params: bool,
    bound: RefCell<HashMap<ParamId, usize>>,
    updates: RefCell<Vec<BufferUpdate<T>>>,
}

impl<'g, T: Real> Ctx<'g, T> {
    /// Parameter gradients are tracked in training mode only.
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            graph,
            store,
            mode,
            track_params: mode == Mode::Train,
            bound: RefCell::new(HashMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn track_params(mut self, on: bool) -> Self {
        self.track_params = on;
        self
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Leaf node for a parameter; repeated calls share one node.
    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var {
                graph: self.graph,
                id: node,
            };
        }
        let v = self.graph.leaf_shared(self.store.shared(id), self.track_params);
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    pub fn constant(&self, value: ArrayD<T>) -> Var<'g, T> {
        self.graph.constant(value)
    }

    pub fn scalar(&self, v: T) -> Var<'g, T> {
        self.graph.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn push_update(&self, update: BufferUpdate<T>) {
        self.updates.borrow_mut().push(update);
    }

    pub fn take_updates(&self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }

    /// Gradients of every parameter bound during the forward pass, in parameter order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, ArrayD<T>)> {
        let mut out: Vec<(ParamId, ArrayD<T>)> = self
            .bound
            .borrow()
            .iter()
            .filter_map(|(&pid, &node)| grads.by_id(node).map(|g| (pid, g.clone())))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }
}

pub fn apply_updates<T: Real>(store: &mut ParamStore<T>, updates: Vec<BufferUpdate<T>>) {
    for u in updates {
        store.set(u.id, u.value);
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, din: usize, dout: usize, init: Init) -> Self {
        let mut pb = pb.sub(name);
        Linear {
            weight: pb.param("weight", &[dout, din], init),
            bias: Some(pb.param("bias", &[dout], Init::Zeros)),
        }
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.linear(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

/// Geometry of a [`Conv2d`].
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self::new(cin, cout, 1, 1, 0)
    }

    /// Stride 1 with "same" padding for odd kernels.
    pub fn same(cin: usize, cout: usize, kernel: usize) -> Self {
        Self::new(cin, cout, kernel, 1, kernel / 2)
    }
}

impl Conv2d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, spec: ConvSpec, init: Init) -> Self {
        let mut pb = pb.sub(name);
        let k = spec.kernel;
        Conv2d {
            weight: pb.param("weight", &[spec.cout, spec.cin, k, k], init),
            bias: Some(pb.param("bias", &[spec.cout], Init::Zeros)),
            stride: spec.stride,
            pad: spec.pad,
            depthwise: false,
        }
    }

    /// Zero-initialised weights and bias.
    pub fn zeros<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, spec: ConvSpec) -> Self {
        Self::new(pb, name, spec, Init::Zeros)
    }

    pub fn depthwise<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, kernel: usize, init: Init) -> Self {
        let mut pb = pb.sub(name);
        Conv2d {
            weight: pb.param("weight", &[channels, 1, kernel, kernel], init),
            bias: Some(pb.param("bias", &[channels], Init::Zeros)),
            stride: 1,
            pad: kernel / 2,
            depthwise: true,
        }
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        if self.depthwise {
            x.depthwise_conv2d(w, b, self.stride, self.pad)
        } else {
            x.conv2d(w, b, self.stride, self.pad)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        let mut pb = pb.sub(name);
        LayerNorm {
            gamma: pb.param("weight", &[dim], Init::Ones),
            beta: pb.param("bias", &[dim], Init::Zeros),
            eps: 1e-6,
        }
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm(ctx.param(self.gamma), ctx.param(self.beta), T::lit(self.eps))
    }
}

/// Batch normalisation over `[B, C, H, W]` with running statistics (momentum 0.1).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut pb = pb.sub(name);
        BatchNorm2d {
            gamma: pb.param("weight", &[channels], Init::Ones),
            beta: pb.param("bias", &[channels], Init::Zeros),
            running_mean: pb.buffer("running_mean", ArrayD::zeros(IxDyn(&[channels]))),
            running_var: pb.buffer("running_var", ArrayD::ones(IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        let c = gamma.shape()[0];
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(gamma, beta, T::lit(self.eps));
                let m = T::lit(self.momentum);
                let keep = T::one() - m;
                let rm = ctx.store.get(self.running_mean);
                let rv = ctx.store.get(self.running_var);
                let unbias = if stats.count > 1 {
                    T::from_usize(stats.count).expect("n") / T::from_usize(stats.count - 1).expect("n")
                } else {
                    T::one()
                };
                let new_mean: Vec<T> = rm.iter().zip(&stats.mean).map(|(&r, &b)| keep * r + m * b).collect();
                let new_var: Vec<T> = rv.iter().zip(&stats.var).map(|(&r, &b)| keep * r + m * b * unbias).collect();
                ctx.push_update(BufferUpdate {
                    id: self.running_mean,
                    value: ArrayD::from_shape_vec(IxDyn(&[c]), new_mean).expect("shape"),
                });
                ctx.push_update(BufferUpdate {
                    id: self.running_var,
                    value: ArrayD::from_shape_vec(IxDyn(&[c]), new_var).expect("shape"),
                });
                y
            }
            Mode::Eval => {
                let eps = T::lit(self.eps);
                let inv_std = ctx.store.get(self.running_var).mapv(|v| (v + eps).sqrt().recip());
                let mean = ctx.store.get(self.running_mean).clone();
                let scale = gamma.mul(ctx.constant(inv_std));
                let shift = beta.sub(scale.mul(ctx.constant(mean)));
                x.mul(scale.reshape(&[1, c, 1, 1])).add(shift.reshape(&[1, c, 1, 1]))
            }
        }
    }
}
