//! Frequency characteristic attention: a channel affinity whose query is a multispectral
//! descriptor built from 2-D DCT components of an axis-pooled feature map.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayD, ArrayView3, IxDyn};
use pstnet_autograd::{Conv2d, ConvSpec, Ctx, Init, Linear, ParamBuilder, ParamId, Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{conv, global_avg_pool, LogitHead, LINEAR_INIT};

/// DCT-II basis `cos(pi*u*(h+1/2)/H) * cos(pi*v*(w+1/2)/W)`.
pub fn dct_basis(h: usize, w: usize, u: usize, v: usize) -> Result<Array2<f64>> {
    if u >= h || v >= w {
        return Err(Error::Shape(format!("DCT index ({u}, {v}) outside a {h}x{w} grid")));
    }
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        (PI * u as f64 * (i as f64 + 0.5) / h as f64).cos() * (PI * v as f64 * (j as f64 + 0.5) / w as f64).cos()
    }))
}

/// Per-channel projection of `x` (`[C, H, W]`) onto basis `(u, v)`.
pub fn dct2d(x: ArrayView3<'_, f64>, u: usize, v: usize) -> Result<Array1<f64>> {
    let (c, h, w) = x.dim();
    let basis = dct_basis(h, w, u, v)?;
    Ok(Array1::from_shape_fn(c, |ch| (&x.index_axis(ndarray::Axis(0), ch) * &basis).sum()))
}

/// The first `n` indices of a `grid x grid` block in JPEG zigzag order.
pub fn zigzag(n: usize, grid: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(grid * grid);
    for s in 0..(2 * grid - 1) {
        let lo = s.saturating_sub(grid - 1);
        let hi = s.min(grid - 1);
        if s % 2 == 0 {
            // up-right: row descending
            for u in (lo..=hi).rev() {
                out.push((u, s - u));
            }
        } else {
            for u in lo..=hi {
                out.push((u, s - u));
            }
        }
    }
    out.truncate(n);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcamConfig {
    pub n_groups: usize,
    /// Side of the grid the query map is pooled to before the transform.
    pub pool_size: usize,
    /// Explicit `(u, v)` components; zigzag-lowest when absent.
    pub components: Option<Vec<(usize, usize)>>,
}

impl Default for FcamConfig {
    fn default() -> Self {
        FcamConfig {
            n_groups: 16,
            pool_size: 7,
            components: None,
        }
    }
}

impl FcamConfig {
    pub fn plan(&self) -> DctPlan {
        DctPlan {
            components: self.components.clone().unwrap_or_else(|| zigzag(self.n_groups, self.pool_size)),
            pool_size: self.pool_size,
        }
    }
}

/// Which DCT component each channel group uses.
#[derive(Debug, Clone, PartialEq)]
pub struct DctPlan {
    pub components: Vec<(usize, usize)>,
    pub pool_size: usize,
}

impl DctPlan {
    pub fn n_groups(&self) -> usize {
        self.components.len()
    }

    pub fn group_channels(&self, channels: usize) -> usize {
        channels / self.n_groups()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let n = self.n_groups();
        if n == 0 || !channels.is_multiple_of(n) {
            return Err(Error::Config(format!("{n} DCT groups do not divide {channels} channels")));
        }
        for (i, a) in self.components.iter().enumerate() {
            if a.0 >= self.pool_size || a.1 >= self.pool_size {
                return Err(Error::Config(format!("component {a:?} outside the {0}x{0} grid", self.pool_size)));
            }
            if self.components[..i].contains(a) {
                return Err(Error::Config(format!("component {a:?} listed twice")));
            }
        }
        Ok(())
    }

    /// `[C, P*P]` table holding, for each channel, the flattened basis of its group.
    pub fn filters<T: Real>(&self, channels: usize) -> Result<ArrayD<T>> {
        self.validate(channels)?;
        let p = self.pool_size;
        let per = self.group_channels(channels);
        let mut out = ArrayD::zeros(IxDyn(&[channels, p * p]));
        for (g, &(u, v)) in self.components.iter().enumerate() {
            let basis = dct_basis(p, p, u, v)?;
            for c in g * per..(g + 1) * per {
                for (k, b) in basis.iter().enumerate() {
                    out[[c, k]] = T::lit(*b);
                }
            }
        }
        Ok(out)
    }
}

/// Multispectral query of `qp` (`[B, C, P, P]`): group `i` of the channels is projected on
/// component `i`. `filters` comes from [`DctPlan::filters`].
pub fn multispectral_query<'g, T: Real>(qp: Var<'g, T>, filters: &ArrayD<T>) -> Result<Var<'g, T>> {
    let (b, c, h, w) = qp.dims4();
    if filters.shape() != [c, h * w] {
        return Err(Error::Shape(format!(
            "query map {:?} does not match DCT filters {:?}",
            qp.shape(),
            filters.shape()
        )));
    }
    let f = qp
        .graph()
        .constant(filters.clone().into_shape_with_order(IxDyn(&[1, c, h * w])).expect("shape"));
    Ok(qp.reshape(&[b, c, h * w]).mul(f).sum_axes(&[2]))
}

/// Row/column context: width-pooled and height-pooled descriptors, each passed through a
/// channel linear map, replicated back over the pooled axis, concatenated and fused by a 1x1
/// projection.
#[derive(Debug, Clone)]
pub struct PositionalPool {
    pub along_w: Linear,
    pub along_h: Linear,
    pub fuse: Conv2d,
}

/// Branches of [`PositionalPool`] before fusion, both `[B, C, H, W]`.
pub struct PoolBranches<'g, T: Real> {
    pub rows: Var<'g, T>,
    pub cols: Var<'g, T>,
}

impl PositionalPool {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut pb = pb.sub(name);
        PositionalPool {
            along_w: Linear::new(&mut pb, "pool_w", channels, channels, LINEAR_INIT),
            along_h: Linear::new(&mut pb, "pool_h", channels, channels, LINEAR_INIT),
            fuse: conv(&mut pb, "fuse", ConvSpec::pointwise(2 * channels, channels)),
        }
    }

    pub fn branches<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> PoolBranches<'g, T> {
        let shape = x.shape();
        // [B, C, H, 1] -> channels last for the linear map
        let cv_w = x.mean_keepdim(&[3]).permute(&[0, 2, 3, 1]);
        let cv_w = self.along_w.forward(ctx, cv_w).permute(&[0, 3, 1, 2]);
        let cv_h = x.mean_keepdim(&[2]).permute(&[0, 2, 3, 1]);
        let cv_h = self.along_h.forward(ctx, cv_h).permute(&[0, 3, 1, 2]);
        PoolBranches {
            rows: cv_w.broadcast_to(&shape),
            cols: cv_h.broadcast_to(&shape),
        }
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let br = self.branches(ctx, x);
        self.fuse.forward(ctx, Var::concat(&[br.rows, br.cols], 1))
    }
}

/// `A[b, i, j] = softmax_i(Q_i K_j)`: each column sums to one.
pub fn affinity<'g, T: Real>(q: Var<'g, T>, k: Var<'g, T>) -> Var<'g, T> {
    let s = q.shape();
    let (b, c) = (s[0], s[1]);
    let logits = q.reshape(&[b, c, 1]).bmm(k.reshape(&[b, 1, c]), false, false);
    logits.permute(&[0, 2, 1]).softmax_last().permute(&[0, 2, 1])
}

/// `alpha * (A V) + x` with `K = GAP(x)` and `V = x` flattened over space.
pub fn full_attention<'g, T: Real>(x: Var<'g, T>, q: Var<'g, T>, alpha: Var<'g, T>) -> Result<Var<'g, T>> {
    let (b, c, h, w) = x.dims4();
    if q.shape() != [b, c] {
        return Err(Error::Shape(format!("query {:?} for feature {:?}", q.shape(), x.shape())));
    }
    let a = affinity(q, global_avg_pool(x));
    let av = a.bmm(x.reshape(&[b, c, h * w]), false, false).reshape(&[b, c, h, w]);
    Ok(av.mul(alpha).add(x))
}

/// Output of [`Fcam::forward`].
pub struct FcamOutput<'g, T: Real> {
    pub feature: Var<'g, T>,
    pub p1_logits: Var<'g, T>,
}

#[derive(Debug, Clone)]
pub struct Fcam {
    pub pool: PositionalPool,
    pub plan: DctPlan,
    pub alpha: ParamId,
    pub head: LogitHead,
    channels: usize,
}

impl Fcam {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, config: &FcamConfig) -> Result<Self> {
        let plan = config.plan();
        plan.validate(channels)?;
        let mut pb = pb.sub(name);
        Ok(Fcam {
            pool: PositionalPool::new(&mut pb, "pool", channels),
            plan,
            alpha: pb.param("alpha", &[1], Init::Zeros),
            head: LogitHead::new(&mut pb, "head", channels),
            channels,
        })
    }

    pub fn query<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let p = self.plan.pool_size;
        let qp = self.pool.forward(ctx, x).adaptive_avg_pool2d(p, p);
        multispectral_query(qp, &self.plan.filters::<T>(self.channels)?)
    }

    /// Enhanced feature plus the auxiliary logits upsampled to `out_size`.
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>, out_size: (usize, usize)) -> Result<FcamOutput<'g, T>> {
        let q = self.query(ctx, x)?;
        let feature = full_attention(x, q, ctx.param(self.alpha))?;
        Ok(FcamOutput {
            p1_logits: self.head.forward(ctx, feature, out_size),
            feature,
        })
    }
}
