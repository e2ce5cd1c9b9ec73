//! Cross perception: fuses the low-level attention feature with the aligned global feature
//! through alignment, DCT-free channel attention and an absolute difference.

use pstnet_autograd::{Ctx, Init, ParamBuilder, ParamId, Real, Var};

use crate::error::{Error, Result};
use crate::fcam::{full_attention, PositionalPool};
use crate::fsam::FeatureAlign;
use crate::layers::{global_avg_pool, LogitHead};

/// `|r1 - r2|`.
pub fn cross_subtract<'g, T: Real>(r1: Var<'g, T>, r2: Var<'g, T>) -> Result<Var<'g, T>> {
    if r1.shape() != r2.shape() {
        return Err(Error::Shape(format!("cross inputs {:?} vs {:?}", r1.shape(), r2.shape())));
    }
    Ok(r1.sub(r2).abs())
}

/// Channel attention of the frequency module with the transform replaced by global average
/// pooling of the positional-pool map.
#[derive(Debug, Clone)]
pub struct FcaNoDct {
    pub pool: PositionalPool,
    pub alpha: ParamId,
}

impl FcaNoDct {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut pb = pb.sub(name);
        FcaNoDct {
            pool: PositionalPool::new(&mut pb, "pool", channels),
            alpha: pb.param("alpha", &[1], Init::Zeros),
        }
    }

    pub fn query<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        global_avg_pool(self.pool.forward(ctx, x))
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        full_attention(x, self.query(ctx, x), ctx.param(self.alpha))
    }
}

pub struct CpmOutput<'g, T: Real> {
    pub z: Var<'g, T>,
    pub p3_logits: Var<'g, T>,
}

#[derive(Debug, Clone)]
pub struct Cpm {
    pub align: FeatureAlign,
    pub attention: FcaNoDct,
    pub head: LogitHead,
}

impl Cpm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut pb = pb.sub(name);
        Cpm {
            align: FeatureAlign::new(&mut pb, "align", channels),
            attention: FcaNoDct::new(&mut pb, "attn", channels),
            head: LogitHead::new(&mut pb, "head", channels),
        }
    }

    /// `Z = att(fa(r1, r2)) + |r1 - r2|`, both inputs at the same resolution.
    pub fn fuse<'g, T: Real>(&self, ctx: &Ctx<'g, T>, r1: Var<'g, T>, r2: Var<'g, T>) -> Result<Var<'g, T>> {
        let diff = cross_subtract(r1, r2)?;
        let aligned = self.align.forward(ctx, r1, r2)?;
        Ok(self.attention.forward(ctx, aligned)?.add(diff))
    }

    pub fn forward<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, T>,
        r1: Var<'g, T>,
        r2: Var<'g, T>,
        out_size: (usize, usize),
    ) -> Result<CpmOutput<'g, T>> {
        let z = self.fuse(ctx, r1, r2)?;
        Ok(CpmOutput {
            p3_logits: self.head.forward(ctx, z, out_size),
            z,
        })
    }
}

/// `p3 + w * (p1 + p2)` in logit space.
pub fn final_combine<'g, T: Real>(p1: Var<'g, T>, p2: Var<'g, T>, p3: Var<'g, T>, w: Var<'g, T>) -> Result<Var<'g, T>> {
    if p1.shape() != p3.shape() || p2.shape() != p3.shape() {
        return Err(Error::Shape(format!(
            "prediction maps {:?}, {:?}, {:?}",
            p1.shape(),
            p2.shape(),
            p3.shape()
        )));
    }
    Ok(p3.add(p1.add(p2).mul(w)))
}
