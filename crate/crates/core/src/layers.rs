//! Small shared pieces: initialisers, token/map layout changes, the conv + BN + SiLU unit.

use pstnet_autograd::{BatchNorm2d, Conv2d, ConvSpec, Ctx, Init, ParamBuilder, Real, Var};

/// Projection weights: truncated normal, std 0.02.
pub(crate) const LINEAR_INIT: Init = Init::TruncNormal { std: 0.02 };

/// He-normal over the fan-out of a conv kernel.
pub(crate) fn conv_init(kernel: usize, cout: usize) -> Init {
    Init::KaimingNormal {
        fan_in: kernel * kernel * cout,
    }
}

pub(crate) fn conv<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, spec: ConvSpec) -> Conv2d {
    Conv2d::new(pb, name, spec, conv_init(spec.kernel, spec.cout))
}

/// `[B, C, H, W]` to `[B, H*W, C]`.
pub(crate) fn to_tokens<'g, T: Real>(x: Var<'g, T>) -> Var<'g, T> {
    let (b, c, h, w) = x.dims4();
    x.reshape(&[b, c, h * w]).permute(&[0, 2, 1])
}

/// `[B, H*W, C]` to `[B, C, H, W]`.
pub(crate) fn to_map<'g, T: Real>(t: Var<'g, T>, h: usize, w: usize) -> Var<'g, T> {
    let s = t.shape();
    t.permute(&[0, 2, 1]).reshape(&[s[0], s[2], h, w])
}

/// Global average pool `[B, C, H, W]` to `[B, C]`.
pub(crate) fn global_avg_pool<'g, T: Real>(x: Var<'g, T>) -> Var<'g, T> {
    x.mean_axes(&[2, 3])
}

/// 3x3 convolution, batch normalisation, SiLU. Shape preserving.
#[derive(Debug, Clone)]
pub struct Cbs {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Cbs {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut pb = pb.sub(name);
        Cbs {
            conv: conv(&mut pb, "conv", ConvSpec::same(channels, channels, 3)),
            bn: BatchNorm2d::new(&mut pb, "bn", channels),
        }
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.bn.forward(ctx, self.conv.forward(ctx, x)).silu()
    }
}

/// Single-channel 1x1 logit head followed by bilinear upsampling to `size`.
#[derive(Debug, Clone)]
pub struct LogitHead {
    pub conv: Conv2d,
}

impl LogitHead {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        LogitHead {
            conv: conv(pb, name, ConvSpec::pointwise(channels, 1)),
        }
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>, size: (usize, usize)) -> Var<'g, T> {
        self.conv.forward(ctx, x).resize_bilinear(size.0, size.1)
    }
}
