//! Hierarchical encoder with shunted self-attention: within one layer, groups of heads attend to
//! keys and values computed at different spatial reduction rates.

use pstnet_autograd::{Conv2d, ConvSpec, Ctx, LayerNorm, Linear, ParamBuilder, Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{conv, to_map, to_tokens, LINEAR_INIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub heads_per_stage: [usize; 4],
    /// Per stage, one reduction rate per contiguous group of heads.
    pub kv_reduction_rates: [Vec<usize>; 4],
    pub patch_stride: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            stage_channels: [32, 64, 128, 256],
            stage_depths: [1, 1, 2, 1],
            heads_per_stage: [2, 2, 4, 8],
            kv_reduction_rates: [vec![4, 8], vec![2, 4], vec![1, 2], vec![1, 1]],
            patch_stride: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    /// Small configuration used by the tests and examples.
    pub fn toy() -> Self {
        EncoderConfig {
            in_channels: 3,
            stage_channels: [16, 24, 32, 48],
            stage_depths: [1, 1, 1, 1],
            heads_per_stage: [2, 2, 2, 2],
            kv_reduction_rates: [vec![4, 8], vec![2, 4], vec![1, 2], vec![1, 1]],
            patch_stride: 4,
            mlp_ratio: 2,
        }
    }

    /// Input height and width must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        self.patch_stride * 8
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.in_channels == 0 || self.patch_stride == 0 || self.mlp_ratio == 0 {
            return bad("in_channels, patch_stride and mlp_ratio must be positive".into());
        }
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("stage_channels {:?} must be strictly increasing", self.stage_channels));
        }
        let mut shunted = false;
        for s in 0..4 {
            let (c, heads, rates) = (self.stage_channels[s], self.heads_per_stage[s], &self.kv_reduction_rates[s]);
            if heads == 0 || c % heads != 0 {
                return bad(format!("stage {s}: {heads} heads do not divide {c} channels"));
            }
            if rates.is_empty() || heads % rates.len() != 0 {
                return bad(format!("stage {s}: {} rates cannot split {heads} heads evenly", rates.len()));
            }
            // stage s has a spatial size divisible by 2^(3 - s)
            let max_rate = 1 << (3 - s);
            if let Some(&r) = rates.iter().find(|&&r| r == 0 || !r.is_power_of_two() || r > max_rate) {
                return bad(format!("stage {s}: rate {r} must be a power of two in [1, {max_rate}]"));
            }
            if self.stage_depths[s] == 0 {
                return bad(format!("stage {s}: depth must be positive"));
            }
            shunted |= rates.iter().any(|&r| r != rates[0]);
        }
        if !shunted {
            return bad("no stage mixes two reduction rates".into());
        }
        Ok(())
    }
}

/// The four encoder maps at strides 4, 8, 16 and 32.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid<'g, T: Real> {
    pub levels: [Var<'g, T>; 4],
}

impl<'g, T: Real> FeaturePyramid<'g, T> {
    pub fn x1(&self) -> Var<'g, T> {
        self.levels[0]
    }
    pub fn x2(&self) -> Var<'g, T> {
        self.levels[1]
    }
    pub fn x3(&self) -> Var<'g, T> {
        self.levels[2]
    }
    pub fn x4(&self) -> Var<'g, T> {
        self.levels[3]
    }
}

#[derive(Debug, Clone)]
struct KvBranch {
    rate: usize,
    reduce: Option<(Conv2d, LayerNorm)>,
    kv: Linear,
}

/// Multi-head attention whose head groups see keys/values reduced by different rates.
#[derive(Debug, Clone)]
pub struct ShuntedAttention {
    pub dim: usize,
    pub heads: usize,
    pub rates: Vec<usize>,
    q: Linear,
    branches: Vec<KvBranch>,
    proj: Linear,
}

impl ShuntedAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize, rates: &[usize]) -> Self {
        assert!(
            dim.is_multiple_of(heads) && heads.is_multiple_of(rates.len()),
            "invalid head layout"
        );
        let mut pb = pb.sub(name);
        let group_dim = dim / rates.len();
        let q = Linear::new(&mut pb, "q", dim, dim, LINEAR_INIT);
        let branches = rates
            .iter()
            .enumerate()
            .map(|(i, &rate)| {
                let mut pb = pb.sub(&format!("kv{i}"));
                let reduce = (rate > 1).then(|| {
                    (
                        conv(&mut pb, "sr", ConvSpec::new(dim, dim, rate, rate, 0)),
                        LayerNorm::new(&mut pb, "norm", dim),
                    )
                });
                KvBranch {
                    rate,
                    reduce,
                    kv: Linear::new(&mut pb, "kv", dim, 2 * group_dim, LINEAR_INIT),
                }
            })
            .collect();
        ShuntedAttention {
            dim,
            heads,
            rates: rates.to_vec(),
            q,
            proj: Linear::new(&mut pb, "proj", dim, dim, LINEAR_INIT),
            branches,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `tokens` is `[B, h*w, C]`; returns the same shape.
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, tokens: Var<'g, T>, h: usize, w: usize) -> Result<Var<'g, T>> {
        Ok(self.forward_with_weights(ctx, tokens, h, w)?.0)
    }

    /// Also returns the attention probabilities of every head group, `[B * heads_in_group, N, M]`.
    pub fn forward_with_weights<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, T>,
        tokens: Var<'g, T>,
        h: usize,
        w: usize,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        let s = tokens.shape();
        let (b, n, c) = (s[0], s[1], s[2]);
        if c != self.dim || n != h * w {
            return Err(Error::Shape(format!("attention expects [B, {h}x{w}, {}], got {s:?}", self.dim)));
        }
        if let Some(&r) = self.rates.iter().find(|&&r| !h.is_multiple_of(r) || !w.is_multiple_of(r)) {
            return Err(Error::Sizing {
                dim: if !h.is_multiple_of(r) { "height" } else { "width" },
                size: if !h.is_multiple_of(r) { h } else { w },
                multiple: r,
            });
        }
        let d = self.head_dim();
        let per_group = self.heads / self.rates.len();
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let q = self.q.forward(ctx, tokens).reshape(&[b, n, self.heads, d]).permute(&[0, 2, 1, 3]);
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut probs = Vec::with_capacity(self.branches.len());
        for (gi, br) in self.branches.iter().enumerate() {
            let src = match &br.reduce {
                Some((sr, norm)) => {
                    let reduced = sr.forward(ctx, to_map(tokens, h, w));
                    norm.forward(ctx, to_tokens(reduced))
                }
                None => tokens,
            };
            let m = n / (br.rate * br.rate);
            let kv = br.kv.forward(ctx, src).reshape(&[b, m, 2, per_group, d]).permute(&[2, 0, 3, 1, 4]);
            let k = kv.narrow(0, 0, 1).reshape(&[b * per_group, m, d]);
            let v = kv.narrow(0, 1, 1).reshape(&[b * per_group, m, d]);
            let qg = q.narrow(1, gi * per_group, per_group).reshape(&[b * per_group, n, d]);
            let p = qg.bmm(k, false, true).scale(scale).softmax_last();
            outs.push(p.bmm(v, false, false).reshape(&[b, per_group, n, d]));
            probs.push(p);
        }
        let merged = Var::concat(&outs, 1).permute(&[0, 2, 1, 3]).reshape(&[b, n, c]);
        Ok((self.proj.forward(ctx, merged), probs))
    }
}

#[derive(Debug, Clone)]
struct Block {
    pos: Conv2d,
    norm1: LayerNorm,
    attn: ShuntedAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize, rates: &[usize], mlp_ratio: usize) -> Self {
        let mut pb = pb.sub(name);
        let hidden = dim * mlp_ratio;
        Block {
            pos: Conv2d::depthwise(&mut pb, "pos", dim, 3, crate::layers::conv_init(3, 1)),
            norm1: LayerNorm::new(&mut pb, "norm1", dim),
            attn: ShuntedAttention::new(&mut pb, "attn", dim, heads, rates),
            norm2: LayerNorm::new(&mut pb, "norm2", dim),
            fc1: Linear::new(&mut pb, "fc1", dim, hidden, LINEAR_INIT),
            fc2: Linear::new(&mut pb, "fc2", hidden, dim, LINEAR_INIT),
        }
    }

    fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (_, _, h, w) = x.dims4();
        let x = x.add(self.pos.forward(ctx, x));
        let t = to_tokens(x);
        let t = t.add(self.attn.forward(ctx, self.norm1.forward(ctx, t), h, w)?);
        let hidden = self.fc1.forward(ctx, self.norm2.forward(ctx, t)).gelu();
        let t = t.add(self.fc2.forward(ctx, hidden));
        Ok(to_map(t, h, w))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut pb = pb.sub(name);
        let mut cin = config.in_channels;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let mut pb = pb.sub(&format!("stage{s}"));
            let c = config.stage_channels[s];
            let spec = if s == 0 {
                let p = config.patch_stride;
                ConvSpec::new(cin, c, 2 * p - 1, p, p - 1)
            } else {
                ConvSpec::new(cin, c, 3, 2, 1)
            };
            let embed = conv(&mut pb, "embed", spec);
            let embed_norm = LayerNorm::new(&mut pb, "embed_norm", c);
            let blocks = (0..config.stage_depths[s])
                .map(|i| {
                    Block::new(
                        &mut pb,
                        &format!("block{i}"),
                        c,
                        config.heads_per_stage[s],
                        &config.kv_reduction_rates[s],
                        config.mlp_ratio,
                    )
                })
                .collect();
            let norm = LayerNorm::new(&mut pb, "norm", c);
            stages.push(Stage {
                embed,
                embed_norm,
                blocks,
                norm,
            });
            cin = c;
        }
        Ok(Encoder {
            config: config.clone(),
            stages,
        })
    }

    /// Checks that `[B, C, H, W]` is a valid encoder input.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected [B, {}, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        let m = self.config.required_multiple();
        for (dim, size) in [("height", shape[2]), ("width", shape[3])] {
            if size == 0 || size % m != 0 {
                return Err(Error::Sizing { dim, size, multiple: m });
            }
        }
        Ok(())
    }

    /// Overlapping conv stem: `[B, 3, H, W]` to `[B, C1, H/stride, W/stride]`.
    pub fn patch_embed<'g, T: Real>(&self, ctx: &Ctx<'g, T>, image: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_input(&image.shape())?;
        Ok(self.embed(ctx, 0, image))
    }

    fn embed<'g, T: Real>(&self, ctx: &Ctx<'g, T>, s: usize, x: Var<'g, T>) -> Var<'g, T> {
        let st = &self.stages[s];
        let y = st.embed.forward(ctx, x);
        let (_, _, h, w) = y.dims4();
        to_map(st.embed_norm.forward(ctx, to_tokens(y)), h, w)
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, image: Var<'g, T>) -> Result<FeaturePyramid<'g, T>> {
        self.check_input(&image.shape())?;
        let mut x = image;
        let mut levels = Vec::with_capacity(4);
        for (s, st) in self.stages.iter().enumerate() {
            x = self.embed(ctx, s, x);
            for block in &st.blocks {
                x = block.forward(ctx, x)?;
            }
            let (_, _, h, w) = x.dims4();
            x = to_map(st.norm.forward(ctx, to_tokens(x)), h, w);
            levels.push(x);
        }
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2], levels[3]],
        })
    }
}
