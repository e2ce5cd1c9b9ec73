//! Full network: encoder, frequency attention on the first level, multi-scale alignment over the
//! pyramid, cross perception, and the weighted combination of the three logit maps.

use pstnet_autograd::{Conv2d, ConvSpec, Ctx, Init, ParamBuilder, ParamId, ParamStore, Real, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cpm::{final_combine, Cpm};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fcam::{Fcam, FcamConfig};
use crate::fsam::{Fsam, FsamConfig, PlainFusion};
use crate::layers::{conv, LogitHead};

/// Experiment variants: the full model, one module removed, or one loss family removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    NoFcam,
    NoFsam,
    NoCpm,
    LossNoDiceFocal,
    LossNoWbce,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::NoFcam,
        Ablation::NoFsam,
        Ablation::NoCpm,
        Ablation::LossNoDiceFocal,
        Ablation::LossNoWbce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoFcam => "no_fcam",
            Ablation::NoFsam => "no_fsam",
            Ablation::NoCpm => "no_cpm",
            Ablation::LossNoDiceFocal => "loss_no_dice_focal",
            Ablation::LossNoWbce => "loss_no_wbce",
        }
    }

    /// Column label in the comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::None => "Final",
            Ablation::NoFcam => "w/o FCAM",
            Ablation::NoFsam => "w/o FSAM",
            Ablation::NoCpm => "w/o CPM",
            Ablation::LossNoDiceFocal => "w/o (Dice+Focal)",
            Ablation::LossNoWbce => "w/o wBCE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn is_module(self) -> bool {
        matches!(self, Ablation::NoFcam | Ablation::NoFsam | Ablation::NoCpm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fcam: FcamConfig,
    pub fsam: FsamConfig,
    /// Initial weight of the auxiliary maps in the final combination.
    pub combine_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            fcam: FcamConfig::default(),
            fsam: FsamConfig::default(),
            combine_weight: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            fcam: FcamConfig {
                n_groups: 8,
                ..FcamConfig::default()
            },
            fsam: FsamConfig {
                channel_width: 16,
                ..FsamConfig::default()
            },
            combine_weight: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fcam.plan().validate(self.encoder.stage_channels[0])?;
        if self.fsam.channel_width == 0 {
            return Err(Error::Config("fsam.channel_width must be positive".into()));
        }
        if !self.combine_weight.is_finite() {
            return Err(Error::Config("combine_weight must be finite".into()));
        }
        Ok(())
    }
}

/// Logits of the three supervised heads and of their combination, all at input resolution.
#[derive(Debug, Clone, Copy)]
pub struct PredictionTriple<'g, T: Real> {
    pub p1: Var<'g, T>,
    pub p2: Var<'g, T>,
    pub p3: Var<'g, T>,
    pub combined: Var<'g, T>,
}

#[derive(Debug, Clone)]
enum LowPath {
    Fcam(Fcam),
    Plain { conv: Conv2d, head: LogitHead },
}

#[derive(Debug, Clone)]
enum GlobalPath {
    Fsam(Fsam),
    Plain(PlainFusion),
}

#[derive(Debug, Clone)]
enum CrossPath {
    Cpm(Cpm),
    Sum(LogitHead),
}

#[derive(Debug, Clone)]
pub struct PstNet {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub encoder: Encoder,
    low: LowPath,
    global: GlobalPath,
    low_proj: Conv2d,
    cross: CrossPath,
    pub combine_weight: ParamId,
}

impl PstNet {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, config: &ModelConfig, ablation: Ablation) -> Result<Self> {
        config.validate()?;
        let ch = config.encoder.stage_channels;
        let cu = config.fsam.channel_width;
        let encoder = Encoder::new(pb, "encoder", &config.encoder)?;
        let low = if ablation == Ablation::NoFcam {
            let mut pb = pb.sub("low");
            LowPath::Plain {
                conv: conv(&mut pb, "conv", ConvSpec::pointwise(ch[0], ch[0])),
                head: LogitHead::new(&mut pb, "head", ch[0]),
            }
        } else {
            LowPath::Fcam(Fcam::new(pb, "fcam", ch[0], &config.fcam)?)
        };
        let global = if ablation == Ablation::NoFsam {
            GlobalPath::Plain(PlainFusion::new(pb, "fusion", ch, cu))
        } else {
            GlobalPath::Fsam(Fsam::new(pb, "fsam", ch, &config.fsam))
        };
        let low_proj = conv(pb, "low_proj", ConvSpec::pointwise(ch[0], cu));
        let cross = if ablation == Ablation::NoCpm {
            CrossPath::Sum(LogitHead::new(pb, "sum_head", cu))
        } else {
            CrossPath::Cpm(Cpm::new(pb, "cpm", cu))
        };
        let combine_weight = pb.param("combine_weight", &[1], Init::Const(config.combine_weight));
        Ok(PstNet {
            config: config.clone(),
            ablation,
            encoder,
            low,
            global,
            low_proj,
            cross,
            combine_weight,
        })
    }

    /// Builds the network and a freshly initialised parameter store from `seed`.
    pub fn build<T: Real>(config: &ModelConfig, ablation: Ablation, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = PstNet::new(&mut ParamBuilder::new(&mut store, &mut rng), config, ablation)?;
        Ok((net, store))
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, image: Var<'g, T>) -> Result<PredictionTriple<'g, T>> {
        let pyramid = self.encoder.forward(ctx, image)?;
        self.decode(ctx, &pyramid, (image.shape()[2], image.shape()[3]))
    }

    /// Everything after the encoder.
    pub fn decode<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, T>,
        pyramid: &FeaturePyramid<'g, T>,
        size: (usize, usize),
    ) -> Result<PredictionTriple<'g, T>> {
        let (f1, p1) = match &self.low {
            LowPath::Fcam(fcam) => {
                let out = fcam.forward(ctx, pyramid.x1(), size)?;
                (out.feature, out.p1_logits)
            }
            LowPath::Plain { conv, head } => {
                let f = conv.forward(ctx, pyramid.x1());
                (f, head.forward(ctx, f, size))
            }
        };
        let (g, p2) = match &self.global {
            GlobalPath::Fsam(fsam) => {
                let out = fsam.forward(ctx, pyramid, size)?;
                (out.g, out.p2_logits)
            }
            GlobalPath::Plain(fusion) => fusion.forward(ctx, pyramid, size),
        };
        let r1 = self.low_proj.forward(ctx, f1);
        let p3 = match &self.cross {
            CrossPath::Cpm(cpm) => cpm.forward(ctx, r1, g, size)?.p3_logits,
            CrossPath::Sum(head) => head.forward(ctx, r1.add(g), size),
        };
        let combined = final_combine(p1, p2, p3, ctx.param(self.combine_weight))?;
        Ok(PredictionTriple { p1, p2, p3, combined })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use pstnet_autograd::{Graph, Mode};

    #[test]
    fn every_variant_produces_input_sized_maps() {
        let cfg = ModelConfig::toy();
        let x = ArrayD::<f32>::from_shape_fn(IxDyn(&[2, 3, 64, 64]), |i| ((i[2] * 7 + i[3] * 3 + i[1]) % 11) as f32 / 11.0);
        for ab in Ablation::ALL {
            let (net, store) = PstNet::build::<f32>(&cfg, ab, 0).unwrap();
            let g = Graph::new();
            let ctx = Ctx::new(&g, &store, Mode::Eval);
            let out = net.forward(&ctx, ctx.constant(x.clone())).unwrap();
            for m in [out.p1, out.p2, out.p3, out.combined] {
                assert_eq!(m.shape(), vec![2, 1, 64, 64], "{ab:?}");
                assert!(m.to_array().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn eval_forward_is_repeatable_and_batch_independent() {
        let cfg = ModelConfig::toy();
        let (net, store) = PstNet::build::<f32>(&cfg, Ablation::None, 1).unwrap();
        let x = ArrayD::<f32>::from_shape_fn(IxDyn(&[2, 3, 32, 32]), |i| ((i[0] * 5 + i[2] * 3 + i[3]) % 7) as f32 / 7.0);
        let run = |x: &ArrayD<f32>| {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &store, Mode::Eval);
            net.forward(&ctx, ctx.constant(x.clone())).unwrap().combined.to_array()
        };
        let a = run(&x);
        assert_eq!(a, run(&x));
        let mut swapped = x.clone();
        swapped
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&x.index_axis(ndarray::Axis(0), 1));
        swapped
            .index_axis_mut(ndarray::Axis(0), 1)
            .assign(&x.index_axis(ndarray::Axis(0), 0));
        let b = run(&swapped);
        assert_eq!(a.index_axis(ndarray::Axis(0), 0), b.index_axis(ndarray::Axis(0), 1));
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()), Some(a));
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
    }
}
