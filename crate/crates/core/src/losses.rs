//! Deep-supervision loss: each head is scored by boundary-weighted BCE, Dice and focal terms.

use ndarray::{ArrayD, Axis, IxDyn};
use pstnet_autograd::{Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Ablation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the low-level head.
    pub gamma: f64,
    /// Weight of the global-feature head.
    pub lambda: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub boundary_weight_k: f64,
    pub boundary_kernel: usize,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: 0.1,
            lambda: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            boundary_weight_k: 5.0,
            boundary_kernel: 15,
            dice_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma >= 0.0
            && self.lambda >= 0.0
            && self.focal_gamma >= 0.0
            && (0.0..=1.0).contains(&self.focal_alpha)
            && self.boundary_weight_k >= 0.0
            && self.boundary_kernel % 2 == 1
            && self.dice_smooth >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Which of the three terms enter every head's loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub wbce: bool,
    pub dice: bool,
    pub focal: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        wbce: true,
        dice: true,
        focal: true,
    };

    pub fn for_ablation(ablation: Ablation) -> Self {
        match ablation {
            Ablation::LossNoDiceFocal => LossTerms {
                wbce: true,
                dice: false,
                focal: false,
            },
            Ablation::LossNoWbce => LossTerms {
                wbce: false,
                dice: true,
                focal: true,
            },
            _ => Self::ALL,
        }
    }
}

/// `1 + k * |boxmean(gt) - gt|` with a `kernel x kernel` window at stride 1. Near the border the
/// mean runs over the in-image part of the window only. `gt` is `[B, C, H, W]` with values in
/// {0, 1}.
pub fn pixel_weights<T: Real>(gt: &ArrayD<T>, k: f64, kernel: usize) -> Result<ArrayD<T>> {
    if gt.ndim() != 4 {
        return Err(Error::Shape(format!("mask must be [B, 1, H, W], got {:?}", gt.shape())));
    }
    if gt.iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Data("mask is not binary".into()));
    }
    let s = gt.shape();
    let (h, w) = (s[2], s[3]);
    let r = kernel / 2;
    let mut out = ArrayD::<T>::zeros(gt.raw_dim());
    for (plane, mut dst) in gt
        .lanes(Axis(3))
        .into_iter()
        .collect::<Vec<_>>()
        .chunks(h)
        .zip(out.exact_chunks_mut(IxDyn(&[1, 1, h, w])))
    {
        // summed-area table with a zero border
        let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += plane[y][x].as_f64();
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let sum = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
                let area = ((y1 - y0) * (x1 - x0)) as f64;
                let g = plane[y][x].as_f64();
                dst[[0, 0, y, x]] = T::lit(1.0 + k * (sum / area - g).abs());
            }
        }
    }
    Ok(out)
}

fn check_finite<T: Real>(v: Var<'_, T>, what: &str) -> Result<()> {
    if v.value().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} contains non-finite values")))
    }
}

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a == b && a.len() == 4 {
        Ok(())
    } else {
        Err(Error::Shape(format!("prediction {a:?} vs mask {b:?}")))
    }
}

/// Per-sample `sum(w * bce) / sum(w)`, averaged over the batch.
pub fn wbce<'g, T: Real>(logits: Var<'g, T>, gt: &ArrayD<T>, weights: &ArrayD<T>) -> Result<Var<'g, T>> {
    check_shapes(&logits.shape(), gt.shape())?;
    check_shapes(weights.shape(), gt.shape())?;
    check_finite(logits, "logits")?;
    let g = logits.graph();
    let norm = weights.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(1));
    let weighted = logits.bce_with_logits(gt).mul(g.constant(weights.clone())).sum_axes(&[1, 2, 3]);
    Ok(weighted.div(g.constant(norm)).mean_all())
}

/// Per-sample `1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)`, averaged over the batch.
pub fn dice_loss<'g, T: Real>(probs: Var<'g, T>, gt: &ArrayD<T>, smooth: f64) -> Result<Var<'g, T>> {
    check_shapes(&probs.shape(), gt.shape())?;
    if probs.value().iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::Data("probabilities outside [0, 1]".into()));
    }
    let g = probs.graph();
    let s = T::lit(smooth);
    let gsum = gt.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(1));
    let inter = probs.mul(g.constant(gt.clone())).sum_axes(&[1, 2, 3]);
    let num = inter.scale(T::lit(2.0)).add_scalar(s);
    let den = probs.sum_axes(&[1, 2, 3]).add(g.constant(gsum)).add_scalar(s);
    Ok(num.div(den).neg().add_scalar(T::one()).mean_all())
}

/// Mean of `-alpha_t (1 - p_t)^gamma ln(p_t)` with `p` clamped to `[1e-6, 1 - 1e-6]`.
pub fn focal_loss<'g, T: Real>(probs: Var<'g, T>, gt: &ArrayD<T>, alpha: f64, gamma: f64) -> Result<Var<'g, T>> {
    check_shapes(&probs.shape(), gt.shape())?;
    check_finite(probs, "probabilities")?;
    let g = probs.graph();
    let p = probs.clamp(T::lit(1e-6), T::lit(1.0 - 1e-6));
    let sign = gt.mapv(|v| v + v - T::one());
    let pt = p.mul(g.constant(sign)).add(g.constant(gt.mapv(|v| T::one() - v)));
    let alpha_t = gt.mapv(|v| T::lit(alpha) * v + T::lit(1.0 - alpha) * (T::one() - v));
    let modulator = pt.neg().add_scalar(T::one()).powf(T::lit(gamma));
    Ok(modulator.mul(pt.ln()).mul(g.constant(alpha_t)).mean_all().neg())
}

/// Values of the terms of one head's loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadLoss {
    pub wbce: f64,
    pub dice: f64,
    pub focal: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub p1: HeadLoss,
    pub p2: HeadLoss,
    pub p3: HeadLoss,
    pub total: f64,
}

/// Sum of the enabled terms for one head.
pub fn head_loss<'g, T: Real>(
    logits: Var<'g, T>,
    gt: &ArrayD<T>,
    weights: &ArrayD<T>,
    cfg: &LossWeights,
    terms: LossTerms,
) -> Result<(Var<'g, T>, HeadLoss)> {
    let mut parts = Vec::with_capacity(3);
    let mut report = HeadLoss::default();
    if terms.wbce {
        let l = wbce(logits, gt, weights)?;
        report.wbce = l.item().as_f64();
        parts.push(l);
    }
    if terms.dice || terms.focal {
        check_finite(logits, "logits")?;
        let probs = logits.sigmoid();
        if terms.dice {
            let l = dice_loss(probs, gt, cfg.dice_smooth)?;
            report.dice = l.item().as_f64();
            parts.push(l);
        }
        if terms.focal {
            let l = focal_loss(probs, gt, cfg.focal_alpha, cfg.focal_gamma)?;
            report.focal = l.item().as_f64();
            parts.push(l);
        }
    }
    let total = parts
        .into_iter()
        .reduce(|a, b| a.add(b))
        .ok_or_else(|| Error::Config("no loss term enabled".into()))?;
    report.total = total.item().as_f64();
    Ok((total, report))
}

/// `gamma * L(p1) + lambda * L(p2) + L(p3)`.
pub fn total_loss<'g, T: Real>(
    heads: [Var<'g, T>; 3],
    gt: &ArrayD<T>,
    weights: &ArrayD<T>,
    cfg: &LossWeights,
    terms: LossTerms,
) -> Result<(Var<'g, T>, LossBreakdown)> {
    let (l1, b1) = head_loss(heads[0], gt, weights, cfg, terms)?;
    let (l2, b2) = head_loss(heads[1], gt, weights, cfg, terms)?;
    let (l3, b3) = head_loss(heads[2], gt, weights, cfg, terms)?;
    let total = l1.scale(T::lit(cfg.gamma)).add(l2.scale(T::lit(cfg.lambda))).add(l3);
    let breakdown = LossBreakdown {
        p1: b1,
        p2: b2,
        p3: b3,
        total: total.item().as_f64(),
    };
    Ok((total, breakdown))
}
