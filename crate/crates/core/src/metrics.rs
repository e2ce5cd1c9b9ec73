//! Segmentation and saliency-style metrics on probability maps against binary ground truth:
//! Dice, IoU, weighted F-beta, S-measure, E-measure (mean and max over thresholds), MAE.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{list_stems, read_gray, resize_bilinear_2d};
use crate::error::{Error, Result};

/// MATLAB `eps`, used where the reference definitions guard divisions.
const EPS: f64 = f64::EPSILON;

fn check_same(pred: &ArrayView2<'_, f64>, gt: &ArrayView2<'_, f64>) -> Result<()> {
    if pred.dim() == gt.dim() {
        Ok(())
    } else {
        Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())))
    }
}

/// Soft Dice and IoU (`TP = sum(p g)`); with `threshold`, `pred` is binarised at `>= t` first.
/// Both are 1 when prediction and ground truth are empty.
pub fn dice_iou(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>, threshold: Option<f64>) -> Result<(f64, f64)> {
    check_same(&pred, &gt)?;
    let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
    Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        let p = match threshold {
            Some(t) => f64::from(u8::from(p >= t)),
            None => p,
        };
        inter += p * g;
        ps += p;
        gs += g;
    });
    let union = ps + gs - inter;
    if ps + gs == 0.0 {
        return Ok((1.0, 1.0));
    }
    Ok((2.0 * inter / (ps + gs), inter / union))
}

pub fn mae(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<f64> {
    check_same(&pred, &gt)?;
    let n = pred.len() as f64;
    Ok(Zip::from(&pred).and(&gt).fold(0.0, |acc, &p, &g| acc + (p - g).abs()) / n)
}

/// Exact Euclidean distance transform to the nearest foreground pixel and the index of that pixel.
/// Ties go to the smallest `(row, col)`. Background everywhere yields infinite distances.
pub fn distance_transform(fg: ArrayView2<'_, bool>) -> (Array2<f64>, Array2<(usize, usize)>) {
    let (h, w) = fg.dim();
    // per column: nearest foreground row (smaller row on ties)
    let mut col_near: Array2<Option<usize>> = Array2::from_elem((h, w), None);
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if fg[[y, x]] {
                last = Some(y);
            }
            col_near[[y, x]] = last;
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if fg[[y, x]] {
                next = Some(y);
            }
            let up = col_near[[y, x]];
            col_near[[y, x]] = match (up, next) {
                (Some(a), Some(b)) => Some(if y - a <= b - y { a } else { b }),
                (a, b) => a.or(b),
            };
        }
    }
    let mut dist = Array2::from_elem((h, w), f64::INFINITY);
    let mut idx = Array2::from_elem((h, w), (0, 0));
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(usize, (usize, usize))> = None;
            for xc in 0..w {
                if let Some(yc) = col_near[[y, xc]] {
                    let d2 = yc.abs_diff(y).pow(2) + xc.abs_diff(x).pow(2);
                    let cand = (d2, (yc, xc));
                    if best.is_none_or(|b| cand < b) {
                        best = Some(cand);
                    }
                }
            }
            if let Some((d2, at)) = best {
                dist[[y, x]] = (d2 as f64).sqrt();
                idx[[y, x]] = at;
            }
        }
    }
    (dist, idx)
}

/// Normalised `size x size` Gaussian window.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k = Array2::from_shape_fn((size, size), |(i, j)| {
        let (y, x) = (i as f64 - c, j as f64 - c);
        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    });
    let s = k.sum();
    k /= s;
    k
}

/// Same-size correlation with zero padding.
fn filter_same(x: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (kh, kw) = k.dim();
    let (ry, rx) = (kh / 2, kw / 2);
    Array2::from_shape_fn((h, w), |(y, xx)| {
        let mut acc = 0.0;
        for i in 0..kh {
            let sy = y as isize + i as isize - ry as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for j in 0..kw {
                let sx = xx as isize + j as isize - rx as isize;
                if sx >= 0 && sx < w as isize {
                    acc += k[[i, j]] * x[[sy as usize, sx as usize]];
                }
            }
        }
        acc
    })
}

/// Weighted F-measure with beta^2 = 1. Returns `(value, gt_was_empty)`; an empty ground truth
/// scores 0.
pub fn weighted_fbeta(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<(f64, bool)> {
    check_same(&pred, &gt)?;
    let fg = gt.mapv(|g| g > 0.5);
    if !fg.iter().any(|&b| b) {
        return Ok((0.0, true));
    }
    let e = Zip::from(&pred).and(&gt).map_collect(|&p, &g| (p - g).abs());
    let (dst, nearest) = distance_transform(fg.view());
    // errors of background pixels are read at their nearest foreground pixel
    let et = Array2::from_shape_fn(e.dim(), |(y, x)| if fg[[y, x]] { e[[y, x]] } else { e[nearest[[y, x]]] });
    let ea = filter_same(&et, &gaussian_kernel(7, 5.0));
    let decay = (0.5f64).ln() / 5.0;
    let (mut tp_loss, mut fp, mut n_fg) = (0.0, 0.0, 0.0);
    for ((y, x), &is_fg) in fg.indexed_iter() {
        let ev = e[[y, x]];
        if is_fg {
            let m = if ea[[y, x]] < ev { ea[[y, x]] } else { ev };
            tp_loss += m;
            n_fg += 1.0;
        } else {
            fp += ev * (2.0 - (decay * dst[[y, x]]).exp());
        }
    }
    let tp = n_fg - tp_loss;
    let recall = 1.0 - tp_loss / n_fg;
    let precision = tp / (EPS + tp + fp);
    Ok((2.0 * recall * precision / (EPS + recall + precision), false))
}

fn object_score(values: &[f64]) -> f64 {
    let n = values.len();
    let m = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * m / (m * m + 1.0 + sd + EPS)
}

fn region_ssim(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> f64 {
    let n = pred.len() as f64;
    let x = pred.sum() / n;
    let y = gt.sum() / n;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        sx += (p - x).powi(2);
        sy += (g - y).powi(2);
        sxy += (p - x) * (g - y);
    });
    let d = n - 1.0 + EPS;
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let a = 4.0 * x * y * sxy;
    let b = (x * x + y * y) * (sx + sy);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure `alpha * S_object + (1 - alpha) * S_region`.
pub fn s_measure(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>, alpha: f64) -> Result<f64> {
    check_same(&pred, &gt)?;
    let fg = gt.mapv(|g| g > 0.5);
    let (h, w) = gt.dim();
    let n_fg = fg.iter().filter(|&&b| b).count();
    let y_mean = n_fg as f64 / (h * w) as f64;
    if n_fg == 0 {
        return Ok(1.0 - pred.mean().unwrap_or(0.0));
    }
    if n_fg == h * w {
        return Ok(pred.mean().unwrap_or(0.0));
    }
    let fg_vals: Vec<f64> = pred.iter().zip(fg.iter()).filter(|(_, &f)| f).map(|(&p, _)| p).collect();
    let bg_vals: Vec<f64> = pred.iter().zip(fg.iter()).filter(|(_, &f)| !f).map(|(&p, _)| 1.0 - p).collect();
    let object = y_mean * object_score(&fg_vals) + (1.0 - y_mean) * object_score(&bg_vals);

    // centroid with 1-based coordinates, rounded half away from zero
    let (mut cx, mut cy) = (0.0, 0.0);
    for ((y, x), &f) in fg.indexed_iter() {
        if f {
            cx += (x + 1) as f64;
            cy += (y + 1) as f64;
        }
    }
    let cx = (cx / n_fg as f64).round() as usize;
    let cy = (cy / n_fg as f64).round() as usize;
    let gtf = fg.mapv(|b| f64::from(u8::from(b)));
    let area = (h * w) as f64;
    let quads = [(0..cy, 0..cx), (0..cy, cx..w), (cy..h, 0..cx), (cy..h, cx..w)];
    let mut region = 0.0;
    for (rows, cols) in quads {
        let weight = (rows.len() * cols.len()) as f64 / area;
        if weight == 0.0 {
            continue;
        }
        let p = pred.slice(ndarray::s![rows.clone(), cols.clone()]);
        let g = gtf.slice(ndarray::s![rows, cols]);
        region += weight * region_ssim(p, g);
    }
    let q = alpha * object + (1.0 - alpha) * region;
    Ok(q.max(0.0))
}

/// Enhanced-alignment score of one binary map.
pub fn enhanced_alignment(fm: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> f64 {
    let n = fm.len() as f64;
    let g_sum = gt.sum();
    let matrix_sum = if g_sum == 0.0 {
        fm.iter().map(|&f| 1.0 - f).sum::<f64>()
    } else if g_sum == n {
        fm.sum()
    } else {
        let (mf, mg) = (fm.sum() / n, g_sum / n);
        Zip::from(&fm).and(&gt).fold(0.0, |acc, &f, &g| {
            let (af, ag) = (f - mf, g - mg);
            let align = 2.0 * af * ag / (ag * ag + af * af + EPS);
            acc + (align + 1.0).powi(2) / 4.0
        })
    };
    matrix_sum / n
}

/// Mean and max of the enhanced-alignment score over 256 evenly spaced thresholds
/// `(k + 0.5) / 256`, binarising with `pred >= t`. Centring the thresholds in their bins keeps
/// a binary prediction unchanged at every threshold, so a perfect map scores 1 on both.
pub fn e_measure(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
    check_same(&pred, &gt)?;
    let gtf = gt.mapv(|g| f64::from(u8::from(g > 0.5)));
    let mut sum = 0.0;
    let mut best = f64::MIN;
    for k in 0..256u32 {
        let t = (k as f64 + 0.5) / 256.0;
        let fm = pred.mapv(|p| f64::from(u8::from(p >= t)));
        let e = enhanced_alignment(fm.view(), gtf.view());
        sum += e;
        best = best.max(e);
    }
    Ok((sum / 256.0, best))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricOptions {
    /// Binarise predictions for Dice/IoU.
    pub threshold: Option<f64>,
    pub s_alpha: f64,
}

impl MetricOptions {
    pub fn new() -> Self {
        MetricOptions {
            threshold: None,
            s_alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub wfb: f64,
    pub s_alpha: f64,
    pub e_mean: f64,
    pub e_max: f64,
    pub mae: f64,
    /// Ground truth had no foreground (weighted F-beta reported as 0).
    pub empty_gt: bool,
}

impl ImageMetrics {
    pub fn columns(&self) -> [f64; 7] {
        [self.dice, self.iou, self.wfb, self.s_alpha, self.e_mean, self.e_max, self.mae]
    }
}

/// Column labels in report order.
pub const COLUMNS: [&str; 7] = ["mDic", "mIoU", "wFb", "Sa", "mEe", "maxEe", "MAE"];

pub fn score_image(id: &str, pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>, opts: &MetricOptions) -> Result<ImageMetrics> {
    let (dice, iou) = dice_iou(pred, gt, opts.threshold)?;
    let (wfb, empty_gt) = weighted_fbeta(pred, gt)?;
    let (e_mean, e_max) = e_measure(pred, gt)?;
    Ok(ImageMetrics {
        id: id.to_string(),
        dice,
        iou,
        wfb,
        s_alpha: s_measure(pred, gt, if opts.s_alpha == 0.0 { 0.5 } else { opts.s_alpha })?,
        e_mean,
        e_max,
        mae: mae(pred, gt)?,
        empty_gt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    /// Arithmetic means in [`COLUMNS`] order.
    pub means: [f64; 7],
}

impl MetricReport {
    /// Sorts by id and averages.
    pub fn from_images(mut per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Data("no images to report".into()));
        }
        per_image.sort_by(|a, b| a.id.cmp(&b.id));
        let mut means = [0.0; 7];
        for m in &per_image {
            for (acc, v) in means.iter_mut().zip(m.columns()) {
                *acc += v;
            }
        }
        let n = per_image.len() as f64;
        means.iter_mut().for_each(|v| *v /= n);
        Ok(MetricReport { per_image, means })
    }

    pub fn mean_of(&self, column: &str) -> Option<f64> {
        COLUMNS.iter().position(|c| *c == column).map(|i| self.means[i])
    }

    pub fn mdice(&self) -> f64 {
        self.means[0]
    }

    /// Per-image rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("id,{}\n", COLUMNS.join(","));
        let row = |s: &mut String, id: &str, v: [f64; 7]| {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
            let _ = writeln!(s, "{id},{}", vals.join(","));
        };
        for m in &self.per_image {
            row(&mut s, &m.id, m.columns());
        }
        row(&mut s, "mean", self.means);
        s
    }

    /// Seven-column table of the dataset means.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", COLUMNS.map(|c| format!("{c:>8}")).join(""));
        let _ = writeln!(s, "{}", self.means.map(|v| format!("{v:>8.4}")).join(""));
        let _ = write!(s, "({} images)", self.per_image.len());
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Whether evaluation runs on one thread (`PSTNET_DETERMINISTIC` set to anything but `0`).
pub fn deterministic_mode() -> bool {
    std::env::var("PSTNET_DETERMINISTIC").is_ok_and(|v| v != "0" && !v.is_empty())
}

/// Scores `(id, prediction, ground truth)` triples, in parallel unless deterministic mode is on.
pub fn score_all(items: Vec<(String, Array2<f64>, Array2<f64>)>, opts: &MetricOptions) -> Result<MetricReport> {
    let per: Result<Vec<ImageMetrics>> = if deterministic_mode() {
        items.iter().map(|(id, p, g)| score_image(id, p.view(), g.view(), opts)).collect()
    } else {
        items
            .par_iter()
            .map(|(id, p, g)| score_image(id, p.view(), g.view(), opts))
            .collect()
    };
    MetricReport::from_images(per?)
}

/// Scores every prediction image in `pred_dir` against the mask with the same stem in `gt_dir`.
/// Predictions are bilinearly resized to the mask size; masks are binarised at `> 127`.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, opts: &MetricOptions) -> Result<MetricReport> {
    let preds: BTreeMap<String, PathBuf> = list_stems(pred_dir)?;
    let gts: BTreeMap<String, PathBuf> = list_stems(gt_dir)?;
    if preds.is_empty() {
        return Err(Error::Data(format!("no predictions in {}", pred_dir.display())));
    }
    let unmatched: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedStems(unmatched));
    }
    let mut items = Vec::with_capacity(preds.len());
    for (stem, p) in &preds {
        let gt = read_gray(&gts[stem])?.mapv(|v| if v > 127 { 1.0 } else { 0.0 });
        let pred = read_gray(p)?.mapv(|v| v as f64 / 255.0);
        let pred = if pred.dim() == gt.dim() {
            pred
        } else {
            resize_bilinear_2d(pred.view(), gt.dim().0, gt.dim().1)
        };
        items.push((stem.clone(), pred, gt));
    }
    score_all(items, opts)
}
