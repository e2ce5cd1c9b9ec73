//! Inference without post-processing: probability maps at native resolution, quantised to
//! 8 bits, shared by in-memory evaluation and the files written by `predict`.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{s, Array2, Array3, ArrayD, Axis, IxDyn};
use pstnet_autograd::{sigmoid, Ctx, Graph, Mode, ParamStore, Real};
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use crate::data::{
    binarize, list_stems, load_folder, load_images, prepare_image, read_gray, resize_bilinear_2d, save_image, to_gray_image, DataConfig,
    SamplePair, SplitSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{deterministic_mode, score_all, MetricOptions, MetricReport};
use crate::model::PstNet;

/// Images per forward pass.
const CHUNK: usize = 8;

/// `round(255 * p)` after clamping to `[0, 1]`.
pub fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn predict_chunk<T: Real>(
    net: &PstNet,
    store: &ParamStore<T>,
    chunk: &[(&str, &Array3<f32>)],
    input_size: usize,
    data: &DataConfig,
) -> Result<Vec<(String, Array2<u8>)>> {
    let mut x = ArrayD::<T>::zeros(IxDyn(&[chunk.len(), 3, input_size, input_size]));
    for (i, (_, img)) in chunk.iter().enumerate() {
        let prepared = prepare_image(img, input_size, data);
        x.slice_mut(s![i, .., .., ..]).assign(&prepared.mapv(|v| T::lit(v as f64)));
    }
    let g = Graph::new();
    let ctx = Ctx::new(&g, store, Mode::Eval);
    let logits = net.forward(&ctx, ctx.constant(x))?.combined.to_array();
    chunk
        .iter()
        .enumerate()
        .map(|(i, (id, img))| {
            let probs = logits.index_axis(Axis(0), i).index_axis(Axis(0), 0).mapv(|v| sigmoid(v.as_f64()));
            let probs = probs.into_dimensionality().expect("2-d map");
            let (_, h, w) = img.dim();
            let native = resize_bilinear_2d::<f64>(probs.view(), h, w);
            if native.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("{id}: non-finite prediction")));
            }
            Ok((id.to_string(), native.mapv(quantize)))
        })
        .collect()
}

/// Final-map probabilities for raw `[0, 1]` images, resized back to each image's own size and
/// quantised. Chunks run in parallel unless deterministic mode is on; results are identical.
pub fn predict_probabilities<T: Real>(
    net: &PstNet,
    store: &ParamStore<T>,
    images: &[(&str, &Array3<f32>)],
    input_size: usize,
    data: &DataConfig,
) -> Result<Vec<(String, Array2<u8>)>> {
    let chunks: Vec<&[(&str, &Array3<f32>)]> = images.chunks(CHUNK).collect();
    let run = |c: &&[(&str, &Array3<f32>)]| predict_chunk(net, store, c, input_size, data);
    let parts: Result<Vec<_>> = if deterministic_mode() {
        chunks.iter().map(run).collect()
    } else {
        chunks.par_iter().map(run).collect()
    };
    Ok(parts?.into_iter().flatten().collect())
}

/// Scores raw pairs at their native mask resolution.
pub fn evaluate<T: Real>(
    net: &PstNet,
    store: &ParamStore<T>,
    pairs: &[SamplePair],
    input_size: usize,
    data: &DataConfig,
    opts: &MetricOptions,
) -> Result<MetricReport> {
    if pairs.iter().any(|p| p.normalized) {
        return Err(Error::Data("evaluation expects raw, unnormalised images".into()));
    }
    let images: Vec<(&str, &Array3<f32>)> = pairs.iter().map(|p| (p.id.as_str(), &p.image)).collect();
    let preds = predict_probabilities(net, store, &images, input_size, data)?;
    let items = preds
        .into_iter()
        .zip(pairs)
        .map(|((id, q), p)| (id, q.mapv(|v| v as f64 / 255.0), p.mask.mapv(f64::from)))
        .collect();
    score_all(items, opts)
}

/// Held-out split of `root` when it has a non-empty `test.txt`, otherwise every pair.
pub fn test_pairs(root: &Path, data: &DataConfig) -> Result<Vec<SamplePair>> {
    let pairs = load_folder(root, data)?;
    match SplitSpec::read(root)? {
        Some(split) if !split.test.is_empty() => SplitSpec::select(&pairs, &split.test),
        _ => Ok(pairs),
    }
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint<f32>, data_root: &Path, opts: &MetricOptions) -> Result<MetricReport> {
    let net = ckpt.model()?;
    let pairs = test_pairs(data_root, &ckpt.config.data)?;
    evaluate(&net, &ckpt.store, &pairs, ckpt.config.train.input_size, &ckpt.config.data, opts)
}

/// Colour-coded comparison: true positives green, false positives red, false negatives yellow,
/// true negatives show the image.
pub fn overlay(image: &Array3<f32>, pred: &Array2<u8>, gt: &Array2<f32>) -> Result<RgbImage> {
    let (_, h, w) = image.dim();
    if pred.dim() != (h, w) || gt.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "overlay of {:?} with prediction {:?} and mask {:?}",
            (h, w),
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        match (pred[[y, x]] >= 128, gt[[y, x]] > 0.5) {
            (true, true) => Rgb([0, 255, 0]),
            (true, false) => Rgb([255, 0, 0]),
            (false, true) => Rgb([255, 255, 0]),
            (false, false) => {
                let px = |c: usize| (image[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                Rgb([px(0), px(1), px(2)])
            }
        }
    }))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictOutput {
    pub maps: Vec<PathBuf>,
    pub overlays: Vec<PathBuf>,
}

/// Writes `<out>/<stem>.png` probability maps for every image in `images_dir`, and
/// `<out>/overlays/<stem>.png` when a directory of ground-truth masks is given.
pub fn predict(ckpt: &Checkpoint<f32>, images_dir: &Path, out_dir: &Path, gts: Option<&Path>) -> Result<PredictOutput> {
    let net = ckpt.model()?;
    let cfg = &ckpt.config;
    let images = load_images(images_dir)?;
    let refs: Vec<(&str, &Array3<f32>)> = images.iter().map(|(id, img)| (id.as_str(), img)).collect();
    let preds = predict_probabilities(&net, &ckpt.store, &refs, cfg.train.input_size, &cfg.data)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = PredictOutput::default();
    for (id, map) in &preds {
        let path = out_dir.join(format!("{id}.png"));
        save_image(&to_gray_image(map), &path)?;
        out.maps.push(path);
    }
    if let Some(gt_dir) = gts {
        let masks = list_stems(gt_dir)?;
        let dir = out_dir.join("overlays");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let missing: Vec<String> = preds
            .iter()
            .filter(|(id, _)| !masks.contains_key(id))
            .map(|(id, _)| id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::UnmatchedStems(missing));
        }
        for ((id, map), (_, img)) in preds.iter().zip(&images) {
            let gt = binarize(&read_gray(&masks[id])?, cfg.data.mask_threshold);
            let path = dir.join(format!("{id}.png"));
            save_image(&overlay(img, map, &gt)?, &path)?;
            out.overlays.push(path);
        }
    }
    Ok(out)
}
