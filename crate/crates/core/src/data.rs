//! Image/mask folders, resizing and normalisation, multi-scale batches, split files and the
//! synthetic low-contrast blob generator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, Axis, IxDyn};
use pstnet_autograd::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Per-channel mean subtracted after scaling to `[0, 1]` (ImageNet statistics).
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Mask pixels strictly above this 8-bit value are foreground.
    pub mask_threshold: u8,
    /// Candidate training scales, one drawn per step.
    pub scales: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            mask_threshold: 127,
            scales: vec![0.75, 1.0, 1.25],
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Config("data.std must be positive".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::Config("data.scales must be a non-empty list of positive numbers".into()));
        }
        Ok(())
    }
}

/// One image with its mask. `image` is `[3, H, W]`, in `[0, 1]` until normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub image: Array3<f32>,
    /// Binary `{0, 1}`, `[H, W]`.
    pub mask: Array2<f32>,
    pub normalized: bool,
}

impl SamplePair {
    pub fn size(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

/// Image files in `dir` keyed by file stem.
pub fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Data(format!(
                "stem {stem} appears twice: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

pub fn read_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("luma buffer"))
}

/// RGB in `[0, 1]`, `[3, H, W]`.
pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_rgb8();
    let (w, h) = img.dimensions();
    let hwc = Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).expect("rgb buffer");
    Ok(hwc
        .permuted_axes([2, 0, 1])
        .mapv(|v| v as f32 / 255.0)
        .as_standard_layout()
        .to_owned())
}

pub fn binarize(raw: &Array2<u8>, threshold: u8) -> Array2<f32> {
    raw.mapv(|v| if v > threshold { 1.0 } else { 0.0 })
}

/// Half-pixel-centred bilinear resize of one plane.
pub fn resize_bilinear_2d<T: Real>(x: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.to_owned();
    }
    let taps = |input: usize, output: usize| -> Vec<(usize, usize, T)> {
        let scale = input as f64 / output as f64;
        (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(input - 1);
                (lo, (lo + 1).min(input - 1), T::lit(src - lo as f64))
            })
            .collect()
    };
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = ty[i];
        let (x0, x1, fx) = tx[j];
        let top = x[[y0, x0]] * (T::one() - fx) + x[[y0, x1]] * fx;
        let bottom = x[[y1, x0]] * (T::one() - fx) + x[[y1, x1]] * fx;
        top * (T::one() - fy) + bottom * fy
    })
}

/// Nearest-neighbour resize (source index `floor(o * in / out)`), so binary masks stay binary.
pub fn resize_nearest_2d<T: Copy>(x: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((out_h, out_w), |(i, j)| x[[i * h / out_h, j * w / out_w]])
}

fn resize_image(img: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let planes: Vec<Array2<f32>> = img.outer_iter().map(|p| resize_bilinear_2d(p, h, w)).collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal planes")
}

/// Reads `<root>/images` and `<root>/masks`, pairing files by stem. Output is sorted by stem.
pub fn load_folder(root: &Path, cfg: &DataConfig) -> Result<Vec<SamplePair>> {
    let images = list_stems(&root.join("images"))?;
    let masks = list_stems(&root.join("masks"))?;
    let unmatched: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .chain(masks.keys().filter(|k| !images.contains_key(*k)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedStems(unmatched));
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no images under {}", root.join("images").display())));
    }
    let load = |(stem, path): (&String, &PathBuf)| -> Result<SamplePair> {
        let image = read_rgb(path)?;
        let mask = binarize(&read_gray(&masks[stem])?, cfg.mask_threshold);
        if (image.dim().1, image.dim().2) != mask.dim() {
            return Err(Error::Data(format!(
                "{stem}: image {:?} and mask {:?} differ in size",
                &image.shape()[1..],
                mask.dim()
            )));
        }
        Ok(SamplePair {
            id: stem.clone(),
            image,
            mask,
            normalized: false,
        })
    };
    images.iter().collect::<Vec<_>>().into_par_iter().map(load).collect()
}

/// Loads every image in `dir` (no masks), sorted by stem.
pub fn load_images(dir: &Path) -> Result<Vec<(String, Array3<f32>)>> {
    let files = list_stems(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no images in {}", dir.display())));
    }
    files.into_iter().map(|(stem, p)| Ok((stem, read_rgb(&p)?))).collect()
}

pub fn normalize(image: &mut Array3<f32>, cfg: &DataConfig) {
    for (c, mut plane) in image.outer_iter_mut().enumerate() {
        let (m, s) = (cfg.mean[c] as f32, cfg.std[c] as f32);
        plane.mapv_inplace(|v| (v - m) / s);
    }
}

/// Network input for a raw `[0, 1]` image: bilinear resize to `size x size`, then normalisation.
pub fn prepare_image(image: &Array3<f32>, size: usize, cfg: &DataConfig) -> Array3<f32> {
    let mut out = resize_image(image, size, size);
    normalize(&mut out, cfg);
    out
}

/// Resizes to `size x size` (bilinear image, nearest mask) and normalises once.
pub fn preprocess(pair: &SamplePair, size: usize, cfg: &DataConfig) -> SamplePair {
    let mut image = resize_image(&pair.image, size, size);
    if !pair.normalized {
        normalize(&mut image, cfg);
    }
    SamplePair {
        id: pair.id.clone(),
        image,
        mask: resize_nearest_2d(pair.mask.view(), size, size),
        normalized: true,
    }
}

/// Stacked network inputs: images `[B, 3, H, W]`, masks `[B, 1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    pub images: ArrayD<T>,
    pub masks: ArrayD<T>,
}

impl<T: Real> Batch<T> {
    pub fn from_pairs(pairs: &[&SamplePair]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let (h, w) = first.size();
        if let Some(p) = pairs.iter().find(|p| p.size() != (h, w)) {
            return Err(Error::Shape(format!("{} is {:?}, batch is {:?}", p.id, p.size(), (h, w))));
        }
        let b = pairs.len();
        let mut images = ArrayD::zeros(IxDyn(&[b, 3, h, w]));
        let mut masks = ArrayD::zeros(IxDyn(&[b, 1, h, w]));
        for (i, p) in pairs.iter().enumerate() {
            images.slice_mut(s![i, .., .., ..]).assign(&p.image.mapv(|v| T::lit(v as f64)));
            masks.slice_mut(s![i, 0, .., ..]).assign(&p.mask.mapv(|v| T::lit(v as f64)));
        }
        Ok(Batch {
            ids: pairs.iter().map(|p| p.id.clone()).collect(),
            images,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }
}

/// `base * scale` rounded to the nearest multiple of `multiple`; sizes below one multiple are rejected.
pub fn scaled_size(base: usize, scale: f64, multiple: usize) -> Result<usize> {
    let target = base as f64 * scale;
    let rounded = (target / multiple as f64).round() as usize * multiple;
    if rounded < multiple {
        return Err(Error::Sizing {
            dim: "scaled size",
            size: rounded,
            multiple,
        });
    }
    Ok(rounded)
}

/// Rescales every sample of the batch to the shared scaled size.
pub fn multiscale_batch<T: Real>(batch: &Batch<T>, scale: f64, multiple: usize) -> Result<Batch<T>> {
    let (h, w) = batch.spatial();
    let (nh, nw) = (scaled_size(h, scale, multiple)?, scaled_size(w, scale, multiple)?);
    if (nh, nw) == (h, w) {
        return Ok(batch.clone());
    }
    let b = batch.len();
    let mut images = ArrayD::zeros(IxDyn(&[b, 3, nh, nw]));
    let mut masks = ArrayD::zeros(IxDyn(&[b, 1, nh, nw]));
    for i in 0..b {
        for c in 0..3 {
            let plane = batch.images.slice(s![i, c, .., ..]);
            images.slice_mut(s![i, c, .., ..]).assign(&resize_bilinear_2d(plane, nh, nw));
        }
        let m = batch.masks.slice(s![i, 0, .., ..]);
        masks.slice_mut(s![i, 0, .., ..]).assign(&resize_nearest_2d(m, nh, nw));
    }
    Ok(Batch {
        ids: batch.ids.clone(),
        images,
        masks,
    })
}

/// Uniform draw of one training scale per step from a caller-owned seeded stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSampler {
    scales: Vec<f64>,
}

impl ScaleSampler {
    pub fn new(scales: &[f64]) -> Self {
        ScaleSampler { scales: scales.to_vec() }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.scales[rng.random_range(0..self.scales.len())]
    }
}

/// Train and test stems of one dataset, stored as `train.txt` / `test.txt` next to the folders.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitSpec {
    pub name: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

fn read_stems(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let train: std::collections::BTreeSet<&String> = self.train.iter().collect();
        let shared: Vec<String> = self.test.iter().filter(|s| train.contains(s)).cloned().collect();
        if !shared.is_empty() {
            return Err(Error::Data(format!("stems in both splits: {}", shared.join(", "))));
        }
        Ok(())
    }

    /// `None` when the root has no split files.
    pub fn read(root: &Path) -> Result<Option<Self>> {
        let (tr, te) = (root.join("train.txt"), root.join("test.txt"));
        if !tr.exists() && !te.exists() {
            return Ok(None);
        }
        let opt = |p: &Path| if p.exists() { read_stems(p) } else { Ok(Vec::new()) };
        let spec = SplitSpec {
            name: root.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
            train: opt(&tr)?,
            test: opt(&te)?,
        };
        spec.validate()?;
        Ok(Some(spec))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        self.validate()?;
        for (file, stems) in [("train.txt", &self.train), ("test.txt", &self.test)] {
            let path = root.join(file);
            let mut text = stems.join("\n");
            text.push('\n');
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Samples whose id is in `stems`, in `stems` order. Missing stems are an error.
    pub fn select(pairs: &[SamplePair], stems: &[String]) -> Result<Vec<SamplePair>> {
        let by_id: BTreeMap<&str, &SamplePair> = pairs.iter().map(|p| (p.id.as_str(), p)).collect();
        let missing: Vec<String> = stems.iter().filter(|s| !by_id.contains_key(s.as_str())).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::UnmatchedStems(missing));
        }
        Ok(stems.iter().map(|s| by_id[s.as_str()].clone()).collect())
    }
}

/// Generator settings for the synthetic blobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    /// Range of the absolute foreground offset; the sign is drawn per image.
    pub contrast: (f64, f64),
    pub texture_amplitude: f64,
    pub noise_amplitude: f64,
    pub max_blobs: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            contrast: (0.05, 0.1),
            texture_amplitude: 0.03,
            noise_amplitude: 0.02,
            max_blobs: 3,
        }
    }
}

/// One synthetic image/mask of `size x size`: 1 to `max_blobs` ellipses shifted by a small
/// offset over a textured, noisy background.
pub fn synth_pair(id: &str, size: usize, params: &SynthParams, rng: &mut ChaCha8Rng) -> SamplePair {
    let sz = size as f64;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1.0..4.0) * std::f64::consts::TAU / sz,
                rng.random_range(1.0..4.0) * std::f64::consts::TAU / sz,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let n_blobs = rng.random_range(1..=params.max_blobs.max(1));
    let blobs: Vec<(f64, f64, f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let cy = rng.random_range(0.25..0.75) * sz;
            let cx = rng.random_range(0.25..0.75) * sz;
            let ay = rng.random_range(0.1..0.22) * sz;
            let ax = rng.random_range(0.1..0.22) * sz;
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let offset = sign * rng.random_range(params.contrast.0..=params.contrast.1);
            (cy, cx, ay, ax, theta, offset)
        })
        .collect();

    let mut mask = Array2::<f32>::zeros((size, size));
    let mut shift = Array2::<f64>::zeros((size, size));
    for &(cy, cx, ay, ax, theta, offset) in &blobs {
        let (sn, cs) = theta.sin_cos();
        for ((y, x), m) in mask.indexed_iter_mut() {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let (u, v) = (dx * cs + dy * sn, -dx * sn + dy * cs);
            let r2 = (u / ax).powi(2) + (v / ay).powi(2);
            if r2 <= 1.0 {
                *m = 1.0;
                // smooth shading that keeps at least 80% of the offset inside the support
                shift[[y, x]] = offset * (1.0 - 0.2 * r2);
            }
        }
    }
    let mut image = Array3::<f32>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let texture: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, a)| a * (fy * y as f64 + fx * x as f64 + ph).sin())
                .sum::<f64>()
                / waves.len() as f64;
            for c in 0..3 {
                let noise = rng.random_range(-1.0..1.0) * params.noise_amplitude;
                let v = base[c] + params.texture_amplitude * texture + noise + shift[[y, x]];
                image[[c, y, x]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    SamplePair {
        id: id.to_string(),
        image,
        mask,
        normalized: false,
    }
}

/// `n` synthetic samples with ids `0000`, `0001`, ...; identical for identical arguments.
pub fn synth_samples(n: usize, size: usize, seed: u64, params: &SynthParams) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| synth_pair(&format!("{i:04}"), size, params, &mut rng)).collect()
}

pub fn to_rgb_image(image: &Array3<f32>) -> RgbImage {
    let (_, h, w) = image.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn to_gray_image(plane: &Array2<u8>) -> GrayImage {
    let (h, w) = plane.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([plane[[y as usize, x as usize]]]))
}

pub fn save_image<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Writes `n` synthetic pairs as `<out>/images/*.png`, `<out>/masks/*.png` plus a split with the
/// last fifth held out for testing.
pub fn synth_dataset(n: usize, size: usize, seed: u64, out: &Path) -> Result<SplitSpec> {
    if n == 0 {
        return Err(Error::Data("synthetic dataset needs n >= 1".into()));
    }
    let samples = synth_samples(n, size, seed, &SynthParams::default());
    for sub in ["images", "masks"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in &samples {
        save_image(&to_rgb_image(&s.image), &out.join("images").join(format!("{}.png", s.id)))?;
        let mask = s.mask.mapv(|v| if v > 0.5 { 255u8 } else { 0 });
        save_image(&to_gray_image(&mask), &out.join("masks").join(format!("{}.png", s.id)))?;
    }
    let n_test = n / 5;
    let ids: Vec<String> = samples.into_iter().map(|s| s.id).collect();
    let split = SplitSpec {
        name: out.file_name().and_then(|n| n.to_str()).unwrap_or("synthetic").to_string(),
        train: ids[..n - n_test].to_vec(),
        test: ids[n - n_test..].to_vec(),
    };
    split.write(out)?;
    Ok(split)
}

/// Mean over channels of `|mean(foreground) - mean(background)|`, on raw `[0, 1]` images.
pub fn contrast(pair: &SamplePair) -> f64 {
    let mut acc = 0.0;
    for plane in pair.image.outer_iter() {
        let (mut fs, mut fnum, mut bs, mut bnum) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (&v, &m) in plane.iter().zip(pair.mask.iter()) {
            if m > 0.5 {
                fs += v as f64;
                fnum += 1.0;
            } else {
                bs += v as f64;
                bnum += 1.0;
            }
        }
        acc += (fs / fnum.max(1.0) - bs / bnum.max(1.0)).abs();
    }
    acc / 3.0
}
