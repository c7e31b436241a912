//! Stochastic view generation.
//!
//! Each view is produced by sampling a [`TransformParams`] (all randomness of
//! one draw) and then applying it deterministically:
//! crop → resize → flip → color jitter → grayscale → blur. Channel
//! standardization is applied last, when views are assembled into a batch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::FeatureMap;
use crate::rng::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("image must have 3 channels, got {0}")]
    Channels(usize),
    #[error("image buffer holds {got} values, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("cannot build views from an empty batch")]
    EmptyBatch,
    #[error("invalid augmentation policy: {0}")]
    Policy(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Bilinear,
    Bicubic,
}

/// Every probability and range of the augmentation pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Output side length; in run configs this follows `model.input_resolution`.
    #[serde(skip)]
    pub resolution: usize,
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub interpolation: Interpolation,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_kernel: usize,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            resolution: 96,
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            interpolation: Interpolation::Bicubic,
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            hue: 0.2,
            grayscale_prob: 0.2,
            blur_prob: 1.0,
            blur_kernel: 9,
            blur_sigma: [0.1, 2.0],
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let err = |m: String| Err(AugmentError::Policy(m));
        let probs = [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ];
        for (key, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("augment.{key} must be in [0, 1], got {p}"));
            }
        }
        if self.resolution < 8 {
            return err(format!("augment.resolution must be >= 8, got {}", self.resolution));
        }
        let [s0, s1] = self.crop_scale;
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) {
            return err(format!("augment.crop_scale must satisfy 0 < lo <= hi <= 1, got {:?}", self.crop_scale));
        }
        let [r0, r1] = self.crop_ratio;
        if !(0.0 < r0 && r0 <= r1) {
            return err(format!("augment.crop_ratio must satisfy 0 < lo <= hi, got {:?}", self.crop_ratio));
        }
        for (key, v) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("augment.{key} must be in [0, 1], got {v}"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return err(format!("augment.hue must be in [0, 0.5], got {}", self.hue));
        }
        if self.blur_kernel % 2 == 0 {
            return err(format!("augment.blur_kernel must be odd, got {}", self.blur_kernel));
        }
        let [b0, b1] = self.blur_sigma;
        if !(0.0 < b0 && b0 <= b1) {
            return err(format!("augment.blur_sigma must satisfy 0 < lo <= hi, got {:?}", self.blur_sigma));
        }
        Ok(())
    }
}

/// Crop rectangle in source-pixel units; may be fractional.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub order: [JitterOp; 4],
}

/// The complete randomness of one augmentation draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub source_size: (usize, usize),
    pub crop: CropBox,
    pub flip: bool,
    pub jitter_applied: bool,
    pub jitter: JitterParams,
    pub grayscale: bool,
    pub blur_applied: bool,
    pub blur_sigma: f64,
}

impl TransformParams {
    /// Whole image, no flip, jitter or grayscale; blur still applies.
    pub fn identity(height: usize, width: usize, blur_sigma: f64) -> Self {
        Self {
            source_size: (height, width),
            crop: CropBox { x: 0.0, y: 0.0, w: width as f64, h: height as f64 },
            flip: false,
            jitter_applied: false,
            jitter: JitterParams {
                brightness: 1.0,
                contrast: 1.0,
                saturation: 1.0,
                hue: 0.0,
                order: [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue],
            },
            grayscale: false,
            blur_applied: true,
            blur_sigma,
        }
    }

    pub fn crop_area_fraction(&self) -> f64 {
        let (h, w) = self.source_size;
        self.crop.w * self.crop.h / (h * w) as f64
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn sample_crop(rng: &mut impl Rng, policy: &AugmentPolicy, height: usize, width: usize) -> CropBox {
    let (hf, wf) = (height as f64, width as f64);
    let area = hf * wf;
    let [r0, r1] = policy.crop_ratio;
    let (lr0, lr1) = (r0.ln(), r1.ln());
    let mut chosen = None;
    for _ in 0..10 {
        let target = area * uniform(rng, policy.crop_scale[0], policy.crop_scale[1]);
        let ratio = uniform(rng, lr0, lr1).exp();
        let w = (target * ratio).sqrt();
        let h = (target / ratio).sqrt();
        if w > 0.0 && w <= wf && h > 0.0 && h <= hf {
            let x = uniform(rng, 0.0, wf - w);
            let y = uniform(rng, 0.0, hf - h);
            chosen = Some(CropBox { x, y, w, h });
            break;
        }
    }
    let mut crop = chosen.unwrap_or_else(|| {
        let in_ratio = wf / hf;
        let (w, h) = if in_ratio < r0 {
            (wf, wf / r0)
        } else if in_ratio > r1 {
            (hf * r1, hf)
        } else {
            (wf, hf)
        };
        CropBox { x: (wf - w) / 2.0, y: (hf - h) / 2.0, w, h }
    });
    // Keep at least a 9×9 window where the source allows it.
    let min_w = wf.min(9.0);
    let min_h = hf.min(9.0);
    if crop.w < min_w {
        crop.x = (crop.x - (min_w - crop.w) / 2.0).clamp(0.0, wf - min_w);
        crop.w = min_w;
    }
    if crop.h < min_h {
        crop.y = (crop.y - (min_h - crop.h) / 2.0).clamp(0.0, hf - min_h);
        crop.h = min_h;
    }
    crop
}

/// Draws one transform for a `height × width` source. A pure function of the
/// generator state.
pub fn sample_transform(rng: &mut impl Rng, policy: &AugmentPolicy, height: usize, width: usize) -> TransformParams {
    let crop = sample_crop(rng, policy, height, width);
    let flip = rng.random_bool(policy.flip_prob);
    let jitter_applied = rng.random_bool(policy.jitter_prob);
    let brightness = uniform(rng, (1.0 - policy.brightness).max(0.0), 1.0 + policy.brightness);
    let contrast = uniform(rng, (1.0 - policy.contrast).max(0.0), 1.0 + policy.contrast);
    let saturation = uniform(rng, (1.0 - policy.saturation).max(0.0), 1.0 + policy.saturation);
    let hue = uniform(rng, -policy.hue, policy.hue);
    let mut order = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue];
    order.shuffle(rng);
    let grayscale = rng.random_bool(policy.grayscale_prob);
    let blur_applied = rng.random_bool(policy.blur_prob);
    let blur_sigma = uniform(rng, policy.blur_sigma[0], policy.blur_sigma[1]);
    TransformParams {
        source_size: (height, width),
        crop,
        flip,
        jitter_applied,
        jitter: JitterParams { brightness, contrast, saturation, hue, order },
        grayscale,
        blur_applied,
        blur_sigma,
    }
}

/// RGB image with values in `[0, 1]`, HWC layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, AugmentError> {
        if channels != 3 {
            return Err(AugmentError::Channels(channels));
        }
        if data.len() != height * width * 3 {
            return Err(AugmentError::BufferSize { got: data.len(), expected: height * width * 3 });
        }
        Ok(Self { height, width, data })
    }

    /// Converts 8-bit pixels; single-channel images are replicated to RGB.
    pub fn from_u8(height: usize, width: usize, channels: usize, pixels: &[u8]) -> Result<Self, AugmentError> {
        if pixels.len() != height * width * channels {
            return Err(AugmentError::BufferSize { got: pixels.len(), expected: height * width * channels });
        }
        let data = match channels {
            3 => pixels.iter().map(|&p| p as f32 / 255.0).collect(),
            1 => pixels.iter().flat_map(|&p| [p as f32 / 255.0; 3]).collect(),
            other => return Err(AugmentError::Channels(other)),
        };
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self { height, width, data: (0..height * width).flat_map(|_| rgb).collect() }
    }

}

/// Pipeline stages, in application order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Crop,
    Resize,
    Flip,
    Jitter(JitterOp),
    Grayscale,
    Blur,
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

fn triangle(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// Per-output-sample taps `(source index, weight)` along one axis. The filter
/// is widened when downsampling so the result is antialiased.
fn axis_taps(src_len: usize, start: f64, extent: f64, out_len: usize, interp: Interpolation) -> Vec<Vec<(usize, f32)>> {
    let (filter, support): (fn(f64) -> f64, f64) = match interp {
        Interpolation::Bicubic => (cubic, 2.0),
        Interpolation::Bilinear => (triangle, 1.0),
    };
    let scale = extent / out_len as f64;
    let stretch = scale.max(1.0);
    let reach = support * stretch;
    (0..out_len)
        .map(|i| {
            let center = start + (i as f64 + 0.5) * scale;
            let lo = (center - reach).floor() as isize;
            let hi = (center + reach).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = filter((j as f64 + 0.5 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, src_len as isize - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.into_iter().map(|(k, w)| (k, (w / total) as f32)).collect()
        })
        .collect()
}

fn crop_resize(image: &Image, crop: &CropBox, out: usize, interp: Interpolation) -> Image {
    let xs = axis_taps(image.width, crop.x, crop.w, out, interp);
    let ys = axis_taps(image.height, crop.y, crop.h, out, interp);
    let row_lo = ys.iter().flat_map(|t| t.iter().map(|p| p.0)).min().unwrap_or(0);
    let row_hi = ys.iter().flat_map(|t| t.iter().map(|p| p.0)).max().unwrap_or(0);
    // Horizontal pass over the rows the vertical taps touch.
    let rows = row_hi - row_lo + 1;
    let mut horiz = vec![0.0f32; rows * out * 3];
    for r in 0..rows {
        let src = &image.data[(row_lo + r) * image.width * 3..(row_lo + r + 1) * image.width * 3];
        for (ox, taps) in xs.iter().enumerate() {
            let mut acc = [0.0f32; 3];
            for &(k, w) in taps {
                for c in 0..3 {
                    acc[c] += w * src[k * 3 + c];
                }
            }
            horiz[(r * out + ox) * 3..(r * out + ox) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut data = vec![0.0f32; out * out * 3];
    for (oy, taps) in ys.iter().enumerate() {
        for ox in 0..out {
            let mut acc = [0.0f32; 3];
            for &(k, w) in taps {
                let base = ((k - row_lo) * out + ox) * 3;
                for c in 0..3 {
                    acc[c] += w * horiz[base + c];
                }
            }
            for c in 0..3 {
                data[(oy * out + ox) * 3 + c] = acc[c].clamp(0.0, 1.0);
            }
        }
    }
    Image { height: out, width: out, data }
}

fn flip_horizontal(image: &mut Image) {
    let w = image.width;
    for y in 0..image.height {
        for x in 0..w / 2 {
            for c in 0..3 {
                image.data.swap((y * w + x) * 3 + c, (y * w + (w - 1 - x)) * 3 + c);
            }
        }
    }
}

fn luma(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn blend(image: &mut Image, factor: f32, other: impl Fn(&[f32]) -> [f32; 3]) {
    for px in image.data.chunks_exact_mut(3) {
        let o = other(px);
        for c in 0..3 {
            px[c] = (factor * px[c] + (1.0 - factor) * o[c]).clamp(0.0, 1.0);
        }
    }
}

fn rgb_to_hsv(p: &[f32]) -> [f32; 3] {
    let (r, g, b) = (p[0], p[1], p[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn apply_jitter_op(image: &mut Image, op: JitterOp, j: &JitterParams) {
    match op {
        JitterOp::Brightness => blend(image, j.brightness as f32, |_| [0.0; 3]),
        JitterOp::Contrast => {
            let mean = image.data.chunks_exact(3).map(luma).sum::<f32>() / (image.height * image.width) as f32;
            blend(image, j.contrast as f32, |_| [mean; 3]);
        }
        JitterOp::Saturation => blend(image, j.saturation as f32, |p| [luma(p); 3]),
        JitterOp::Hue => {
            for px in image.data.chunks_exact_mut(3) {
                let [h, s, v] = rgb_to_hsv(px);
                px.copy_from_slice(&hsv_to_rgb(h + j.hue as f32, s, v));
            }
        }
    }
}

fn to_grayscale(image: &mut Image) {
    for px in image.data.chunks_exact_mut(3) {
        let l = luma(px);
        px.fill(l);
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f32> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| (v / total) as f32).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(image: &Image, size: usize, sigma: f64) -> Image {
    let k = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let (h, w) = (image.height, image.width);
    let mut tmp = vec![0.0f32; image.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (t, &kv) in k.iter().enumerate() {
                let sx = reflect(x as isize + t as isize - r, w);
                let i = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += kv * image.data[i + c];
                }
            }
            tmp[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0f32; image.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (t, &kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + t as isize - r, h);
                let i = (sy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += kv * tmp[i + c];
                }
            }
            out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    Image { height: h, width: w, data: out }
}

/// Applies `t`, reporting each stage to `observe` as it runs.
pub fn apply_transform_observed(
    image: &Image,
    t: &TransformParams,
    policy: &AugmentPolicy,
    mut observe: impl FnMut(Stage),
) -> Image {
    observe(Stage::Crop);
    observe(Stage::Resize);
    let mut out = crop_resize(image, &t.crop, policy.resolution, policy.interpolation);
    if t.flip {
        observe(Stage::Flip);
        flip_horizontal(&mut out);
    }
    if t.jitter_applied {
        for op in t.jitter.order {
            observe(Stage::Jitter(op));
            apply_jitter_op(&mut out, op, &t.jitter);
        }
    }
    if t.grayscale {
        observe(Stage::Grayscale);
        to_grayscale(&mut out);
    }
    if t.blur_applied {
        observe(Stage::Blur);
        out = gaussian_blur(&out, policy.blur_kernel, t.blur_sigma);
    }
    out
}

/// Produces one `resolution × resolution` view of `image`.
pub fn apply_transform(image: &Image, t: &TransformParams, policy: &AugmentPolicy) -> Image {
    apply_transform_observed(image, t, policy, |_| {})
}

/// Per-channel standardization statistics of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ChannelStats {
    pub const IDENTITY: ChannelStats = ChannelStats { mean: [0.0; 3], std: [1.0; 3] };

    pub fn standardize_into(&self, image: &Image, out: &mut [f32]) {
        for (dst, src) in out.chunks_exact_mut(3).zip(image.data.chunks_exact(3)) {
            for c in 0..3 {
                dst[c] = (src[c] - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Deterministic generator for one view of one source image in one epoch.
pub fn view_rng(seed: u64, epoch: u64, source_id: u64, view: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch, source_id, view]))
}

/// Views of one minibatch, each `B × R × R × 3`, standardized.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub views: Vec<FeatureMap>,
    pub source_ids: Vec<u64>,
}

impl ViewBatch {
    pub fn view(&self, i: usize) -> &FeatureMap {
        &self.views[i]
    }
    pub fn batch_size(&self) -> usize {
        self.source_ids.len()
    }
}

/// Builds `num_views` independently transformed views per source image.
/// View `k` of source `id` in `epoch` always uses the same random stream, so
/// results do not depend on batching or worker count.
pub fn make_views(
    images: &[&Image],
    source_ids: &[u64],
    num_views: usize,
    seed: u64,
    epoch: u64,
    policy: &AugmentPolicy,
    stats: &ChannelStats,
) -> Result<ViewBatch, AugmentError> {
    if images.is_empty() {
        return Err(AugmentError::EmptyBatch);
    }
    assert_eq!(images.len(), source_ids.len(), "one source id per image");
    let res = policy.resolution;
    let per = res * res * 3;
    let mut views = Vec::with_capacity(num_views);
    for v in 0..num_views {
        let mut data = vec![0.0f32; images.len() * per];
        for (i, (img, &id)) in images.iter().zip(source_ids).enumerate() {
            let mut rng = view_rng(seed, epoch, id, v as u64);
            let t = sample_transform(&mut rng, policy, img.height, img.width);
            let out = apply_transform(img, &t, policy);
            stats.standardize_into(&out, &mut data[i * per..(i + 1) * per]);
        }
        views.push(FeatureMap::new(images.len(), res, res, 3, data));
    }
    Ok(ViewBatch { views, source_ids: source_ids.to_vec() })
}

/// Deterministic eval-time preprocessing: resize the whole image and standardize.
pub fn eval_view(image: &Image, resolution: usize, interp: Interpolation, stats: &ChannelStats, out: &mut [f32]) {
    let crop = CropBox { x: 0.0, y: 0.0, w: image.width as f64, h: image.height as f64 };
    let resized = crop_resize(image, &crop, resolution, interp);
    stats.standardize_into(&resized, out);
}
