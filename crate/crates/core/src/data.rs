//! Dataset registry, ingestion of canonical on-disk layouts, and the
//! verified internal store read by training and evaluation.
//!
//! An ingested dataset lives under `<root>/<id>/` as `manifest.json`
//! (a [`DatasetEntry`]) plus `data.bin`. The manifest records the SHA-256 of
//! `data.bin`; loading refuses a store whose bytes do not match.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{ChannelStats, Image};

pub const STORE_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const DATA: &str = "data.bin";
const SOURCE_SUMS: &str = "SHA256SUMS";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset id `{id}`; supported: {}", supported.join(", "))]
    UnknownId { id: String, supported: Vec<String> },
    #[error("dataset `{id}` is not ingested under {root}")]
    NotIngested { id: String, root: PathBuf },
    #[error("checksum mismatch for {path}: expected {expected}, got {actual}")]
    Checksum { path: PathBuf, expected: String, actual: String },
    #[error("malformed data in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("class count mismatch: expected {expected}, got {got}")]
    ClassCount { expected: usize, got: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Format { path: path.to_path_buf(), reason: reason.into() }
}

/// How a dataset is laid out in its source directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `data_batch_{1..5}.bin`, `test_batch.bin`; one label byte per record.
    Cifar10,
    /// `train.bin`, `test.bin`; coarse and fine label bytes, fine is used.
    Cifar100,
    /// `{train,test,unlabeled}_X.bin`, `{train,test}_y.bin`; labels 1-based.
    Stl10,
    /// `train-images-idx3-ubyte` and friends, uncompressed.
    Idx,
    /// `wnids.txt`, `train/<wnid>/images/*`, `val/val_annotations.txt`.
    TinyImagenet,
    /// `train/<class>/*.png|jpg`, `test/<class>/*`; classes sorted by name.
    ImageFolder,
    /// Generated procedurally; no source directory needed.
    Synthetic { grayscale: bool },
}

/// Static description of a supported dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub id: &'static str,
    pub layout: Layout,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Canonical number of images available to pretraining.
    pub pretrain_images: usize,
}

const REGISTRY: &[DatasetSpec] = &[
    DatasetSpec { id: "cifar10", layout: Layout::Cifar10, height: 32, width: 32, channels: 3, num_classes: 10, pretrain_images: 50_000 },
    DatasetSpec { id: "cifar100", layout: Layout::Cifar100, height: 32, width: 32, channels: 3, num_classes: 100, pretrain_images: 50_000 },
    DatasetSpec { id: "stl10", layout: Layout::Stl10, height: 96, width: 96, channels: 3, num_classes: 10, pretrain_images: 105_000 },
    DatasetSpec { id: "tiny-imagenet", layout: Layout::TinyImagenet, height: 64, width: 64, channels: 3, num_classes: 200, pretrain_images: 100_000 },
    DatasetSpec { id: "mnist", layout: Layout::Idx, height: 28, width: 28, channels: 1, num_classes: 10, pretrain_images: 60_000 },
    DatasetSpec { id: "fashion-mnist", layout: Layout::Idx, height: 28, width: 28, channels: 1, num_classes: 10, pretrain_images: 60_000 },
    DatasetSpec { id: "kmnist", layout: Layout::Idx, height: 28, width: 28, channels: 1, num_classes: 10, pretrain_images: 60_000 },
    DatasetSpec { id: "usps", layout: Layout::ImageFolder, height: 16, width: 16, channels: 1, num_classes: 10, pretrain_images: 7_291 },
    DatasetSpec { id: "svhn", layout: Layout::ImageFolder, height: 32, width: 32, channels: 3, num_classes: 10, pretrain_images: 73_257 },
    DatasetSpec { id: "toy-shapes", layout: Layout::Synthetic { grayscale: false }, height: 32, width: 32, channels: 3, num_classes: 10, pretrain_images: TOY_TRAIN },
    DatasetSpec { id: "toy-shapes-gray", layout: Layout::Synthetic { grayscale: true }, height: 32, width: 32, channels: 1, num_classes: 10, pretrain_images: TOY_TRAIN },
];

pub fn supported_ids() -> Vec<String> {
    REGISTRY.iter().map(|s| s.id.to_string()).collect()
}

pub fn lookup(id: &str) -> Result<&'static DatasetSpec, DataError> {
    REGISTRY
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| DataError::UnknownId { id: id.to_string(), supported: supported_ids() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    Unlabeled,
    Train,
    Test,
}

/// Registered metadata of an ingested dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub unlabeled: usize,
    pub train: usize,
    pub test: usize,
    /// Over the pretraining images, in `[0, 1]` units after RGB replication.
    pub stats: ChannelStats,
    /// SHA-256 of `data.bin`.
    pub checksum: String,
    /// SHA-256 over the source files, when the source carried one.
    pub source_checksum: Option<String>,
}

impl DatasetEntry {
    pub fn pretrain_len(&self) -> usize {
        self.unlabeled + self.train
    }
}

/// Images (HWC, `u8`) and labels of one split. Unlabeled splits carry no labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub images: Vec<u8>,
    pub labels: Vec<u32>,
}

impl Split {
    fn len(&self, pixels: usize) -> usize {
        self.images.len() / pixels.max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub entry: DatasetEntry,
    unlabeled: Split,
    train: Split,
    test: Split,
}

/// Label-free source of images, the only view handed to pretraining.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;
    fn image(&self, index: usize) -> Image;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Source of labeled images for evaluation.
pub trait LabeledSource: ImageSource {
    fn label(&self, index: usize) -> u32;
    fn num_classes(&self) -> usize;
    fn labels(&self) -> Vec<u32> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }
}

impl Dataset {
    pub fn pixels(&self) -> usize {
        self.entry.height * self.entry.width * self.entry.channels
    }

    fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Unlabeled => &self.unlabeled,
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }

    fn decode(&self, split: &Split, index: usize) -> Image {
        let px = self.pixels();
        let e = &self.entry;
        Image::from_u8(e.height, e.width, e.channels, &split.images[index * px..(index + 1) * px])
            .expect("store geometry validated at load")
    }

    /// Training images followed by the unlabeled pool, labels stripped.
    pub fn pretrain(&self) -> PretrainView<'_> {
        PretrainView { data: self }
    }

    pub fn labeled(&self, kind: SplitKind) -> LabeledView<'_> {
        assert!(kind != SplitKind::Unlabeled, "unlabeled split has no labels");
        LabeledView { data: self, kind }
    }
}

pub struct PretrainView<'a> {
    data: &'a Dataset,
}

impl ImageSource for PretrainView<'_> {
    fn len(&self) -> usize {
        self.data.entry.pretrain_len()
    }
    fn image(&self, index: usize) -> Image {
        let n_train = self.data.entry.train;
        if index < n_train {
            self.data.decode(&self.data.train, index)
        } else {
            self.data.decode(&self.data.unlabeled, index - n_train)
        }
    }
}

pub struct LabeledView<'a> {
    data: &'a Dataset,
    kind: SplitKind,
}

impl ImageSource for LabeledView<'_> {
    fn len(&self) -> usize {
        self.data.split(self.kind).len(self.data.pixels())
    }
    fn image(&self, index: usize) -> Image {
        self.data.decode(self.data.split(self.kind), index)
    }
}

impl LabeledSource for LabeledView<'_> {
    fn label(&self, index: usize) -> u32 {
        self.data.split(self.kind).labels[index]
    }
    fn num_classes(&self) -> usize {
        self.data.entry.num_classes
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(io_err(path))
}

/// Verifies `SHA256SUMS` in a source directory when present.
fn verify_source_sums(dir: &Path) -> Result<Option<String>, DataError> {
    let sums = dir.join(SOURCE_SUMS);
    if !sums.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&sums).map_err(io_err(&sums))?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let (Some(expected), Some(rel)) = (parts.next(), parts.next()) else {
            return Err(format_err(&sums, format!("bad line `{line}`")));
        };
        let rel = rel.trim_start_matches('*');
        let path = dir.join(rel);
        let actual = sha256_hex(&read_file(&path)?);
        if !actual.eq_ignore_ascii_case(expected) {
            return Err(DataError::Checksum { path, expected: expected.to_string(), actual });
        }
    }
    Ok(Some(sha256_hex(text.as_bytes())))
}

fn parse_records(path: &Path, label_bytes: usize, label_index: usize, pixels: usize) -> Result<Split, DataError> {
    let bytes = read_file(path)?;
    let rec = label_bytes + pixels;
    if bytes.len() % rec != 0 {
        return Err(format_err(path, format!("size {} is not a multiple of record size {rec}", bytes.len())));
    }
    let n = bytes.len() / rec;
    let side = ((pixels / 3) as f64).sqrt() as usize;
    let mut split = Split { images: Vec::with_capacity(n * pixels), labels: Vec::with_capacity(n) };
    for r in bytes.chunks_exact(rec) {
        split.labels.push(r[label_index] as u32);
        let planes = &r[label_bytes..];
        // CHW planes to HWC
        for i in 0..side * side {
            for c in 0..3 {
                split.images.push(planes[c * side * side + i]);
            }
        }
    }
    Ok(split)
}

fn concat(parts: Vec<Split>) -> Split {
    let mut out = Split::default();
    for p in parts {
        out.images.extend(p.images);
        out.labels.extend(p.labels);
    }
    out
}

fn ingest_cifar10(dir: &Path) -> Result<(Split, Split, Split), DataError> {
    let train = (1..=5)
        .map(|i| parse_records(&dir.join(format!("data_batch_{i}.bin")), 1, 0, 3072))
        .collect::<Result<Vec<_>, _>>()?;
    let test = parse_records(&dir.join("test_batch.bin"), 1, 0, 3072)?;
    Ok((Split::default(), concat(train), test))
}

fn ingest_cifar100(dir: &Path) -> Result<(Split, Split, Split), DataError> {
    let train = parse_records(&dir.join("train.bin"), 2, 1, 3072)?;
    let test = parse_records(&dir.join("test.bin"), 2, 1, 3072)?;
    Ok((Split::default(), train, test))
}

fn stl_images(path: &Path) -> Result<Vec<u8>, DataError> {
    const SIDE: usize = 96;
    const PX: usize = SIDE * SIDE * 3;
    let bytes = read_file(path)?;
    if bytes.len() % PX != 0 {
        return Err(format_err(path, "size is not a multiple of 96*96*3"));
    }
    let mut out = Vec::with_capacity(bytes.len());
    for img in bytes.chunks_exact(PX) {
        // channel planes, each stored column-major
        for y in 0..SIDE {
            for x in 0..SIDE {
                for c in 0..3 {
                    out.push(img[c * SIDE * SIDE + x * SIDE + y]);
                }
            }
        }
    }
    Ok(out)
}

fn stl_labels(path: &Path) -> Result<Vec<u32>, DataError> {
    read_file(path)?
        .into_iter()
        .map(|b| {
            if (1..=10).contains(&b) {
                Ok(b as u32 - 1)
            } else {
                Err(format_err(path, format!("label {b} outside 1..=10")))
            }
        })
        .collect()
}

fn ingest_stl10(dir: &Path) -> Result<(Split, Split, Split), DataError> {
    let train = Split { images: stl_images(&dir.join("train_X.bin"))?, labels: stl_labels(&dir.join("train_y.bin"))? };
    let test = Split { images: stl_images(&dir.join("test_X.bin"))?, labels: stl_labels(&dir.join("test_y.bin"))? };
    let unlabeled_path = dir.join("unlabeled_X.bin");
    let unlabeled = Split { images: stl_images(&unlabeled_path)?, labels: Vec::new() };
    Ok((unlabeled, train, test))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn idx_split(images: &Path, labels: &Path) -> Result<Split, DataError> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;
    if img.len() < 16 || be_u32(&img, 0) != 0x0803 {
        return Err(format_err(images, "not an IDX image file"));
    }
    if lab.len() < 8 || be_u32(&lab, 0) != 0x0801 {
        return Err(format_err(labels, "not an IDX label file"));
    }
    let n = be_u32(&img, 4) as usize;
    let px = be_u32(&img, 8) as usize * be_u32(&img, 12) as usize;
    if img.len() != 16 + n * px {
        return Err(format_err(images, "truncated image data"));
    }
    if be_u32(&lab, 4) as usize != n || lab.len() != 8 + n {
        return Err(format_err(labels, "label count does not match images"));
    }
    Ok(Split { images: img[16..].to_vec(), labels: lab[8..].iter().map(|&b| b as u32).collect() })
}

fn ingest_idx(dir: &Path) -> Result<(Split, Split, Split), DataError> {
    let train = idx_split(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = idx_split(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((Split::default(), train, test))
}

fn decode_image_file(path: &Path, spec: &DatasetSpec) -> Result<Vec<u8>, DataError> {
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?;
    if (img.height() as usize, img.width() as usize) != (spec.height, spec.width) {
        return Err(format_err(
            path,
            format!("expected {}x{}, got {}x{}", spec.height, spec.width, img.height(), img.width()),
        ));
    }
    Ok(if spec.channels == 1 { img.to_luma8().into_raw() } else { img.to_rgb8().into_raw() })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort();
    Ok(out)
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn folder_split(dir: &Path, spec: &DatasetSpec, classes: &[String]) -> Result<Split, DataError> {
    let mut split = Split::default();
    for (label, class) in classes.iter().enumerate() {
        let class_dir = dir.join(class);
        for file in sorted_entries(&class_dir)?.into_iter().filter(|p| is_image_file(p)) {
            split.images.extend(decode_image_file(&file, spec)?);
            split.labels.push(label as u32);
        }
    }
    Ok(split)
}

fn ingest_image_folder(dir: &Path, spec: &DatasetSpec) -> Result<(Split, Split, Split), DataError> {
    let train_dir = dir.join("train");
    let classes: Vec<String> = sorted_entries(&train_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    if classes.len() != spec.num_classes {
        return Err(DataError::ClassCount { expected: spec.num_classes, got: classes.len() });
    }
    let train = folder_split(&train_dir, spec, &classes)?;
    let test = folder_split(&dir.join("test"), spec, &classes)?;
    Ok((Split::default(), train, test))
}

fn ingest_tiny_imagenet(dir: &Path, spec: &DatasetSpec) -> Result<(Split, Split, Split), DataError> {
    let wnids_path = dir.join("wnids.txt");
    let wnids: Vec<String> = fs::read_to_string(&wnids_path)
        .map_err(io_err(&wnids_path))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if wnids.len() != spec.num_classes {
        return Err(DataError::ClassCount { expected: spec.num_classes, got: wnids.len() });
    }
    let mut train = Split::default();
    for (label, wnid) in wnids.iter().enumerate() {
        let images = dir.join("train").join(wnid).join("images");
        for file in sorted_entries(&images)?.into_iter().filter(|p| is_image_file(p)) {
            train.images.extend(decode_image_file(&file, spec)?);
            train.labels.push(label as u32);
        }
    }
    let ann_path = dir.join("val").join("val_annotations.txt");
    let ann = fs::File::open(&ann_path).map_err(io_err(&ann_path))?;
    let mut test = Split::default();
    for line in BufReader::new(ann).lines() {
        let line = line.map_err(io_err(&ann_path))?;
        let mut cols = line.split('\t');
        let (Some(file), Some(wnid)) = (cols.next(), cols.next()) else {
            continue;
        };
        let label = wnids
            .iter()
            .position(|w| w == wnid)
            .ok_or_else(|| format_err(&ann_path, format!("unknown class `{wnid}`")))?;
        test.images.extend(decode_image_file(&dir.join("val").join("images").join(file), spec)?);
        test.labels.push(label as u32);
    }
    Ok((Split::default(), train, test))
}

pub const TOY_TRAIN: usize = 5_000;
pub const TOY_TEST: usize = 1_000;
pub const TOY_CLASSES: usize = 10;
const TOY_SIDE: usize = 32;

/// Shape membership in local coordinates `(u, v) ∈ [-1, 1]²`, `v` pointing down.
fn toy_shape(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 < 1.0,
        1 => u.abs().max(v.abs()) < 0.8,
        2 => v < 0.8 && v > -0.9 && u.abs() < (v + 0.9) * 0.6,
        3 => (u.abs() < 0.28 && v.abs() < 1.0) || (v.abs() < 0.28 && u.abs() < 1.0),
        4 => r2 < 1.0 && r2 > 0.36,
        5 => u.abs() + v.abs() < 1.0,
        6 => {
            let (a, b) = ((u + v) * std::f64::consts::FRAC_1_SQRT_2, (u - v) * std::f64::consts::FRAC_1_SQRT_2);
            (a.abs() < 0.25 && b.abs() < 1.0) || (b.abs() < 0.25 && a.abs() < 1.0)
        }
        7 => u.abs().max(v.abs()) < 0.9 && (((v + 0.9) * 2.5).floor() as i64) % 2 == 0,
        8 => u.abs().max(v.abs()) < 0.9 && (((u + 0.9) * 2.5).floor() as i64) % 2 == 0,
        _ => r2 < 1.0 && (u - 0.45).powi(2) + v * v > 0.5,
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn luminance(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// One synthetic image: a randomly placed, sized and colored shape of
/// `class` on a random background, with pixel noise.
fn toy_image(rng: &mut impl Rng, class: usize, grayscale: bool) -> Vec<u8> {
    let side = TOY_SIDE as f64;
    let radius = rng.random_range(7.0..11.0);
    let cx = rng.random_range(radius + 1.0..side - radius - 1.0);
    let cy = rng.random_range(radius + 1.0..side - radius - 1.0);
    let (fg, bg) = loop {
        let fg = random_color(rng);
        let bg = random_color(rng);
        if (luminance(&fg) - luminance(&bg)).abs() > 0.2 {
            break (fg, bg);
        }
    };
    let channels = if grayscale { 1 } else { 3 };
    let mut out = Vec::with_capacity(TOY_SIDE * TOY_SIDE * channels);
    for y in 0..TOY_SIDE {
        for x in 0..TOY_SIDE {
            // 3x3 supersampling for soft edges
            let mut cover = 0.0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let px = x as f64 + (sx as f64 + 0.5) / 3.0;
                    let py = y as f64 + (sy as f64 + 0.5) / 3.0;
                    if toy_shape(class, (px - cx) / radius, (py - cy) / radius) {
                        cover += 1.0 / 9.0;
                    }
                }
            }
            let noise: f64 = rng.random_range(-0.04..0.04);
            let rgb: Vec<f64> = (0..3).map(|c| cover * fg[c] + (1.0 - cover) * bg[c] + noise).collect();
            if grayscale {
                let l = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                out.push((l.clamp(0.0, 1.0) * 255.0).round() as u8);
            } else {
                out.extend(rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            }
        }
    }
    out
}

fn toy_split(seed: u64, n: usize, grayscale: bool) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for i in 0..n {
        let class = i % TOY_CLASSES;
        split.images.extend(toy_image(&mut rng, class, grayscale));
        split.labels.push(class as u32);
    }
    split
}

/// The bundled synthetic dataset; a fixed function of `grayscale`.
pub fn generate_toy(grayscale: bool) -> (Split, Split, Split) {
    let base = if grayscale { 0x6772_6179 } else { 0x746f_7973 };
    (Split::default(), toy_split(base, TOY_TRAIN, grayscale), toy_split(base + 1, TOY_TEST, grayscale))
}

fn channel_stats(images: &[&[u8]], channels: usize) -> ChannelStats {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0usize;
    for buf in images {
        for px in buf.chunks_exact(channels) {
            for c in 0..3 {
                let v = px[if channels == 1 { 0 } else { c }] as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    let mean = sum.map(|s| s / n);
    let mut std = [1.0f32; 3];
    for c in 0..3 {
        let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
        std[c] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
    }
    ChannelStats { mean: mean.map(|m| m as f32), std }
}

fn encode_store(unlabeled: &Split, train: &Split, test: &Split) -> Vec<u8> {
    let mut out = Vec::new();
    for split in [unlabeled, train, test] {
        out.extend((split.images.len() as u64).to_le_bytes());
        out.extend(&split.images);
        out.extend((split.labels.len() as u64).to_le_bytes());
        for l in &split.labels {
            out.extend(l.to_le_bytes());
        }
    }
    out
}

fn decode_store(path: &Path, bytes: &[u8]) -> Result<[Split; 3], DataError> {
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8], DataError> {
        let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| format_err(path, "truncated store"))?;
        let s = &bytes[at..end];
        at = end;
        Ok(s)
    };
    let mut splits: [Split; 3] = Default::default();
    for split in splits.iter_mut() {
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        split.images = take(n)?.to_vec();
        let m = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        split.labels = take(m.checked_mul(4).ok_or_else(|| format_err(path, "bad label count"))?)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
    }
    Ok(splits)
}

fn validate_splits(spec: &DatasetSpec, path: &Path, splits: [&Split; 3]) -> Result<(), DataError> {
    let px = spec.height * spec.width * spec.channels;
    for (i, split) in splits.iter().enumerate() {
        if split.images.len() % px != 0 {
            return Err(format_err(path, "image bytes do not match the dataset geometry"));
        }
        let n = split.images.len() / px;
        let labeled = i > 0;
        if labeled && split.labels.len() != n {
            return Err(format_err(path, format!("{} images but {} labels", n, split.labels.len())));
        }
        if !labeled && !split.labels.is_empty() {
            return Err(format_err(path, "unlabeled split carries labels"));
        }
        if let Some(bad) = split.labels.iter().find(|&&l| l as usize >= spec.num_classes) {
            return Err(format_err(path, format!("label {bad} outside {} classes", spec.num_classes)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum IngestOutcome {
    Created(DatasetEntry),
    /// Already present and verified; nothing was written.
    AlreadyPresent(DatasetEntry),
}

impl IngestOutcome {
    pub fn entry(&self) -> &DatasetEntry {
        match self {
            IngestOutcome::Created(e) | IngestOutcome::AlreadyPresent(e) => e,
        }
    }
}

pub fn dataset_dir(root: &Path, id: &str) -> PathBuf {
    root.join(id)
}

/// Reads the source layout of `id`, verifies it, and writes the internal
/// store under `root`. Re-ingesting a verified dataset is a no-op.
pub fn ingest_dataset(id: &str, source: Option<&Path>, root: &Path) -> Result<IngestOutcome, DataError> {
    let spec = lookup(id)?;
    if let Ok(entry) = read_entry(root, id) {
        if verify_store(root, &entry).is_ok() {
            return Ok(IngestOutcome::AlreadyPresent(entry));
        }
    }
    let need_source = || {
        source.ok_or_else(|| format_err(Path::new(id), "this dataset needs a source directory"))
    };
    let (source_checksum, (unlabeled, train, test)) = match spec.layout {
        Layout::Synthetic { grayscale } => (None, generate_toy(grayscale)),
        layout => {
            let dir = need_source()?;
            let sums = verify_source_sums(dir)?;
            let splits = match layout {
                Layout::Cifar10 => ingest_cifar10(dir)?,
                Layout::Cifar100 => ingest_cifar100(dir)?,
                Layout::Stl10 => ingest_stl10(dir)?,
                Layout::Idx => ingest_idx(dir)?,
                Layout::TinyImagenet => ingest_tiny_imagenet(dir, spec)?,
                Layout::ImageFolder => ingest_image_folder(dir, spec)?,
                Layout::Synthetic { .. } => unreachable!(),
            };
            (sums, splits)
        }
    };
    let store_dir = dataset_dir(root, id);
    validate_splits(spec, &store_dir, [&unlabeled, &train, &test])?;
    let px = spec.height * spec.width * spec.channels;
    let pretrain_images = unlabeled.len(px) + train.len(px);
    if pretrain_images != spec.pretrain_images {
        log::warn!("{id}: {pretrain_images} pretraining images, canonical count is {}", spec.pretrain_images);
    }
    let stats = channel_stats(&[&train.images, &unlabeled.images], spec.channels);
    let bytes = encode_store(&unlabeled, &train, &test);
    let entry = DatasetEntry {
        id: id.to_string(),
        format_version: STORE_FORMAT_VERSION,
        height: spec.height,
        width: spec.width,
        channels: spec.channels,
        num_classes: spec.num_classes,
        unlabeled: unlabeled.len(px),
        train: train.len(px),
        test: test.len(px),
        stats,
        checksum: sha256_hex(&bytes),
        source_checksum,
    };
    fs::create_dir_all(&store_dir).map_err(io_err(&store_dir))?;
    let data_path = store_dir.join(DATA);
    write_atomic(&data_path, &bytes)?;
    let manifest = serde_json::to_vec_pretty(&entry).expect("entry serializes");
    write_atomic(&store_dir.join(MANIFEST), &manifest)?;
    Ok(IngestOutcome::Created(entry))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Reads a registered entry without touching the image data.
pub fn read_entry(root: &Path, id: &str) -> Result<DatasetEntry, DataError> {
    lookup(id)?;
    let path = dataset_dir(root, id).join(MANIFEST);
    if !path.exists() {
        return Err(DataError::NotIngested { id: id.to_string(), root: root.to_path_buf() });
    }
    let text = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&text).map_err(|e| format_err(&path, e.to_string()))
}

fn read_verified(root: &Path, entry: &DatasetEntry) -> Result<Vec<u8>, DataError> {
    let path = dataset_dir(root, &entry.id).join(DATA);
    let mut bytes = Vec::new();
    fs::File::open(&path).map_err(io_err(&path))?.read_to_end(&mut bytes).map_err(io_err(&path))?;
    let actual = sha256_hex(&bytes);
    if actual != entry.checksum {
        return Err(DataError::Checksum { path, expected: entry.checksum.clone(), actual });
    }
    Ok(bytes)
}

/// Confirms that the stored bytes still match the manifest checksum.
pub fn verify_store(root: &Path, entry: &DatasetEntry) -> Result<(), DataError> {
    read_verified(root, entry).map(|_| ())
}

/// Loads an ingested dataset, refusing it on checksum mismatch.
pub fn load_dataset(root: &Path, id: &str) -> Result<Dataset, DataError> {
    let spec = lookup(id)?;
    let entry = read_entry(root, id)?;
    let bytes = read_verified(root, &entry)?;
    let path = dataset_dir(root, id).join(DATA);
    let [unlabeled, train, test] = decode_store(&path, &bytes)?;
    validate_splits(spec, &path, [&unlabeled, &train, &test])?;
    Ok(Dataset { entry, unlabeled, train, test })
}
