//! Downstream protocols: linear probe, label-fraction fine-tuning and
//! cross-dataset transfer, plus report files and their aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{eval_view, ChannelStats, Interpolation};
use crate::checkpoint::Checkpoint;
pub use crate::config::Protocol;
use crate::config::RunConfig;
use crate::data::{Dataset, LabeledSource, SplitKind};
use crate::networks::{apply_stat_updates, build_encoder, init_entries, ArchitectureSpec, NetworkError};
use crate::nn::{FeatureMap, ForwardCtx, Gradients, Layer, Linear, NormMode, Sequential};
use crate::rng::{derive_seed, stream};
use crate::updates::{optimizer_step, OptimizerHyper, SgdState, UpdateError};
use crate::weights::{Branch, Role, WeightSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class count mismatch: {0}")]
    ClassMismatch(String),
    #[error("invalid probe setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub protocol: Protocol,
    pub epochs: usize,
    pub eval_every: usize,
    pub label_fraction: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerHyper,
    pub seed: u64,
    pub frozen_backbone: bool,
    pub from_scratch: bool,
    pub interpolation: Interpolation,
    /// Hash of the run config that launched this evaluation.
    pub config_hash: String,
}

impl ProbeConfig {
    pub fn from_run(run: &RunConfig) -> Self {
        let p = &run.probe;
        let (epochs, every) = p.protocol.default_cadence();
        Self {
            protocol: p.protocol,
            epochs: p.epochs.unwrap_or(epochs),
            eval_every: p.eval_every.unwrap_or(every),
            label_fraction: p.label_fraction,
            batch_size: p.batch_size,
            optimizer: p.optimizer.clone(),
            seed: p.seed.unwrap_or(run.train.seed),
            frozen_backbone: p.frozen_backbone,
            from_scratch: p.from_scratch,
            interpolation: run.augment.interpolation,
            config_hash: run.hash(),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(EvalError::Setup(format!("label_fraction must be in (0, 1], got {}", self.label_fraction)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(EvalError::Setup("batch_size and eval_every must be >= 1".into()));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

/// Where a backbone came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Pretraining method, e.g. `tribyol`, or `random` for an untrained encoder.
    pub method: String,
    pub pretrain_dataset: String,
    pub pretrain_config_hash: String,
    pub pretrain_batch_size: Option<usize>,
}

/// Encoder weights plus the architecture that reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub spec: ArchitectureSpec,
    pub weights: WeightSet,
    pub provenance: Provenance,
}

impl Backbone {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        let run = &ckpt.manifest.config;
        Self {
            spec: run.model.architecture(),
            weights: ckpt.state.online.filter_roles(&[Role::Encoder]),
            provenance: Provenance {
                method: ckpt.manifest.mode.as_str().to_string(),
                pretrain_dataset: run.dataset.id.clone(),
                pretrain_config_hash: ckpt.manifest.config_hash.clone(),
                pretrain_batch_size: Some(run.train.batch_size),
            },
        }
    }

    /// Freshly initialized encoder, the chance-level baseline.
    pub fn random(spec: ArchitectureSpec, seed: u64) -> Self {
        let encoder = build_encoder(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, stream::INIT]));
        let weights = init_entries(&encoder.param_slots(), &mut rng, Branch::Online);
        Self {
            spec,
            weights,
            provenance: Provenance {
                method: "random".into(),
                pretrain_dataset: "none".into(),
                pretrain_config_hash: "none".into(),
                pretrain_batch_size: None,
            },
        }
    }

    pub fn hash(&self) -> String {
        self.weights.content_hash()
    }
}

/// Labeled train/test splits of one dataset with its input statistics.
pub struct EvalData<'a> {
    pub id: String,
    pub train: &'a dyn LabeledSource,
    pub test: &'a dyn LabeledSource,
    pub stats: ChannelStats,
}

/// Owns the views borrowed by [`EvalData`].
pub struct DatasetSplits<'a> {
    train: crate::data::LabeledView<'a>,
    test: crate::data::LabeledView<'a>,
    dataset: &'a Dataset,
}

impl<'a> DatasetSplits<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Self { train: dataset.labeled(SplitKind::Train), test: dataset.labeled(SplitKind::Test), dataset }
    }

    pub fn eval_data(&self) -> EvalData<'_> {
        EvalData {
            id: self.dataset.entry.id.clone(),
            train: &self.train,
            test: &self.test,
            stats: self.dataset.entry.stats,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub method: String,
    pub pretrain_dataset: String,
    pub eval_dataset: String,
    pub label_fraction: f64,
    pub pretrain_batch_size: Option<usize>,
    pub frozen_backbone: bool,
    /// Test accuracy (%) at each point of the evaluation cadence.
    pub accuracies: Vec<EvalPoint>,
    /// Maximum over `accuracies`.
    pub selected_accuracy: f64,
    pub seed: u64,
    pub config_hash: String,
    pub pretrain_config_hash: String,
    pub backbone_hash: String,
    pub train_examples: usize,
}

impl EvalReport {
    pub fn is_consistent(&self) -> bool {
        let max = self.accuracies.iter().map(|p| p.accuracy).fold(f64::NEG_INFINITY, f64::max);
        !self.accuracies.is_empty()
            && self.accuracies.iter().all(|p| (0.0..=100.0).contains(&p.accuracy))
            && max == self.selected_accuracy
    }
}

/// Stratified label subset: `⌈fraction·n_c⌉` indices of every class `c`,
/// at least one per non-empty class. Sorted, deterministic under `seed`.
pub fn subsample_labels(labels: &[u32], num_classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, EvalError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::Setup(format!("label fraction must be in (0, 1], got {fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        let slot = by_class
            .get_mut(l as usize)
            .ok_or_else(|| EvalError::ClassMismatch(format!("label {l} outside {num_classes} classes")))?;
        slot.push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, stream::EVAL, fraction.to_bits()]));
    let mut out = Vec::new();
    let mut raised = false;
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        // Guard against products such as 0.01·5000 landing a hair above an integer.
        let exact = fraction * members.len() as f64;
        let mut take = (exact - 1e-9).ceil() as usize;
        if take == 0 {
            take = 1;
            if !raised {
                log::warn!("label fraction {fraction} leaves class {class} empty; keeping one example per class");
                raised = true;
            }
        }
        members.shuffle(&mut rng);
        out.extend(members.into_iter().take(take));
    }
    out.sort_unstable();
    Ok(out)
}

fn check_classes(data: &EvalData) -> Result<usize, EvalError> {
    let c = data.train.num_classes();
    if data.test.num_classes() != c {
        return Err(EvalError::ClassMismatch(format!(
            "train split has {c} classes, test split has {}",
            data.test.num_classes()
        )));
    }
    for split in [data.train, data.test] {
        if let Some(bad) = (0..split.len()).map(|i| split.label(i)).find(|&l| l as usize >= c) {
            return Err(EvalError::ClassMismatch(format!("label {bad} outside {c} classes")));
        }
    }
    Ok(c)
}

/// Preprocessed input tensor for the given indices.
fn input_batch(src: &dyn LabeledSource, idx: &[usize], res: usize, interp: Interpolation, stats: &ChannelStats) -> FeatureMap {
    let per = res * res * 3;
    let mut buf = vec![0.0f32; idx.len() * per];
    for (k, &i) in idx.iter().enumerate() {
        eval_view(&src.image(i), res, interp, stats, &mut buf[k * per..(k + 1) * per]);
    }
    FeatureMap::new(idx.len(), res, res, 3, buf)
}

/// Encoder features (running statistics) of `idx`, row-major `n × F`.
fn extract_features(
    encoder: &Sequential,
    weights: &WeightSet,
    src: &dyn LabeledSource,
    idx: &[usize],
    res: usize,
    cfg: &ProbeConfig,
    stats: &ChannelStats,
) -> Vec<f32> {
    let store = weights.to_store();
    let mut out = Vec::new();
    for chunk in idx.chunks(128) {
        let x = input_batch(src, chunk, res, cfg.interpolation, stats);
        let mut ctx = ForwardCtx::new(NormMode::Running, false);
        out.extend(encoder.forward(&store, x, &mut ctx).0.data);
    }
    out
}

fn classifier(features: usize, classes: usize) -> Sequential {
    Sequential::new(vec![Layer::Linear(Linear { name: "classifier".into(), in_features: features, out_features: classes })])
}

fn init_classifier(head: &Sequential, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, stream::EVAL, 1]));
    init_entries(&head.param_slots(), &mut rng, Branch::Online)
}

/// Mean softmax cross-entropy and its gradient on the logits.
fn cross_entropy(logits: &FeatureMap, labels: &[u32]) -> (f64, FeatureMap) {
    let (b, c) = (logits.batch, logits.channels);
    let mut grad = vec![0.0f32; b * c];
    let mut loss = 0.0f64;
    for r in 0..b {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let y = labels[r] as usize;
        loss += -(exps[y] / sum).ln();
        for j in 0..c {
            let p = exps[j] / sum - if j == y { 1.0 } else { 0.0 };
            grad[r * c + j] = (p / b as f64) as f32;
        }
    }
    (loss / b as f64, FeatureMap::dense(b, c, grad))
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

fn accuracy(logits: &FeatureMap, labels: &[u32]) -> f64 {
    let hits = (0..logits.batch).filter(|&r| argmax(logits.row(r)) == labels[r] as usize).count();
    100.0 * hits as f64 / logits.batch.max(1) as f64
}

fn eval_points(epochs: usize, every: usize) -> Vec<usize> {
    if epochs == 0 {
        return vec![0];
    }
    let mut pts: Vec<usize> = (1..=epochs).filter(|e| e % every == 0).collect();
    if pts.last() != Some(&epochs) {
        pts.push(epochs);
    }
    pts
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, stream::EVAL, 2, epoch as u64])));
    order
}

/// Trains a linear head on fixed features and records test accuracy along the cadence.
fn train_head(
    train_x: &[f32],
    train_y: &[u32],
    test_x: &[f32],
    test_y: &[u32],
    dim: usize,
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<Vec<EvalPoint>, EvalError> {
    let head = classifier(dim, classes);
    let mut weights = init_classifier(&head, cfg.seed);
    let mut opt = SgdState::default();
    let points = eval_points(cfg.epochs, cfg.eval_every);
    let mut out = Vec::new();
    let test = FeatureMap::dense(test_y.len(), dim, test_x.to_vec());
    let evaluate = |weights: &WeightSet| {
        let mut ctx = ForwardCtx::new(NormMode::Running, false);
        accuracy(&head.forward(&weights.to_store(), test.clone(), &mut ctx).0, test_y)
    };
    if points == [0] {
        out.push(EvalPoint { epoch: 0, accuracy: evaluate(&weights) });
        return Ok(out);
    }
    let n = train_y.len();
    for epoch in 1..=cfg.epochs {
        for batch in epoch_order(n, cfg.seed, epoch).chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * dim);
            let mut y = Vec::with_capacity(batch.len());
            for &i in batch {
                x.extend_from_slice(&train_x[i * dim..(i + 1) * dim]);
                y.push(train_y[i]);
            }
            let store = weights.to_store();
            let mut ctx = ForwardCtx::new(NormMode::Running, true);
            let (logits, tape) = head.forward(&store, FeatureMap::dense(batch.len(), dim, x), &mut ctx);
            let (_, dlogits) = cross_entropy(&logits, &y);
            let mut grads = Gradients::default();
            head.backward(&store, tape, dlogits, &mut grads, false);
            optimizer_step(&mut weights, &grads, &mut opt, &cfg.optimizer)?;
        }
        if points.contains(&epoch) {
            out.push(EvalPoint { epoch, accuracy: evaluate(&weights) });
        }
    }
    Ok(out)
}

fn finish_report(
    cfg: &ProbeConfig,
    backbone: &Backbone,
    data: &EvalData,
    accuracies: Vec<EvalPoint>,
    train_examples: usize,
    method: String,
) -> EvalReport {
    let selected = accuracies.iter().map(|p| p.accuracy).fold(f64::NEG_INFINITY, f64::max);
    EvalReport {
        protocol: cfg.protocol,
        method,
        pretrain_dataset: backbone.provenance.pretrain_dataset.clone(),
        eval_dataset: data.id.clone(),
        label_fraction: cfg.label_fraction,
        pretrain_batch_size: backbone.provenance.pretrain_batch_size,
        frozen_backbone: cfg.protocol != Protocol::Finetune || cfg.frozen_backbone,
        accuracies,
        selected_accuracy: selected,
        seed: cfg.seed,
        config_hash: cfg.config_hash.clone(),
        pretrain_config_hash: backbone.provenance.pretrain_config_hash.clone(),
        backbone_hash: backbone.hash(),
        train_examples,
    }
}

/// Frozen-feature probe on a label subset.
fn frozen_probe(backbone: &Backbone, data: &EvalData, cfg: &ProbeConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let classes = check_classes(data)?;
    let encoder = build_encoder(&backbone.spec);
    let train_labels = data.train.labels();
    let idx = subsample_labels(&train_labels, classes, cfg.label_fraction, cfg.seed)?;
    let dim = backbone.spec.feature_dim;
    let train_x = extract_features(&encoder, &backbone.weights, data.train, &idx, backbone.spec.input_resolution, cfg, &data.stats);
    let test_idx: Vec<usize> = (0..data.test.len()).collect();
    let test_x = extract_features(&encoder, &backbone.weights, data.test, &test_idx, backbone.spec.input_resolution, cfg, &data.stats);
    let train_y: Vec<u32> = idx.iter().map(|&i| train_labels[i]).collect();
    let test_y = data.test.labels();
    let acc = train_head(&train_x, &train_y, &test_x, &test_y, dim, classes, cfg)?;
    Ok(finish_report(cfg, backbone, data, acc, idx.len(), backbone.provenance.method.clone()))
}

/// Linear classifier on the frozen backbone, trained on the full label set
/// of `data` unless the config says otherwise.
pub fn linear_probe(backbone: &Backbone, data: &EvalData, cfg: &ProbeConfig) -> Result<EvalReport, EvalError> {
    frozen_probe(backbone, data, cfg)
}

/// Linear probe of a backbone pretrained elsewhere on `data`'s task.
pub fn transfer_eval(backbone: &Backbone, data: &EvalData, cfg: &ProbeConfig) -> Result<EvalReport, EvalError> {
    let cfg = ProbeConfig { protocol: Protocol::Transfer, ..cfg.clone() };
    frozen_probe(backbone, data, &cfg)
}

/// Trains encoder and classifier jointly on a label subset. With
/// `from_scratch` the encoder starts from a random initialization and the
/// supplied weights are ignored; with `frozen_backbone` only the head trains.
pub fn fine_tune(backbone: &Backbone, data: &EvalData, cfg: &ProbeConfig) -> Result<EvalReport, EvalError> {
    let cfg = ProbeConfig { protocol: Protocol::Finetune, ..cfg.clone() };
    cfg.validate()?;
    let start = if cfg.from_scratch {
        let mut b = Backbone::random(backbone.spec.clone(), cfg.seed);
        b.provenance.method = "from-scratch".into();
        b
    } else {
        backbone.clone()
    };
    if cfg.frozen_backbone {
        return frozen_probe(&start, data, &cfg);
    }
    let classes = check_classes(data)?;
    let encoder = build_encoder(&start.spec);
    let head = classifier(start.spec.feature_dim, classes);
    let mut weights = start.weights.clone();
    weights.merge(&init_classifier(&head, cfg.seed));
    let mut opt = SgdState::default();

    let train_labels = data.train.labels();
    let idx = subsample_labels(&train_labels, classes, cfg.label_fraction, cfg.seed)?;
    let test_y = data.test.labels();
    let test_idx: Vec<usize> = (0..data.test.len()).collect();
    let evaluate = |weights: &WeightSet| {
        let store = weights.to_store();
        let mut hits = 0.0;
        for chunk in test_idx.chunks(128) {
            let x = input_batch(data.test, chunk, start.spec.input_resolution, cfg.interpolation, &data.stats);
            let mut ctx = ForwardCtx::new(NormMode::Running, false);
            let feats = encoder.forward(&store, x, &mut ctx).0;
            let logits = head.forward(&store, feats, &mut ctx).0;
            let y: Vec<u32> = chunk.iter().map(|&i| test_y[i]).collect();
            hits += accuracy(&logits, &y) * chunk.len() as f64 / 100.0;
        }
        100.0 * hits / test_idx.len().max(1) as f64
    };
    let points = eval_points(cfg.epochs, cfg.eval_every);
    let mut acc = Vec::new();
    if points == [0] {
        acc.push(EvalPoint { epoch: 0, accuracy: evaluate(&weights) });
    }
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(idx.len(), cfg.seed, epoch);
        // Single-example batches cannot use batch statistics; fold them into the previous batch.
        let mut batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(|c| c.iter().map(|&k| idx[k]).collect()).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(last);
        }
        for batch in batches {
            let x = input_batch(data.train, &batch, start.spec.input_resolution, cfg.interpolation, &data.stats);
            let y: Vec<u32> = batch.iter().map(|&i| train_labels[i]).collect();
            let store = weights.to_store();
            let mut ctx = ForwardCtx::new(NormMode::Batch, true);
            let (feats, enc_tape) = encoder.forward(&store, x, &mut ctx);
            let (logits, head_tape) = head.forward(&store, feats, &mut ctx);
            let (_, dlogits) = cross_entropy(&logits, &y);
            let mut grads = Gradients::default();
            let dfeat = head.backward(&store, head_tape, dlogits, &mut grads, true).expect("input gradient requested");
            encoder.backward(&store, enc_tape, dfeat, &mut grads, false);
            optimizer_step(&mut weights, &grads, &mut opt, &cfg.optimizer)?;
            apply_stat_updates(&mut weights, &ctx.stats);
        }
        if points.contains(&epoch) {
            acc.push(EvalPoint { epoch, accuracy: evaluate(&weights) });
        }
    }
    let method = start.provenance.method.clone();
    Ok(finish_report(&cfg, &start, data, acc, idx.len(), method))
}

pub fn report_file_name(report: &EvalReport) -> String {
    format!(
        "eval-{}-{}-{}-f{}-s{}-{}.json",
        report.protocol.as_str(),
        report.method,
        report.eval_dataset,
        report.label_fraction,
        report.seed,
        &report.config_hash[..report.config_hash.len().min(12)]
    )
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<PathBuf, EvalError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(report_file_name(report));
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Every `eval-*.json` report below `dir`, in path order.
pub fn collect_reports(dir: &Path) -> Result<Vec<EvalReport>, EvalError> {
    let mut paths = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| io_err(&d, e))? {
            let p = entry.map_err(|e| io_err(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("eval-") && n.ends_with(".json")) {
                paths.push(p);
            }
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| io_err(p, e))
        })
        .collect()
}

/// One row per report.
pub fn write_long_csv(path: &Path, reports: &[EvalReport]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record([
        "method",
        "protocol",
        "pretrain_dataset",
        "eval_dataset",
        "label_fraction",
        "batch_size",
        "seed",
        "selected_accuracy",
        "config_hash",
        "pretrain_config_hash",
    ])
    .map_err(|e| io_err(path, e))?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.protocol.as_str().to_string(),
            r.pretrain_dataset.clone(),
            r.eval_dataset.clone(),
            r.label_fraction.to_string(),
            r.pretrain_batch_size.map(|b| b.to_string()).unwrap_or_default(),
            r.seed.to_string(),
            format!("{:.2}", r.selected_accuracy),
            r.config_hash.clone(),
            r.pretrain_config_hash.clone(),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Table-shaped grid: one row per method, one column per
/// protocol/dataset/fraction/batch cell, cells are seed means.
pub fn write_grid_csv(path: &Path, reports: &[EvalReport]) -> Result<(), EvalError> {
    let column = |r: &EvalReport| {
        let b = r.pretrain_batch_size.map(|b| format!("B{b}")).unwrap_or_else(|| "B-".into());
        format!("{}/{}/{}/{}", r.protocol.as_str(), r.eval_dataset, r.label_fraction, b)
    };
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut columns: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for r in reports {
        let col = column(r);
        if !columns.contains(&col) {
            columns.push(col.clone());
        }
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        cells.entry((r.method.clone(), col)).or_default().push(r.selected_accuracy);
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header = vec!["method".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for m in &methods {
        let mut row = vec![m.clone()];
        for c in &columns {
            row.push(match cells.get(&(m.clone(), c.clone())) {
                Some(v) => format!("{:.2}", v.iter().sum::<f64>() / v.len() as f64),
                None => String::new(),
            });
        }
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
