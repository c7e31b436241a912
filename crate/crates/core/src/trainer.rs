//! Pretraining loop: views, loss, online update, EMA target update.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{eval_view, make_views, AugmentError, ChannelStats, ViewBatch};
pub use crate::config::Mode;
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError, CheckpointManifest, CHECKPOINT_VERSION};
use crate::config::RunConfig;
use crate::data::ImageSource;
use crate::loss::{mean_pair_loss_grad, Embedding, LossError};
use crate::networks::{apply_stat_updates, NetworkError, OnlineOutput, TripletNetwork, TripletState};
use crate::nn::{FeatureMap, Gradients, NormMode, ParamStore, StatUpdate};
use crate::rng::{derive_seed, stream};
use crate::updates::{ema_update, optimizer_step, select_target, UpdateError};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ABORT_DUMP_FILE: &str = "abort_dump.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error("non-finite loss at iteration {iteration} (epoch {epoch}); offending source ids {source_ids:?}")]
    NonFinite { iteration: u64, epoch: u64, source_ids: Vec<u64>, reason: String, dump: Option<PathBuf> },
    #[error("collapse check needs at least 2 embeddings, got {0}")]
    BatchTooSmall(usize),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// One pretraining run: the declarative config plus where artifacts go.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub run: RunConfig,
    /// Directory for the checkpoint, metrics log and abort dump.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many iterations regardless of `epochs`.
    pub max_iterations: Option<u64>,
}

impl TrainConfig {
    pub fn new(run: RunConfig) -> Self {
        Self { run, out_dir: None, max_iterations: None }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.run.validate().map_err(|e| TrainError::Setup(e.to_string()))
    }

    pub fn mode(&self) -> Mode {
        self.run.train.mode
    }

    pub fn collapse_threshold(&self) -> f64 {
        self.run
            .train
            .collapse_threshold
            .unwrap_or(0.01 / (self.run.model.embedding_dim as f64).sqrt())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub loss: f64,
    /// Mean per-dimension std of the normalized online projections.
    pub embedding_std: f64,
    /// Target that received the EMA update (2 or 3); `None` without targets.
    pub target_updated: Option<u8>,
    pub wall_time_s: f64,
    pub config_hash: String,
}

/// Instrumentation hook fired during training.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    OptimizerStep { iteration: u64 },
    EmaUpdate { iteration: u64, target: u8, tau: f64 },
    Step(StepRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub mean_std: f64,
    pub threshold: f64,
    pub collapsed: bool,
}

/// Flags collapse when the mean per-dimension standard deviation of the
/// L2-normalized embeddings falls below `threshold`. Population std.
pub fn detect_collapse(z: &[Embedding], threshold: f64) -> Result<CollapseReport, TrainError> {
    if z.len() < 2 {
        return Err(TrainError::BatchTooSmall(z.len()));
    }
    let d = z[0].dim();
    let n = z.len() as f64;
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for e in z {
        let norm = e.norm().max(crate::loss::NORM_EPS);
        for (k, v) in e.values().iter().enumerate() {
            let u = v / norm;
            sum[k] += u;
            sq[k] += u * u;
        }
    }
    let mean_std = (0..d)
        .map(|k| {
            let m = sum[k] / n;
            (sq[k] / n - m * m).max(0.0).sqrt()
        })
        .sum::<f64>()
        / d as f64;
    Ok(CollapseReport { mean_std, threshold, collapsed: mean_std < threshold })
}

fn rows(map: &FeatureMap) -> Result<Vec<Embedding>, LossError> {
    (0..map.rows()).map(|r| Embedding::from_f32(map.row(r))).collect()
}

/// Loss term `weight · mean_b L(q_b, z_b)` and its gradient on `q`.
fn pair_term(q: &FeatureMap, z: &FeatureMap, weight: f64) -> Result<(f64, Vec<f64>), LossError> {
    let (loss, grads) = mean_pair_loss_grad(&rows(q)?, &rows(z)?)?;
    Ok((weight * loss.value(), grads.into_iter().flatten().map(|g| weight * g).collect()))
}

/// How the per-step loss is assembled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub mode: Mode,
    pub symmetrize: bool,
    pub target3_weight: f64,
}

impl LossOptions {
    pub fn from_run(run: &RunConfig) -> Self {
        Self { mode: run.train.mode, symmetrize: run.train.loss_symmetrize, target3_weight: run.train.target3_weight }
    }
}

/// Loss of one step plus everything the update needs.
#[derive(Debug)]
pub struct StepLoss {
    pub loss: f64,
    /// Gradients for the online learnables; `None` when not recorded.
    pub grads: Option<Gradients>,
    /// Online batch statistics, in pass order.
    pub stats: Vec<StatUpdate>,
    /// Online projection of the first view.
    pub projection: FeatureMap,
}

/// Computes the configured loss on `views`. Only the online branch is
/// differentiated; target projections enter as constants.
pub fn step_loss(
    network: &TripletNetwork,
    state: &TripletState,
    views: &[FeatureMap],
    opts: &LossOptions,
    norm: NormMode,
    record: bool,
) -> Result<StepLoss, TrainError> {
    let needed = opts.mode.num_views();
    if views.len() < needed {
        return Err(TrainError::Setup(format!("{} views given, mode needs {needed}", views.len())));
    }
    let online = state.online.to_store();
    let store = |which: u8| -> Result<ParamStore, TrainError> { Ok(state.target(which)?.to_store()) };
    let w3 = opts.target3_weight;

    // (online view, loss terms as (target projection, weight))
    let mut plan: Vec<(usize, Vec<(FeatureMap, f64)>)> = Vec::new();
    let half = |w: f64| if opts.symmetrize { w / 2.0 } else { w };
    let mut passes: Vec<OnlineOutput> = Vec::new();
    match opts.mode {
        Mode::Tribyol => {
            let t2 = store(2)?;
            let t3 = store(3)?;
            let z2 = network.forward_target(&t2, &views[1], norm)?;
            let z3 = network.forward_target(&t3, &views[2], norm)?;
            plan.push((0, vec![(z2, half(1.0)), (z3, half(w3))]));
            if opts.symmetrize {
                plan.push((1, vec![(network.forward_target(&t2, &views[0], norm)?, 0.5)]));
                plan.push((2, vec![(network.forward_target(&t3, &views[0], norm)?, 0.5 * w3)]));
            }
        }
        Mode::Byol2view => {
            let t2 = store(2)?;
            plan.push((0, vec![(network.forward_target(&t2, &views[1], norm)?, half(1.0))]));
            if opts.symmetrize {
                plan.push((1, vec![(network.forward_target(&t2, &views[0], norm)?, 0.5)]));
            }
        }
        Mode::Simsiam2view => {
            // The online projections double as stop-gradient targets.
            let o1 = network.forward_online(&online, &views[0], norm, record)?;
            let o2 = network.forward_online(&online, &views[1], norm, record)?;
            let (z1, z2) = (o1.projection.clone(), o2.projection.clone());
            passes.push(o1);
            passes.push(o2);
            plan.push((0, vec![(z2, 0.5)]));
            plan.push((1, vec![(z1, 0.5)]));
        }
    }
    if passes.is_empty() {
        for (view, _) in &plan {
            passes.push(network.forward_online(&online, &views[*view], norm, record)?);
        }
    }

    let mut loss = 0.0;
    let mut grads = record.then(Gradients::default);
    let mut stats = Vec::new();
    let projection = passes[0].projection.clone();
    for (out, (_, terms)) in passes.into_iter().zip(&plan) {
        let mut dq = vec![0.0f64; out.prediction.data.len()];
        for (z, weight) in terms {
            let (l, g) = pair_term(&out.prediction, z, *weight).map_err(|e| non_finite_setup(e.to_string()))?;
            loss += l;
            dq.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        stats.extend(out.stats.iter().cloned());
        if let Some(total) = grads.as_mut() {
            let d = FeatureMap::dense(out.prediction.batch, out.prediction.channels, dq.iter().map(|&v| v as f32).collect());
            let g = network.backward_online(&online, out, d);
            for (name, values) in g.values {
                total.accumulate(&name, values);
            }
        }
    }
    Ok(StepLoss { loss, grads, stats, projection })
}

// Placeholder error for loss failures; the caller attaches iteration context.
fn non_finite_setup(reason: String) -> TrainError {
    TrainError::NonFinite { iteration: 0, epoch: 0, source_ids: Vec::new(), reason, dump: None }
}

/// Result of a finished run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub network: TripletNetwork,
    pub state: TripletState,
    pub records: Vec<StepRecord>,
    pub final_collapse: CollapseReport,
    pub checkpoint: Option<PathBuf>,
    pub config_hash: String,
}

fn mean_std_of(map: &FeatureMap) -> f64 {
    match rows(map).ok().and_then(|r| detect_collapse(&r, 0.0).ok()) {
        Some(rep) => rep.mean_std,
        None => f64::NAN,
    }
}

/// End-of-run collapse check: online projections of up to 256 un-augmented
/// images with running normalization statistics.
pub fn final_collapse_check(
    network: &TripletNetwork,
    state: &TripletState,
    data: &dyn ImageSource,
    stats: &ChannelStats,
    threshold: f64,
) -> Result<CollapseReport, TrainError> {
    let n = data.len().min(256);
    let res = network.spec.input_resolution;
    let per = res * res * 3;
    let mut buf = vec![0.0f32; n * per];
    for i in 0..n {
        let img = data.image(i);
        eval_view(&img, res, crate::augment::Interpolation::Bicubic, stats, &mut buf[i * per..(i + 1) * per]);
    }
    let x = FeatureMap::new(n, res, res, 3, buf);
    let z = network.forward_target(&state.online.to_store(), &x, NormMode::Running)?;
    let rows = rows(&z).map_err(|e| TrainError::NonFinite {
        iteration: state.iteration,
        epoch: 0,
        source_ids: (0..n as u64).collect(),
        reason: e.to_string(),
        dump: None,
    })?;
    detect_collapse(&rows, threshold)
}

struct MetricsSink {
    writer: Option<BufWriter<fs::File>>,
}

impl MetricsSink {
    fn open(path: Option<PathBuf>, truncate: bool) -> Self {
        let writer = path.and_then(|p| {
            let file = fs::OpenOptions::new().create(true).append(!truncate).write(true).truncate(truncate).open(&p);
            match file {
                Ok(f) => Some(BufWriter::new(f)),
                Err(e) => {
                    log::warn!("metrics log {} unavailable: {e}", p.display());
                    None
                }
            }
        });
        Self { writer }
    }

    fn push(&mut self, record: &StepRecord) {
        if let Some(w) = self.writer.as_mut() {
            let line = serde_json::to_string(record).expect("record serializes");
            if let Err(e) = writeln!(w, "{line}") {
                log::warn!("metrics write failed: {e}");
                self.writer = None;
            }
        }
    }

    fn flush(&mut self) {
        if let Some(w) = self.writer.as_mut() {
            let _ = w.flush();
        }
    }
}

#[derive(Serialize)]
struct AbortDump<'a> {
    iteration: u64,
    epoch: u64,
    source_ids: &'a [u64],
    reason: &'a str,
    loss: Option<f64>,
    config_hash: &'a str,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Runs Algorithm-style pretraining from a fresh initialization.
pub fn pretrain(cfg: &TrainConfig, data: &dyn ImageSource, stats: &ChannelStats) -> Result<TrainOutcome, TrainError> {
    pretrain_with(cfg, data, stats, None, &mut |_| {})
}

/// Pretraining for the two-view comparison modes.
pub fn run_mode_ablation(cfg: &TrainConfig, data: &dyn ImageSource, stats: &ChannelStats) -> Result<TrainOutcome, TrainError> {
    if cfg.mode() == Mode::Tribyol {
        return Err(TrainError::Setup("run_mode_ablation expects byol2view or simsiam2view".into()));
    }
    pretrain(cfg, data, stats)
}

/// Full control: optional resume state and an event observer.
pub fn pretrain_with(
    cfg: &TrainConfig,
    data: &dyn ImageSource,
    stats: &ChannelStats,
    resume: Option<Checkpoint>,
    observe: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let run = &cfg.run;
    let mode = run.train.mode;
    let b = run.train.batch_size;
    let network = TripletNetwork::new(run.model.architecture())?;
    let config_hash = run.pretrain_hash();
    let per_epoch = (data.len() / b) as u64;
    if per_epoch == 0 {
        return Err(TrainError::Setup(format!("dataset of {} images is smaller than batch size {b}", data.len())));
    }
    let total = per_epoch * run.train.epochs as u64;
    let mut state = match resume {
        Some(ckpt) => {
            if ckpt.manifest.config_hash != config_hash {
                return Err(TrainError::Setup("checkpoint was produced by a different configuration".into()));
            }
            if ckpt.state.iteration % per_epoch != 0 {
                return Err(TrainError::Setup("resume is only supported from epoch boundaries".into()));
            }
            ckpt.state
        }
        None => TripletState::init(&network, derive_seed(&[run.train.seed, stream::INIT]), mode.num_targets() as usize),
    };
    state.check_structure()?;
    let resumed = state.iteration > 0;
    let opts = LossOptions::from_run(run);
    let view_seed = derive_seed(&[run.train.seed, stream::VIEWS]);
    let out_dir = cfg.out_dir.clone();
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut sink = MetricsSink::open(out_dir.as_ref().map(|d| d.join(METRICS_FILE)), !resumed);
    let ckpt_path = out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let write_ckpt = |state: &TripletState, epoch: u64, complete: bool, collapsed: Option<bool>| -> Result<(), TrainError> {
        if let Some(path) = &ckpt_path {
            let manifest = CheckpointManifest {
                format_version: CHECKPOINT_VERSION,
                config_hash: config_hash.clone(),
                config: run.clone(),
                mode,
                iteration: state.iteration,
                epoch,
                complete,
                collapsed,
                online_hash: state.online.content_hash(),
            };
            save_checkpoint(path, &Checkpoint { manifest, state: state.clone() })?;
        }
        Ok(())
    };

    let started = Instant::now();
    let limit = cfg.max_iterations.unwrap_or(u64::MAX);
    let mut records = Vec::new();
    let start_epoch = state.iteration / per_epoch;
    let mut last_epoch = start_epoch;
    'epochs: for epoch in start_epoch..run.train.epochs as u64 {
        if state.iteration >= limit {
            break;
        }
        let mut order: Vec<u64> = (0..data.len() as u64).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[run.train.seed, stream::SHUFFLE, epoch])));
        let batches: Vec<Vec<u64>> = order.chunks_exact(b).map(<[u64]>::to_vec).collect();
        let result = std::thread::scope(|scope| -> Result<bool, TrainError> {
            let (tx, rx) = sync_channel::<Result<ViewBatch, AugmentError>>(run.train.prefetch.max(1));
            let policy = &run.augment;
            scope.spawn(move || {
                for ids in batches {
                    let images: Vec<_> = ids.iter().map(|&i| data.image(i as usize)).collect();
                    let refs: Vec<_> = images.iter().collect();
                    let vb = make_views(&refs, &ids, mode.num_views(), view_seed, epoch, policy, stats);
                    if tx.send(vb).is_err() {
                        break;
                    }
                }
            });
            for vb in rx {
                if state.iteration >= limit {
                    return Ok(false);
                }
                let vb = vb?;
                let record = train_step(&network, &mut state, &vb, &opts, run, total, epoch, &config_hash, started, observe)
                    .map_err(|e| attach_dump(e, &vb, state.iteration, epoch, out_dir.as_deref(), &config_hash))?;
                sink.push(&record);
                observe(&TrainEvent::Step(record.clone()));
                records.push(record);
            }
            Ok(true)
        });
        sink.flush();
        let finished_epoch = result?;
        if !finished_epoch {
            break 'epochs;
        }
        last_epoch = epoch + 1;
        let mean_loss = records.iter().rev().take(per_epoch as usize).map(|r| r.loss).sum::<f64>() / per_epoch as f64;
        log::info!("epoch {}/{} mean loss {:.4}", epoch + 1, run.train.epochs, mean_loss);
        let every = run.train.checkpoint_every as u64;
        if every > 0 && last_epoch % every == 0 && last_epoch < run.train.epochs as u64 {
            write_ckpt(&state, last_epoch, false, None)?;
        }
    }
    let final_collapse = final_collapse_check(&network, &state, data, stats, cfg.collapse_threshold())?;
    if final_collapse.collapsed {
        log::warn!("collapse detected: mean embedding std {:.2e} < {:.2e}", final_collapse.mean_std, final_collapse.threshold);
    }
    let complete = last_epoch == run.train.epochs as u64;
    write_ckpt(&state, last_epoch, complete, Some(final_collapse.collapsed))?;
    Ok(TrainOutcome { network, state, records, final_collapse, checkpoint: ckpt_path, config_hash })
}

fn attach_dump(err: TrainError, vb: &ViewBatch, iteration: u64, epoch: u64, out_dir: Option<&Path>, hash: &str) -> TrainError {
    let TrainError::NonFinite { reason, .. } = err else {
        return err;
    };
    let dump = out_dir.map(|d| d.join(ABORT_DUMP_FILE));
    if let Some(path) = &dump {
        let body = AbortDump { iteration, epoch, source_ids: &vb.source_ids, reason: &reason, loss: None, config_hash: hash };
        let text = serde_json::to_string_pretty(&body).expect("dump serializes");
        if let Err(e) = fs::write(path, text) {
            log::error!("could not write {}: {e}", path.display());
        }
    }
    TrainError::NonFinite { iteration, epoch, source_ids: vb.source_ids.clone(), reason, dump }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    network: &TripletNetwork,
    state: &mut TripletState,
    vb: &ViewBatch,
    opts: &LossOptions,
    run: &RunConfig,
    total: u64,
    epoch: u64,
    config_hash: &str,
    started: Instant,
    observe: &mut dyn FnMut(&TrainEvent),
) -> Result<StepRecord, TrainError> {
    let iteration = state.iteration;
    let out = step_loss(network, state, &vb.views, opts, NormMode::Batch, true)?;
    if !out.loss.is_finite() {
        return Err(non_finite_setup(format!("loss is {}", out.loss)));
    }
    let grads = out.grads.expect("recorded");
    optimizer_step(&mut state.online, &grads, &mut state.optimizer, &run.optimizer)?;
    observe(&TrainEvent::OptimizerStep { iteration });
    apply_stat_updates(&mut state.online, &out.stats);
    let tau = run.ema.tau_at(iteration, total);
    let target_updated = match opts.mode {
        Mode::Tribyol => Some(select_target(iteration, &run.ema)),
        Mode::Byol2view => Some(2),
        Mode::Simsiam2view => None,
    };
    if let Some(which) = target_updated {
        let online = &state.online;
        let target = match which {
            2 => state.target2.as_mut(),
            _ => state.target3.as_mut(),
        }
        .ok_or(NetworkError::MissingTarget(which))?;
        ema_update(target, online, tau)?;
        observe(&TrainEvent::EmaUpdate { iteration, target: which, tau });
    }
    state.iteration += 1;
    Ok(StepRecord {
        iteration,
        epoch,
        loss: out.loss,
        embedding_std: mean_std_of(&out.projection),
        target_updated,
        wall_time_s: started.elapsed().as_secs_f64(),
        config_hash: config_hash.to_string(),
    })
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Setup(format!("bad metrics line: {e}"))))
        .collect()
}
