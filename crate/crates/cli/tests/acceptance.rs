//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero when any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

use tribyol_core::augment::{make_views, sample_transform, AugmentPolicy, ChannelStats, Image};
use tribyol_core::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
use tribyol_core::config::{parse_config_with, Mode, Protocol, RunConfig};
use tribyol_core::data::{dataset_dir, ingest_dataset, load_dataset, DataError, Dataset, ImageSource};
use tribyol_core::eval::{
    collect_reports, fine_tune, linear_probe, subsample_labels, transfer_eval, Backbone, DatasetSplits, EvalReport,
    ProbeConfig,
};
use tribyol_core::loss::{pairwise_view_loss, pairwise_view_loss_grad, triple_view_loss, Embedding};
use tribyol_core::networks::TripletNetwork;
use tribyol_core::nn::{Gradients, NormMode};
use tribyol_core::trainer::{
    detect_collapse, pretrain, pretrain_with, step_loss, LossOptions, TrainConfig, TrainEvent, CHECKPOINT_FILE,
};
use tribyol_core::updates::{ema_update, optimizer_step, OptimizerHyper};
use tribyol_core::weights::{Branch, Entry, Kind, Role, WeightSet};
use tribyol_core::TripletState;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-4 {
            return v;
        }
    }
}

fn emb(v: &[f64]) -> Embedding {
    Embedding::new(v.to_vec()).unwrap()
}

fn scalar(branch: Branch, v: f64) -> WeightSet {
    let mut ws = WeightSet::new(branch);
    ws.insert("encoder.w", Entry { role: Role::Encoder, kind: Kind::Learnable, shape: vec![1], data: vec![v] });
    ws
}

fn value(ws: &WeightSet) -> f64 {
    ws.get("encoder.w").unwrap().data[0]
}

/// Small in-memory image pool for fast training runs.
struct NoisePool(Vec<Image>);

impl NoisePool {
    fn new(n: usize, side: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self((0..n).map(|_| Image::new(side, side, 3, (0..side * side * 3).map(|_| rng.random()).collect()).unwrap()).collect())
    }
}

impl ImageSource for NoisePool {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn image(&self, index: usize) -> Image {
        self.0[index].clone()
    }
}

const TINY: &str = r#"
format_version = 1

[dataset]
id = "toy-shapes"

[model]
encoder = "toy"
input_resolution = 16
toy_widths = [4, 8, 8, 8]
hidden_dim = 16
embedding_dim = 8

[train]
batch_size = 2
epochs = 1
checkpoint_every = 0
"#;

fn tiny_run() -> RunConfig {
    RunConfig::parse(TINY).unwrap()
}

// 1
fn loss_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for &d in &[2usize, 16, 128] {
        for _ in 0..1000 {
            let (q, z) = (random_vec(&mut rng, d), random_vec(&mut rng, d));
            let lib = pairwise_view_loss(&emb(&q), &emb(&z)).unwrap().value();
            let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nz = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            let sq: f64 = q.iter().zip(&z).map(|(a, b)| (a / nq - b / nz).powi(2)).sum();
            worst = worst.max((lib - sq).abs());
            ensure((0.0..=4.0).contains(&lib), || format!("pairwise loss {lib} outside [0, 4]"))?;
            let w = random_vec(&mut rng, d);
            let t = triple_view_loss(&emb(&q), &emb(&z), &emb(&w)).unwrap().value();
            ensure((0.0..=8.0).contains(&t), || format!("triple loss {t} outside [0, 8]"))?;
            let (a, b) = (rng.random_range(1e-3..1e3), rng.random_range(1e-3..1e3));
            let scaled = pairwise_view_loss(&emb(&q).scaled(a).unwrap(), &emb(&z).scaled(b).unwrap()).unwrap().value();
            ensure((scaled - lib).abs() <= 1e-6, || format!("scale invariance broken: {lib} vs {scaled}"))?;
        }
    }
    ensure(worst <= 1e-6, || format!("squared-norm and cosine forms differ by {worst:e}"))?;
    let pl = |q: &[f64], z: &[f64]| pairwise_view_loss(&emb(q), &emb(z)).unwrap().value();
    let hand = [
        (pl(&[1.0, 0.0], &[1.0, 0.0]), 0.0),
        (pl(&[1.0, 0.0], &[-1.0, 0.0]), 4.0),
        (pl(&[1.0, 0.0], &[1.0, 1.0]), 2.0 - 2f64.sqrt()),
        (triple_view_loss(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0]), &emb(&[-1.0, 0.0])).unwrap().value(), 6.0),
    ];
    for (got, want) in hand {
        ensure((got - want).abs() <= 1e-12, || format!("hand value {got} != {want}"))?;
    }
    Ok(format!("max form gap {worst:.1e} over 3000 pairs; hand values reproduced"))
}

// 2
fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (q, z) = (random_vec(&mut rng, 16), random_vec(&mut rng, 16));
        let (_, g) = pairwise_view_loss_grad(&emb(&q), &emb(&z)).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..16)
            .map(|i| {
                let (mut up, mut down) = (q.clone(), q.clone());
                up[i] += h;
                down[i] -= h;
                (pairwise_view_loss(&emb(&up), &emb(&z)).unwrap().value()
                    - pairwise_view_loss(&emb(&down), &emb(&z)).unwrap().value())
                    / (2.0 * h)
            })
            .collect();
        let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(diff / scale.max(1e-12));
    }
    ensure(worst <= 1e-4, || format!("relative gradient error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e} over 100 inputs (d = 16)"))
}

fn tiny_views(run: &RunConfig, seed: u64) -> Vec<tribyol_core::nn::FeatureMap> {
    let pool = NoisePool::new(4, 12, seed);
    let refs: Vec<&Image> = pool.0.iter().collect();
    make_views(&refs, &[0, 1, 2, 3], 3, seed, 0, &run.augment, &ChannelStats::IDENTITY).unwrap().views
}

// 3
fn stop_gradient_suite() -> Outcome {
    let run = tiny_run();
    let network = TripletNetwork::new(run.model.architecture()).unwrap();
    let state = TripletState::init(&network, 3, 2);
    let views = tiny_views(&run, 3);
    let opts = LossOptions::from_run(&run);
    let out = step_loss(&network, &state, &views, &opts, NormMode::Batch, true).unwrap();
    let grads = out.grads.unwrap();
    let grad_keys: BTreeSet<&str> = grads.values.keys().map(String::as_str).collect();
    let learnables: BTreeSet<&str> = state.online.learnable_names().collect();
    ensure(grad_keys == learnables, || format!("gradient keys {grad_keys:?} != online learnables {learnables:?}"))?;
    state.online.check_gradient_keys(&grads).map_err(|e| e.to_string())?;
    ensure(grads.values.keys().any(|k| k.starts_with("predictor.")), || "predictor has no gradient".into())?;
    let nonzero = grads.values.values().filter(|g| g.iter().any(|v| *v != 0.0)).count();
    ensure(nonzero > 0, || "all online gradients are zero".into())?;

    // The targets still feed the loss: they are constants, not disconnected.
    let base = out.loss;
    let mut changes = Vec::new();
    for which in [2u8, 3] {
        let mut perturbed = state.clone();
        let target = perturbed.target_mut(which).unwrap();
        for (name, entry) in target.iter_mut() {
            if name.starts_with("projector.fc2") && entry.kind == Kind::Learnable {
                entry.data.iter_mut().for_each(|v| *v += 1e-3);
            }
        }
        let moved = step_loss(&network, &perturbed, &views, &opts, NormMode::Batch, false).unwrap().loss;
        ensure(moved != base, || format!("perturbing target {which} left the loss at {base}"))?;
        changes.push((moved - base).abs());
    }
    Ok(format!(
        "{} online learnables with gradients, 0 target entries; target perturbation moves loss by {:.1e}/{:.1e}",
        grad_keys.len(),
        changes[0],
        changes[1]
    ))
}

// 4
fn ema_suite() -> Outcome {
    let cases = [(0.0, 1.0), (1.0, 2.0), (0.9, 1.9)];
    for (tau, want) in cases {
        let mut t = scalar(Branch::Target2, 2.0);
        ema_update(&mut t, &scalar(Branch::Online, 1.0), tau).map_err(|e| e.to_string())?;
        ensure(value(&t) == want, || format!("τ = {tau}: got {} want {want}", value(&t)))?;
    }
    let mut t = scalar(Branch::Target3, 3.0);
    let online = scalar(Branch::Online, -1.0);
    for _ in 0..50 {
        ema_update(&mut t, &online, 0.9).unwrap();
    }
    let gap = (value(&t) + 1.0).abs();
    let want = 0.9f64.powi(50) * 4.0;
    ensure((gap - want).abs() <= 1e-6, || format!("contraction gap {gap} vs τ^k oracle {want}"))?;

    let mut run = tiny_run();
    run.train.epochs = 10;
    let pool = NoisePool::new(200, 12, 4);
    let cfg = TrainConfig::new(run);
    let mut targets = Vec::new();
    let mut steps = 0u64;
    pretrain_with(&cfg, &pool, &ChannelStats::IDENTITY, None, &mut |e| match e {
        TrainEvent::EmaUpdate { target, .. } => targets.push(*target),
        TrainEvent::OptimizerStep { .. } => steps += 1,
        _ => {}
    })
    .map_err(|e| e.to_string())?;
    ensure(steps == 1000, || format!("{steps} optimizer steps, expected 1000"))?;
    let twos = targets.iter().filter(|&&t| t == 2).count();
    let threes = targets.iter().filter(|&&t| t == 3).count();
    ensure(targets.len() == 1000 && twos == 500 && threes == 500, || format!("updates: {twos} × θ2, {threes} × θ3"))?;
    ensure(targets[0] == 2 && targets.windows(2).all(|w| w[0] != w[1]), || "updates do not strictly alternate".into())?;
    Ok("scalar cases exact; τ^50 contraction within 1e-6; 1000 iterations → 500/500 strictly alternating".into())
}

// 5
fn optimizer_suite() -> Outcome {
    let hyper = OptimizerHyper { lr: 0.03, momentum: 0.9, weight_decay: 0.0, ..OptimizerHyper::default() };
    let mut ws = scalar(Branch::Online, 1.0);
    let mut state = Default::default();
    let mut seen = Vec::new();
    for _ in 0..2 {
        let mut g = Gradients::default();
        g.accumulate("encoder.w", vec![1.0]);
        optimizer_step(&mut ws, &g, &mut state, &hyper).map_err(|e| e.to_string())?;
        seen.push(value(&ws));
    }
    ensure((seen[0] - 0.97).abs() <= 1e-10 && (seen[1] - 0.913).abs() <= 1e-10, || format!("steps gave {seen:?}"))?;
    Ok(format!("w' = {:.12}, w'' = {:.12}", seen[0], seen[1]))
}

// 6
fn augmentation_suite() -> Outcome {
    let policy = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut flips, mut grays, mut jitters) = (0usize, 0usize, 0usize);
    for _ in 0..10_000 {
        let t = sample_transform(&mut rng, &policy, 32, 32);
        flips += t.flip as usize;
        grays += t.grayscale as usize;
        jitters += t.jitter_applied as usize;
    }
    let rate = |n: usize| n as f64 / 10_000.0;
    for (name, got, want) in [("flip", rate(flips), 0.5), ("grayscale", rate(grays), 0.2), ("jitter", rate(jitters), 0.8)] {
        ensure((got - want).abs() <= 0.02, || format!("{name} rate {got} vs {want}"))?;
    }

    let sizes = [(32usize, 32usize), (96, 96), (40, 60)];
    for i in 0..100_000 {
        let (h, w) = sizes[i % sizes.len()];
        let t = sample_transform(&mut rng, &policy, h, w);
        let area = t.crop_area_fraction();
        ensure((0.2 - 1e-9..=1.0 + 1e-9).contains(&area), || format!("crop area fraction {area}"))?;
        ensure((0.1..=2.0).contains(&t.blur_sigma), || format!("blur sigma {}", t.blur_sigma))?;
        let j = &t.jitter;
        ensure((-0.2..=0.2).contains(&j.hue), || format!("hue {}", j.hue))?;
        for f in [j.brightness, j.contrast, j.saturation] {
            ensure((0.2..=1.8).contains(&f), || format!("jitter factor {f}"))?;
        }
    }

    let small = NoisePool::new(4, 32, 7);
    let large = NoisePool::new(4, 96, 8);
    for pool in [&small, &large] {
        let refs: Vec<&Image> = pool.0.iter().collect();
        let ids = [10, 11, 12, 13];
        let a = make_views(&refs, &ids, 3, 9, 2, &policy, &ChannelStats::IDENTITY).unwrap();
        let b = make_views(&refs, &ids, 3, 9, 2, &policy, &ChannelStats::IDENTITY).unwrap();
        ensure(a == b, || "seeded view batches differ".into())?;
        for v in &a.views {
            ensure((v.batch, v.height, v.width, v.channels) == (4, 96, 96, 3), || {
                format!("view shape {}×{}×{}×{}", v.batch, v.height, v.width, v.channels)
            })?;
        }
    }
    Ok(format!("rates flip {:.3} gray {:.3} jitter {:.3}; 10^5 draws in range; 96×96×3 views reproducible", rate(flips), rate(grays), rate(jitters)))
}

// 7
fn collapse_suite() -> Outcome {
    let d = 128;
    let threshold = 0.01 / (d as f64).sqrt();
    let constant: Vec<Embedding> = (0..256).map(|_| emb(&vec![0.3; d])).collect();
    let c = detect_collapse(&constant, threshold).map_err(|e| e.to_string())?;
    ensure(c.collapsed, || "constant batch not flagged".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sphere: Vec<Vec<f64>> = (0..256)
        .map(|_| {
            let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            g.iter().map(|x| x / n).collect()
        })
        .collect();
    let sphere_e: Vec<Embedding> = sphere.iter().map(|v| emb(v)).collect();
    let s = detect_collapse(&sphere_e, threshold).unwrap();
    ensure(!s.collapsed, || format!("uniform sphere batch flagged (std {})", s.mean_std))?;
    ensure((s.mean_std - 1.0 / (d as f64).sqrt()).abs() < 0.1 / (d as f64).sqrt(), || format!("sphere std {}", s.mean_std))?;

    // Direct computation oracle on a half-constant batch.
    let mixed: Vec<Vec<f64>> = (0..256).map(|i| if i % 2 == 0 { vec![1.0 / (d as f64).sqrt(); d] } else { sphere[i].clone() }).collect();
    let oracle = {
        let n = mixed.len() as f64;
        (0..d)
            .map(|k| {
                let m = mixed.iter().map(|r| r[k]).sum::<f64>() / n;
                (mixed.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / n).sqrt()
            })
            .sum::<f64>()
            / d as f64
    };
    let mixed_e: Vec<Embedding> = mixed.iter().map(|v| emb(v)).collect();
    let m = detect_collapse(&mixed_e, threshold).unwrap();
    ensure((m.mean_std - oracle).abs() <= 1e-12, || format!("mixed std {} vs oracle {oracle}", m.mean_std))?;
    ensure(c.mean_std < m.mean_std && m.mean_std < s.mean_std, || "mixed batch std not between pure cases".into())?;
    for (thr, want) in [(oracle * 1.001, true), (oracle * 0.999, false)] {
        let r = detect_collapse(&mixed_e, thr).unwrap();
        ensure(r.collapsed == want, || format!("threshold {thr} around oracle {oracle} gave collapsed = {}", r.collapsed))?;
    }
    Ok(format!("constant {:.1e}, mixed {:.4}, sphere {:.4} (threshold {:.4})", c.mean_std, m.mean_std, s.mean_std, threshold))
}

// Toy comparative runs shared by criteria 8 and 9.

struct ToyRun {
    mode: Mode,
    seed: u64,
    collapsed: bool,
    backbone: Backbone,
    probe: EvalReport,
}

struct Toy {
    _root: TempDir,
    shapes: Dataset,
    gray: Dataset,
    runs: Vec<ToyRun>,
    random: Vec<(Backbone, EvalReport)>,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn toy_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy/toy_shapes.toml")
}

fn toy_run(mode: Mode, seed: u64, protocol: Protocol) -> RunConfig {
    parse_config_with(&toy_config_path(), |r| {
        r.train.mode = mode;
        r.train.seed = seed;
        r.probe.seed = Some(seed);
        r.probe.protocol = protocol;
    })
    .expect("shipped toy config parses")
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        for id in ["toy-shapes", "toy-shapes-gray"] {
            ingest_dataset(id, None, root.path()).unwrap();
        }
        let shapes = load_dataset(root.path(), "toy-shapes").unwrap();
        let gray = load_dataset(root.path(), "toy-shapes-gray").unwrap();
        let splits = DatasetSplits::new(&shapes);
        let data = splits.eval_data();
        let mut runs = Vec::new();
        for mode in [Mode::Tribyol, Mode::Byol2view] {
            for seed in SEEDS {
                let started = Instant::now();
                let run = toy_run(mode, seed, Protocol::Linear);
                let out_dir = root.path().join(format!("{}-{seed}", mode.as_str()));
                let mut cfg = TrainConfig::new(run.clone());
                cfg.out_dir = Some(out_dir.clone());
                let outcome = pretrain(&cfg, &shapes.pretrain(), &shapes.entry.stats).unwrap();
                let ckpt = load_checkpoint(&out_dir.join(CHECKPOINT_FILE)).unwrap();
                let backbone = Backbone::from_checkpoint(&ckpt);
                let probe = linear_probe(&backbone, &data, &ProbeConfig::from_run(&run)).unwrap();
                eprintln!(
                    "  {} seed {seed}: probe {:.2}% collapse std {:.4} ({:.0}s)",
                    mode.as_str(),
                    probe.selected_accuracy,
                    outcome.final_collapse.mean_std,
                    started.elapsed().as_secs_f64()
                );
                runs.push(ToyRun { mode, seed, collapsed: outcome.final_collapse.collapsed, backbone, probe });
            }
        }
        let random = SEEDS
            .iter()
            .map(|&seed| {
                let run = toy_run(Mode::Tribyol, seed, Protocol::Linear);
                let b = Backbone::random(run.model.architecture(), seed);
                let r = linear_probe(&b, &data, &ProbeConfig::from_run(&run)).unwrap();
                (b, r)
            })
            .collect();
        drop(splits);
        Toy { _root: root, shapes, gray, runs, random }
    })
}

fn accuracies(mode: Mode) -> Vec<f64> {
    toy().runs.iter().filter(|r| r.mode == mode).map(|r| r.probe.selected_accuracy).collect()
}

// 8
fn toy_comparison() -> Outcome {
    let t = toy();
    for mode in [Mode::Tribyol, Mode::Byol2view] {
        let clean = t.runs.iter().filter(|r| r.mode == mode && !r.collapsed).count();
        ensure(clean >= 2, || format!("{}: only {clean}/3 seeds without collapse", mode.as_str()))?;
    }
    let tri = accuracies(Mode::Tribyol);
    let byol = accuracies(Mode::Byol2view);
    let random: Vec<f64> = t.random.iter().map(|(_, r)| r.selected_accuracy).collect();
    let (mt, mb, mr) = (mean(&tri), mean(&byol), mean(&random));
    let detail = format!("tribyol {tri:.2?} mean {mt:.2}; byol2view {byol:.2?} mean {mb:.2}; random mean {mr:.2}");
    ensure(mt >= mb - 1.0, || format!("non-inferiority failed: {detail}"))?;
    ensure(mt >= mr + 10.0 && mb >= mr + 10.0, || format!("margin over random below 10 points: {detail}"))?;
    Ok(detail)
}

// 9
fn protocol_suite() -> Outcome {
    let t = toy();
    let splits = DatasetSplits::new(&t.shapes);
    let data = splits.eval_data();
    let first = &t.runs[0];
    let before = first.backbone.hash();
    ensure(first.probe.backbone_hash == before, || "linear probe report carries a different backbone hash".into())?;
    let run = toy_run(first.mode, first.seed, Protocol::Transfer);
    let gray_splits = DatasetSplits::new(&t.gray);
    let transfer = transfer_eval(&first.backbone, &gray_splits.eval_data(), &ProbeConfig::from_run(&run)).map_err(|e| e.to_string())?;
    ensure(first.backbone.hash() == before && transfer.backbone_hash == before, || "backbone changed during evaluation".into())?;

    let labels: Vec<u32> = (0..50_000).map(|i| (i % 10) as u32).collect();
    let subset = subsample_labels(&labels, 10, 0.01, 0).map_err(|e| e.to_string())?;
    ensure(subset.len() == 500, || format!("1% subset has {} indices", subset.len()))?;
    for c in 0..10u32 {
        let n = subset.iter().filter(|&&i| labels[i] == c).count();
        ensure(n == 50, || format!("class {c} has {n} examples in the 1% subset"))?;
    }

    let mut pretrained = Vec::new();
    let mut scratch = Vec::new();
    for r in t.runs.iter().filter(|r| r.mode == Mode::Tribyol) {
        let run = toy_run(r.mode, r.seed, Protocol::Finetune);
        let cfg = ProbeConfig::from_run(&run);
        let p = fine_tune(&r.backbone, &data, &cfg).map_err(|e| e.to_string())?;
        let s = fine_tune(&r.backbone, &data, &ProbeConfig { from_scratch: true, ..cfg.clone() }).map_err(|e| e.to_string())?;
        ensure(s.method == "from-scratch" && s.accuracies.len() == cfg.epochs && s.is_consistent(), || {
            format!("from-scratch report malformed: {} points", s.accuracies.len())
        })?;
        eprintln!("  finetune seed {}: pretrained {:.2}% scratch {:.2}%", r.seed, p.selected_accuracy, s.selected_accuracy);
        pretrained.push(p.selected_accuracy);
        scratch.push(s.selected_accuracy);
    }
    let (mp, ms) = (mean(&pretrained), mean(&scratch));
    ensure(mp >= ms - 2.0, || format!("fine-tune pretrained {mp:.2} < scratch {ms:.2} − 2"))?;
    Ok(format!("hashes stable; 1% → 50/class; fine-tune pretrained {mp:.2} vs scratch {ms:.2}"))
}

const CLI_CONFIG: &str = r#"
format_version = 1

[dataset]
id = "toy-shapes"

[model]
encoder = "toy"
input_resolution = 16
toy_widths = [8, 16, 16, 32]
hidden_dim = 32
embedding_dim = 16

[train]
mode = "tribyol"
batch_size = 250
epochs = 1

[probe]
epochs = 2
eval_every = 1
"#;

fn tribyol_cli(root: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tribyol"))
        .args(args)
        .env("TRIBYOL_DATA_ROOT", root)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn fake_cifar10(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let mut sums = String::new();
    let names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).chain(["test_batch.bin".to_string()]).collect();
    for (k, name) in names.iter().enumerate() {
        let bytes: Vec<u8> = (0..2 * 3073).map(|i| if i % 3073 == 0 { (k % 10) as u8 } else { (i * 7 + k) as u8 }).collect();
        sums.push_str(&format!("{}  {name}\n", hex::encode(Sha256::digest(&bytes))));
        fs::write(dir.join(name), bytes).unwrap();
    }
    fs::write(dir.join("SHA256SUMS"), sums).unwrap();
}

fn flip_byte(path: &Path, at: usize) {
    let mut bytes = fs::read(path).unwrap();
    bytes[at] ^= 0x01;
    fs::write(path, bytes).unwrap();
}

// 10
fn plumbing_suite() -> Outcome {
    let minimal = RunConfig::minimal("cifar10");
    let o = &minimal.optimizer;
    ensure((o.lr, o.momentum, o.weight_decay) == (0.03, 0.9, 0.0004), || format!("optimizer defaults {o:?}"))?;
    ensure(minimal.model.input_resolution == 96 && minimal.augment.resolution == 96, || "resolution default".into())?;
    ensure((minimal.model.hidden_dim, minimal.model.embedding_dim) == (512, 128), || "MLP widths".into())?;
    let a = &minimal.augment;
    ensure(
        a.crop_scale == [0.2, 1.0]
            && a.flip_prob == 0.5
            && a.jitter_prob == 0.8
            && a.grayscale_prob == 0.2
            && (a.brightness, a.contrast, a.saturation, a.hue) == (0.8, 0.8, 0.8, 0.2)
            && a.blur_kernel == 9
            && a.blur_sigma == [0.1, 2.0],
        || format!("augmentation defaults {a:?}"),
    )?;

    let text = "format_version = 1\n[dataset]\nid = \"cifar10\"\n[train]\nmode = \"tribyol\"\n";
    let h1 = RunConfig::parse(text).unwrap().hash();
    ensure(h1 == RunConfig::parse(text).unwrap().hash(), || "hash not stable".into())?;
    ensure(h1 != RunConfig::parse(&text.replace("tribyol", "byol2view")).unwrap().hash(), || "hash ignores mode".into())?;
    ensure(RunConfig::parse(&text.replace("[train]\n", "[train]\nbatch_size = 0\n")).is_err(), || "batch 0 accepted".into())?;

    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    let source = tmp.path().join("cifar-src");
    fake_cifar10(&source);
    ingest_dataset("cifar10", Some(&source), &root).map_err(|e| format!("clean archive refused: {e}"))?;
    flip_byte(&source.join("data_batch_3.bin"), 100);
    let refused = ingest_dataset("cifar10", Some(&source), &tmp.path().join("other"));
    ensure(matches!(refused, Err(DataError::Checksum { .. })), || format!("corrupted archive accepted: {refused:?}"))?;
    ingest_dataset("toy-shapes", None, &root).unwrap();
    let store = dataset_dir(&root, "cifar10").join("data.bin");
    flip_byte(&store, 50);
    ensure(matches!(load_dataset(&root, "cifar10"), Err(DataError::Checksum { .. })), || "corrupted store loaded".into())?;

    let run = tiny_run();
    let network = TripletNetwork::new(run.model.architecture()).unwrap();
    let state = TripletState::init(&network, 10, 2);
    let ckpt = Checkpoint {
        manifest: tribyol_core::CheckpointManifest {
            format_version: tribyol_core::checkpoint::CHECKPOINT_VERSION,
            config_hash: run.pretrain_hash(),
            config: run.clone(),
            mode: run.train.mode,
            iteration: 0,
            epoch: 0,
            complete: false,
            collapsed: None,
            online_hash: state.online.content_hash(),
        },
        state,
    };
    let bytes = encode_checkpoint(&ckpt);
    let back = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    ensure(back == ckpt && encode_checkpoint(&back) == bytes, || "checkpoint round trip not bit-exact".into())?;
    let path = tmp.path().join("ckpt.bin");
    save_checkpoint(&path, &ckpt).unwrap();
    ensure(load_checkpoint(&path).map_err(|e| e.to_string())? == ckpt, || "saved checkpoint differs".into())?;

    // Provenance chain and exit statuses through the binary.
    let cfg_path = tmp.path().join("run.toml");
    fs::write(&cfg_path, CLI_CONFIG).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();
    let res = tribyol_cli(&root, &["pretrain", "--config", cfg, "--out", out_s]);
    ensure(res.status.success(), || format!("pretrain failed: {}", String::from_utf8_lossy(&res.stderr)))?;
    let res = tribyol_cli(&root, &["linear-eval", "--config", cfg, "--out", out_s]);
    ensure(res.status.success(), || format!("linear-eval failed: {}", String::from_utf8_lossy(&res.stderr)))?;
    let manifest_hash = load_checkpoint(&out.join(CHECKPOINT_FILE)).unwrap().manifest.config_hash;
    let reports = collect_reports(&out).map_err(|e| e.to_string())?;
    let expected = RunConfig::parse(CLI_CONFIG).unwrap().pretrain_hash();
    ensure(
        reports.len() == 1 && reports[0].pretrain_config_hash == manifest_hash && manifest_hash == expected,
        || "provenance hash does not chain from config to report".into(),
    )?;

    let mut codes = Vec::new();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, CLI_CONFIG.replace("batch_size = 250", "batch_size = 0")).unwrap();
    codes.push((1, tribyol_cli(&root, &["pretrain", "--config", bad.to_str().unwrap(), "--out", out_s])));
    let missing = tmp.path().join("missing.toml");
    fs::write(&missing, CLI_CONFIG.replace("toy-shapes", "stl10")).unwrap();
    codes.push((2, tribyol_cli(&root, &["pretrain", "--config", missing.to_str().unwrap(), "--out", out_s])));
    let collapse = tmp.path().join("collapse.toml");
    fs::write(&collapse, CLI_CONFIG.replace("epochs = 1\n", "epochs = 1\ncollapse_threshold = 10.0\n")).unwrap();
    let collapse_out = tmp.path().join("collapse-run");
    codes.push((3, tribyol_cli(&root, &["pretrain", "--config", collapse.to_str().unwrap(), "--out", collapse_out.to_str().unwrap()])));
    for (want, res) in &codes {
        ensure(res.status.code() == Some(*want), || {
            format!("expected exit {want}, got {:?}: {}", res.status.code(), String::from_utf8_lossy(&res.stderr))
        })?;
    }
    Ok("defaults, hashes, checksum refusal, bit-exact checkpoints, provenance chain, exit codes 0/1/2/3".into())
}

// Extra checks on the shared toy runs.

fn random_probe_near_chance() -> Outcome {
    let acc: Vec<f64> = toy().random.iter().map(|(_, r)| r.selected_accuracy).collect();
    ensure(acc.iter().all(|a| (a - 10.0).abs() <= 5.0), || format!("random probe accuracies {acc:.2?}"))?;
    Ok(format!("random backbone probe {acc:.2?}"))
}

fn transfer_beats_random() -> Outcome {
    let t = toy();
    let splits = DatasetSplits::new(&t.gray);
    let data = splits.eval_data();
    let mut ssl = Vec::new();
    let mut random = Vec::new();
    for (r, (rb, _)) in t.runs.iter().filter(|r| r.mode == Mode::Tribyol).zip(&t.random) {
        let cfg = ProbeConfig::from_run(&toy_run(r.mode, r.seed, Protocol::Transfer));
        ssl.push(transfer_eval(&r.backbone, &data, &cfg).map_err(|e| e.to_string())?.selected_accuracy);
        random.push(transfer_eval(rb, &data, &cfg).map_err(|e| e.to_string())?.selected_accuracy);
    }
    let (ms, mr) = (mean(&ssl), mean(&random));
    ensure(ms >= mr + 5.0, || format!("transfer {ms:.2} vs random {mr:.2}"))?;
    Ok(format!("toy-shapes → toy-shapes-gray: tribyol {ms:.2} vs random {mr:.2}"))
}

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let criteria: [(&str, Duration, Check); 12] = [
        ("criterion 1 loss correctness", Duration::from_secs(10), loss_suite),
        ("criterion 2 gradient", Duration::from_secs(30), gradient_suite),
        ("criterion 3 stop-gradient", Duration::from_secs(60), stop_gradient_suite),
        ("criterion 4 EMA and alternation", Duration::from_secs(60), ema_suite),
        ("criterion 5 optimizer", Duration::from_secs(1), optimizer_suite),
        ("criterion 6 augmentation", Duration::from_secs(120), augmentation_suite),
        ("criterion 7 collapse detector", Duration::from_secs(10), collapse_suite),
        ("criterion 8 toy comparative run", Duration::from_secs(30 * 60), toy_comparison),
        ("criterion 9 protocols", Duration::from_secs(20 * 60), protocol_suite),
        ("criterion 10 plumbing", Duration::from_secs(60), plumbing_suite),
        ("check random probe at chance", Duration::MAX, random_probe_near_chance),
        ("check toy transfer over random", Duration::MAX, transfer_beats_random),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed();
        let result = result.and_then(|d| {
            if secs <= budget {
                Ok(d)
            } else {
                Err(format!("{d}; took {:.1}s, budget {:.0}s", secs.as_secs_f64(), budget.as_secs_f64()))
            }
        });
        match result {
            Ok(detail) => println!("{name}: PASS ({detail}) [{:.1}s]", secs.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("{name}: FAIL ({why}) [{:.1}s]", secs.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance checks failed");
        ExitCode::FAILURE
    }
}
