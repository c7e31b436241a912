mod common;

use common::{tiny_run, NoisePool};

use tribyol_core::augment::{make_views, ChannelStats, Image};
use tribyol_core::checkpoint::load_checkpoint;
use tribyol_core::config::{Mode, RunConfig};
use tribyol_core::networks::TripletNetwork;
use tribyol_core::nn::NormMode;
use tribyol_core::trainer::{
    pretrain, pretrain_with, read_metrics, run_mode_ablation, step_loss, LossOptions, TrainConfig, TrainError,
    TrainEvent, TrainOutcome, ABORT_DUMP_FILE, CHECKPOINT_FILE, METRICS_FILE,
};
use tribyol_core::weights::{Kind, WeightSet};
use tribyol_core::TripletState;

fn train(run: RunConfig, pool: &NoisePool, max_iterations: Option<u64>) -> TrainOutcome {
    let mut cfg = TrainConfig::new(run);
    cfg.max_iterations = max_iterations;
    pretrain(&cfg, pool, &ChannelStats::IDENTITY).unwrap()
}

fn events(run: RunConfig, pool: &NoisePool) -> Vec<TrainEvent> {
    let mut seen = Vec::new();
    pretrain_with(&TrainConfig::new(run), pool, &ChannelStats::IDENTITY, None, &mut |e| seen.push(e.clone())).unwrap();
    seen
}

fn learnables(ws: &WeightSet) -> Vec<(String, Vec<f64>)> {
    ws.iter().filter(|(_, e)| e.kind == Kind::Learnable).map(|(n, e)| (n.clone(), e.data.clone())).collect()
}

#[test]
fn two_step_smoke_run_learns() {
    let pool = NoisePool::new(16, 12, 1);
    let out = train(tiny_run(), &pool, Some(2));
    assert_eq!(out.records.len(), 2);
    let (a, b) = (out.records[0].loss, out.records[1].loss);
    assert!(a.is_finite() && b.is_finite());
    assert_ne!(a, b);
    assert_eq!(out.state.iteration, 2);
}

#[test]
fn seeded_runs_repeat() {
    let pool = NoisePool::new(32, 12, 2);
    let mut run = tiny_run();
    run.train.epochs = 2;
    let a = train(run.clone(), &pool, None);
    let b = train(run.clone(), &pool, None);
    assert_eq!(a.records.len(), 16);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert!((x.loss - y.loss).abs() <= 1e-6);
        assert_eq!(x.iteration, y.iteration);
    }
    assert_eq!(a.state.online.content_hash(), b.state.online.content_hash());

    run.train.seed = 1;
    let c = train(run, &pool, None);
    assert_ne!(a.records[0].loss, c.records[0].loss);
}

#[test]
fn one_optimizer_step_then_one_ema_update_per_iteration() {
    let pool = NoisePool::new(24, 12, 3);
    let seen = events(tiny_run(), &pool);
    let mut order = Vec::new();
    for e in &seen {
        match e {
            TrainEvent::OptimizerStep { iteration } => order.push(('o', *iteration)),
            TrainEvent::EmaUpdate { iteration, .. } => order.push(('e', *iteration)),
            TrainEvent::Step(_) => {}
        }
    }
    assert_eq!(order.len(), 12);
    for (i, pair) in order.chunks(2).enumerate() {
        assert_eq!(pair, [('o', i as u64), ('e', i as u64)]);
    }
}

#[test]
fn frozen_dynamics_with_unit_tau_and_zero_rate() {
    let pool = NoisePool::new(24, 12, 4);
    let mut run = tiny_run();
    run.optimizer.lr = 0.0;
    run.ema.tau = 1.0;
    let network = TripletNetwork::new(run.model.architecture()).unwrap();
    let seed = tribyol_core::rng::derive_seed(&[run.train.seed, tribyol_core::rng::stream::INIT]);
    let initial = TripletState::init(&network, seed, 2);
    let out = train(run, &pool, None);
    assert_eq!(out.state.iteration, 6);
    assert_eq!(learnables(&out.state.online), learnables(&initial.online));
    assert_eq!(out.state.target2, initial.target2);
    assert_eq!(out.state.target3, initial.target3);
}

#[test]
fn byol2view_allocates_no_third_target() {
    let pool = NoisePool::new(16, 12, 5);
    let mut run = tiny_run();
    run.train.mode = Mode::Byol2view;
    let out = run_mode_ablation(&TrainConfig::new(run.clone()), &pool, &ChannelStats::IDENTITY).unwrap();
    assert!(out.state.target3.is_none());
    assert!(out.records.iter().all(|r| r.target_updated == Some(2)));

    let tri = train(tiny_run(), &pool, None);
    let size = |s: &TripletState| s.target2.iter().chain(&s.target3).map(WeightSet::num_values).sum::<usize>();
    assert!(size(&out.state) < size(&tri.state));
}

#[test]
fn simsiam_has_no_momentum_copy() {
    let pool = NoisePool::new(16, 12, 6);
    let mut run = tiny_run();
    run.train.mode = Mode::Simsiam2view;
    let seen = events(run.clone(), &pool);
    assert!(!seen.iter().any(|e| matches!(e, TrainEvent::EmaUpdate { .. })));
    assert_eq!(seen.iter().filter(|e| matches!(e, TrainEvent::OptimizerStep { .. })).count(), 4);
    let out = train(run, &pool, None);
    assert!(out.state.target2.is_none() && out.state.target3.is_none());
}

#[test]
fn tribyol_without_third_term_pairs_with_byol2view() {
    let pool = NoisePool::new(24, 12, 7);
    let mut tri = tiny_run();
    tri.ema.tau = 1.0;
    tri.train.target3_weight = 0.0;
    let mut two = tri.clone();
    two.train.mode = Mode::Byol2view;
    let a = train(tri, &pool, None);
    let b = train(two, &pool, None);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.loss, y.loss, "iteration {}", x.iteration);
    }
    assert_eq!(a.state.online, b.state.online);
}

#[test]
fn rejects_tribyol_as_ablation() {
    let pool = NoisePool::new(8, 12, 8);
    assert!(matches!(
        run_mode_ablation(&TrainConfig::new(tiny_run()), &pool, &ChannelStats::IDENTITY),
        Err(TrainError::Setup(_))
    ));
}

#[test]
fn symmetrized_loss_matches_literal_on_equal_views() {
    let run = tiny_run();
    let network = TripletNetwork::new(run.model.architecture()).unwrap();
    let state = TripletState::init(&network, 9, 2);
    let pool = NoisePool::new(4, 12, 9);
    let refs: Vec<&Image> = pool.0.iter().collect();
    let one = make_views(&refs, &[0, 1, 2, 3], 1, 9, 0, &run.augment, &ChannelStats::IDENTITY).unwrap();
    let views = vec![one.views[0].clone(); 3];
    let literal = LossOptions { mode: Mode::Tribyol, symmetrize: false, target3_weight: 1.0 };
    let sym = LossOptions { symmetrize: true, ..literal };
    let l = step_loss(&network, &state, &views, &literal, NormMode::Running, false).unwrap().loss;
    let s = step_loss(&network, &state, &views, &sym, NormMode::Running, false).unwrap().loss;
    assert!((l - s).abs() <= 1e-6 * l.max(1.0), "literal {l} symmetrized {s}");
    assert!((0.0..=8.0).contains(&s));
}

#[test]
fn symmetrized_and_literal_runs_diverge() {
    let pool = NoisePool::new(16, 12, 10);
    let mut sym = tiny_run();
    sym.train.loss_symmetrize = true;
    let a = train(tiny_run(), &pool, Some(2));
    let b = train(sym, &pool, Some(2));
    assert_ne!(learnables(&a.state.online), learnables(&b.state.online));
    assert!(b.records.iter().all(|r| (0.0..=8.0).contains(&r.loss)));
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let pool = NoisePool::new(16, 12, 11);
    // Zero std turns every standardized pixel into ±inf.
    let broken = ChannelStats { mean: [0.5; 3], std: [0.0; 3] };
    let mut cfg = TrainConfig::new(tiny_run());
    cfg.out_dir = Some(tmp.path().to_path_buf());
    let mut steps = 0u64;
    let err = pretrain_with(&cfg, &pool, &broken, None, &mut |e| {
        if matches!(e, TrainEvent::Step(_)) {
            steps += 1;
        }
    })
    .unwrap_err();
    let TrainError::NonFinite { iteration, source_ids, dump, .. } = err else {
        panic!("expected a non-finite abort, got {err}");
    };
    assert_eq!((iteration, steps), (0, 0), "aborts on the first bad iteration");
    assert_eq!(source_ids.len(), 4);
    let dump = dump.unwrap();
    assert_eq!(dump, tmp.path().join(ABORT_DUMP_FILE));
    let body: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dump).unwrap()).unwrap();
    let dumped: Vec<u64> = body["source_ids"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(dumped, source_ids);
}

#[test]
fn resume_continues_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let pool = NoisePool::new(16, 12, 12);
    let mut run = tiny_run();
    run.train.epochs = 2;
    run.train.checkpoint_every = 1;

    let straight = train(run.clone(), &pool, None);

    let mut cfg = TrainConfig::new(run);
    cfg.out_dir = Some(tmp.path().to_path_buf());
    cfg.max_iterations = Some(4);
    pretrain(&cfg, &pool, &ChannelStats::IDENTITY).unwrap();
    let partial = load_checkpoint(&tmp.path().join(CHECKPOINT_FILE)).unwrap();
    assert!(!partial.manifest.complete);
    assert_eq!((partial.manifest.epoch, partial.state.iteration), (1, 4));

    cfg.max_iterations = None;
    let resumed = pretrain_with(&cfg, &pool, &ChannelStats::IDENTITY, Some(partial), &mut |_| {}).unwrap();
    assert_eq!(resumed.state, straight.state);
    let log = read_metrics(&tmp.path().join(METRICS_FILE)).unwrap();
    let iters: Vec<u64> = log.iter().map(|r| r.iteration).collect();
    assert_eq!(iters, (0..8).collect::<Vec<_>>());
    for (r, s) in log.iter().zip(&straight.records) {
        assert!((r.loss - s.loss).abs() <= 1e-6);
    }
    assert!(load_checkpoint(&tmp.path().join(CHECKPOINT_FILE)).unwrap().manifest.complete);
}

#[test]
fn resume_refuses_a_different_config() {
    let tmp = tempfile::tempdir().unwrap();
    let pool = NoisePool::new(8, 12, 13);
    let mut cfg = TrainConfig::new(tiny_run());
    cfg.out_dir = Some(tmp.path().to_path_buf());
    pretrain(&cfg, &pool, &ChannelStats::IDENTITY).unwrap();
    let ckpt = load_checkpoint(&tmp.path().join(CHECKPOINT_FILE)).unwrap();
    cfg.run.optimizer.lr = 0.1;
    let err = pretrain_with(&cfg, &pool, &ChannelStats::IDENTITY, Some(ckpt), &mut |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::Setup(_)));
}

#[test]
fn batch_larger_than_dataset_is_rejected() {
    let pool = NoisePool::new(3, 12, 14);
    let err = pretrain(&TrainConfig::new(tiny_run()), &pool, &ChannelStats::IDENTITY).unwrap_err();
    assert!(matches!(err, TrainError::Setup(_)));
}
