use std::cell::RefCell;

use cftwin::cfgen::{generate_pairs, GenConfig, Scenario};
use cftwin::denoiser::{Checkpoint, Denoiser, DenoiserSpec};
use cftwin::diffusion::{LossWeighting, ScheduleConfig};
use cftwin::training::{moving_average, train, train_step, TrainConfig, TrainData, TrainState};
use cftwin::Error;
use cftwin_autograd::Adam;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(res: usize, count: usize) -> TrainData {
    let scenario = Scenario { area_side_m: 32.0, n_subcarriers_active: 16, ..Scenario::default() };
    let cfg = GenConfig { count, hr_resolution: res, factor: 4, channels: 1, seed: 11 };
    TrainData::new(&generate_pairs(&scenario, &cfg).unwrap(), Default::default()).unwrap()
}

fn spec(res: usize, c1: usize) -> DenoiserSpec {
    DenoiserSpec {
        resolution: res,
        base_channels: c1,
        channel_multipliers: vec![1, 2],
        blocks_per_stage: 1,
        time_embed_dim: 16,
        attention_max_side: res / 2,
        ..DenoiserSpec::default()
    }
}

fn config(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 4,
        learning_rate: 1e-3,
        ema_rate: 0.9,
        ema_start_iter: 3,
        schedule: ScheduleConfig { steps: 100, beta_start: 1e-4, beta_end: 0.1 },
        seed: 5,
        checkpoint_every: 4,
        ..TrainConfig::default()
    }
}

fn adam_for(m: &Denoiser<f32>, lr: f64) -> Adam<f32> {
    let shapes = m.params().shapes();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    Adam::new(lr, &refs)
}

#[test]
fn step_is_deterministic_and_moves_parameters() {
    let d = data(8, 4);
    let sched = config(1).schedule.build().unwrap();
    let init = Denoiser::<f32>::new(&spec(8, 4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (cond, target) = d.batch(&[0, 1, 2, 3]);
    let run = || {
        let mut m = init.clone();
        let mut adam = adam_for(&m, 1e-3);
        let loss = train_step(&mut m, &mut adam, &cond, &target, &sched, LossWeighting::Simple, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        (m, loss)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a.params(), b.params());
    assert_eq!(la, lb);
    assert!(la > 0.0);
    assert_ne!(a.params(), init.params());
}

#[test]
fn zero_predictor_loss_is_unit() {
    let d = data(8, 64);
    let sched = config(1).schedule.build().unwrap();
    let mut m = Denoiser::<f32>::new(&spec(8, 4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut adam = adam_for(&m, 1e-3);
    let idx: Vec<usize> = (0..64).collect();
    let (cond, target) = d.batch(&idx);
    let loss = train_step(&mut m, &mut adam, &cond, &target, &sched, LossWeighting::Simple, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!((loss - 1.0).abs() <= 0.05, "{loss}");
}

#[test]
fn bound_weighting_trains() {
    let d = data(8, 4);
    let sched = config(1).schedule.build().unwrap();
    let mut m = Denoiser::<f32>::new(&spec(8, 4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut adam = adam_for(&m, 1e-3);
    let (cond, target) = d.batch(&[0, 1]);
    let loss = train_step(&mut m, &mut adam, &cond, &target, &sched, LossWeighting::Bound, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
}

#[test]
fn nan_aborts_training() {
    let d = data(8, 4);
    let mut m = Denoiser::<f32>::new(&spec(8, 4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    m.params_mut().tensors_mut().next().unwrap().data_mut()[0] = f32::NAN;
    let state = TrainState::fresh(m, &config(3)).unwrap();
    let err = train(&config(3), &d, state, &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Training { iteration: 1, .. }), "{err}");
}

#[test]
fn zero_iterations_returns_initialization() {
    let d = data(8, 4);
    let m = Denoiser::<f32>::new(&spec(8, 4), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let ck = train(&config(0), &d, TrainState::fresh(m.clone(), &config(0)).unwrap(), &mut |_| Ok(())).unwrap();
    assert_eq!(ck.set("raw").unwrap(), m.params());
    assert!(ck.loss_trace.is_empty());
}

#[test]
fn resume_matches_uninterrupted_run_and_ema_activates() {
    let d = data(8, 6);
    let cfg = config(8);
    let m = Denoiser::<f32>::new(&spec(8, 4), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let saved = RefCell::new(Vec::new());
    let full = train(&cfg, &d, TrainState::fresh(m.clone(), &cfg).unwrap(), &mut |ck| {
        saved.borrow_mut().push(ck.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(saved.borrow().len(), 2);

    // Round-trip the mid-run checkpoint through disk, then continue.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    saved.borrow()[0].save(&path).unwrap();
    let mid = Checkpoint::load(&path).unwrap();
    assert_eq!(mid.iteration, 4);
    let resumed = train(&cfg, &d, TrainState::from_checkpoint(&mid, &cfg).unwrap(), &mut |_| Ok(())).unwrap();
    assert_eq!(resumed.sets, full.sets);
    assert_eq!(resumed.loss_trace, full.loss_trace);

    for r in &full.loss_trace {
        assert!(r.loss.is_finite());
        assert_eq!(r.ema_active, r.iteration >= cfg.ema_start_iter);
    }
    assert_ne!(full.set("ema"), full.set("raw"));

    let early = train(&config(2), &d, TrainState::fresh(m, &cfg).unwrap(), &mut |_| Ok(())).unwrap();
    assert_eq!(early.set("ema"), early.set("raw"));
}

#[test]
fn tiny_run_halves_the_loss() {
    let d = data(16, 48);
    let cfg = TrainConfig {
        iterations: 500,
        batch_size: 8,
        learning_rate: 2e-3,
        dropout_rate: 0.0,
        checkpoint_every: 0,
        ..config(500)
    };
    let m = Denoiser::<f32>::new(&spec(16, 16), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let ck = train(&cfg, &d, TrainState::fresh(m, &cfg).unwrap(), &mut |_| Ok(())).unwrap();
    let start = moving_average(&ck.loss_trace, 100, 100);
    let end = moving_average(&ck.loss_trace, 500, 100);
    assert!(end < 0.5 * start, "moving average went from {start} to {end}");
}

#[test]
fn shape_mismatch_is_rejected() {
    let d = data(8, 2);
    let m = Denoiser::<f32>::new(&spec(16, 4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(train(&config(1), &d, TrainState::fresh(m, &config(1)).unwrap(), &mut |_| Ok(())).is_err());
}
