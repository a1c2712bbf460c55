//! Noise-prediction training with Adam and an exponential moving average.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use cftwin_autograd::{Adam, Graph, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfgen::Dataset;
use crate::denoiser::{Checkpoint, Denoiser, ForwardMode, LossRecord, ParamStore};
use crate::diffusion::{bound_weight, LossWeighting, NoiseSchedule, ScheduleConfig};
use crate::error::{domain, io_err, Error, Result};
use crate::rng::{normals, substream};
use crate::sampling::{upsample_condition, UpsampleMethod};

const TRAIN_TAG: u64 = 0x5452_4149;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_rate: f64,
    pub ema_start_iter: u64,
    pub dropout_rate: f64,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// Periodic checkpoint interval; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub loss_weighting: LossWeighting,
    pub upsample: UpsampleMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500_000,
            batch_size: 16,
            learning_rate: 5e-5,
            ema_rate: 0.9999,
            ema_start_iter: 5000,
            dropout_rate: 0.1,
            schedule: ScheduleConfig::default(),
            seed: 0,
            checkpoint_every: 10_000,
            loss_weighting: LossWeighting::Simple,
            upsample: UpsampleMethod::Bicubic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(domain("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(domain("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(domain("ema_rate must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(domain("dropout_rate must lie in [0, 1)"));
        }
        self.schedule.build().map(|_| ())
    }
}

/// Upsampled conditions and fine targets, channel-major, in single precision.
pub struct TrainData {
    pub conds: Vec<f32>,
    pub targets: Vec<f32>,
    pub channels: usize,
    pub resolution: usize,
}

impl TrainData {
    pub fn new(ds: &Dataset, method: UpsampleMethod) -> Result<Self> {
        if ds.is_empty() {
            return Err(domain("training needs a nonempty dataset"));
        }
        let (res, channels) = (ds.header.hr_resolution, ds.header.channels);
        let mut conds = Vec::with_capacity(ds.len() * res * res * channels);
        let mut targets = Vec::with_capacity(conds.capacity());
        for (hr, lr) in &ds.pairs {
            conds.extend(upsample_condition(lr, res, method)?.to_planar().into_iter().map(|v| v as f32));
            targets.extend(hr.to_planar().into_iter().map(|v| v as f32));
        }
        Ok(Self { conds, targets, channels, resolution: res })
    }

    pub fn len(&self) -> usize {
        self.targets.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    /// Stacks the given samples into `(cond, target)` batches.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let per = self.sample_len();
        let shape = [idx.len(), self.channels, self.resolution, self.resolution];
        let pick = |src: &[f32]| idx.iter().flat_map(|&i| src[i * per..(i + 1) * per].iter().copied()).collect();
        (Tensor::new(&shape, pick(&self.conds)), Tensor::new(&shape, pick(&self.targets)))
    }
}

/// One optimization step on a batch. Draws a step per sample and unit
/// Gaussian noise from `rng`, corrupts the targets, and applies Adam.
/// Returns the batch loss before the update.
pub fn train_step(
    model: &mut Denoiser<f32>,
    adam: &mut Adam<f32>,
    cond: &Tensor<f32>,
    target: &Tensor<f32>,
    sched: &NoiseSchedule,
    weighting: LossWeighting,
    rng: &mut impl Rng,
) -> Result<f64> {
    let n = target.shape()[0];
    let per = target.numel() / n.max(1);
    let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = normals(rng, target.numel());
    let mut noisy = Vec::with_capacity(target.numel());
    for (k, &t) in steps.iter().enumerate() {
        let (s, r) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        let span = k * per..(k + 1) * per;
        noisy.extend(target.data()[span.clone()].iter().zip(&eps[span]).map(|(&x, &e)| (s * x as f64 + r * e) as f32));
    }

    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let c = g.input(cond.clone());
    let x = g.input(Tensor::new(target.shape(), noisy));
    let e = g.input(Tensor::new(target.shape(), eps.iter().map(|&v| v as f32).collect()));
    let out = model.forward_graph(&mut g, &vars, c, x, &steps, ForwardMode::Train(rng), &BTreeSet::new())?;
    let loss = match weighting {
        LossWeighting::Simple => g.mse(out.eps, e),
        LossWeighting::Bound => {
            let mut w = Vec::with_capacity(target.numel());
            for &t in &steps {
                w.extend(std::iter::repeat_n(bound_weight(t, sched)?.sqrt() as f32, per));
            }
            let d = g.sub(out.eps, e);
            let d = g.mask(d, w);
            let zero = g.input(Tensor::zeros(target.shape()));
            g.mse(d, zero)
        }
    };
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Training { iteration: adam.step + 1, detail: format!("non-finite loss {value}") });
    }
    let mut grads = g.backward(loss);
    let grads: Vec<Tensor<f32>> =
        vars.iter().zip(model.params().tensors()).map(|(v, t)| grads.take_or_zeros(*v, t.shape())).collect();
    adam.update(model.params_mut().tensors_mut(), &grads);
    Ok(value)
}

/// `ema ← rate·ema + (1−rate)·params`, elementwise.
pub fn ema_update(ema: &mut ParamStore<f32>, params: &ParamStore<f32>, rate: f64) -> Result<()> {
    if !ema.same_structure(params) {
        return Err(domain("EMA and model parameters differ in structure"));
    }
    for (e, p) in ema.tensors_mut().zip(params.tensors()) {
        for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
            *ev = (rate * *ev as f64 + (1.0 - rate) * pv as f64) as f32;
        }
    }
    Ok(())
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Denoiser<f32>,
    pub adam: Adam<f32>,
    /// Present once the moving average is active.
    pub ema: Option<ParamStore<f32>>,
    pub iteration: u64,
    pub loss_trace: Vec<LossRecord>,
}

impl TrainState {
    pub fn fresh(mut model: Denoiser<f32>, cfg: &TrainConfig) -> Result<Self> {
        model.set_dropout_rate(cfg.dropout_rate)?;
        let shapes = model.params().shapes();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let adam = Adam::new(cfg.learning_rate, &refs);
        let ema = (cfg.ema_start_iter == 0).then(|| model.params().clone());
        Ok(Self { model, adam, ema, iteration: 0, loss_trace: Vec::new() })
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let mut state = Self::fresh(ck.model("raw")?, cfg)?;
        state.iteration = ck.iteration;
        state.loss_trace = ck.loss_trace.clone();
        state.adam.step = ck.iteration;
        if ck.iteration > 0 {
            for (name, slot) in [("adam_m", &mut state.adam.m), ("adam_v", &mut state.adam.v)] {
                let set = ck.set(name).ok_or_else(|| domain(format!("checkpoint lacks optimizer state '{name}'")))?;
                if !set.same_structure(state.model.params()) {
                    return Err(domain(format!("optimizer state '{name}' does not match the model")));
                }
                *slot = set.tensors().cloned().collect();
            }
        }
        if ck.iteration >= cfg.ema_start_iter {
            state.ema = Some(ck.set("ema").ok_or_else(|| domain("checkpoint lacks EMA weights"))?.clone());
        }
        Ok(state)
    }

    pub fn ema_active(&self) -> bool {
        self.ema.is_some()
    }

    /// Raw, EMA (equal to raw while inactive), and optimizer moment sets.
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.put("ema", self.ema.clone().unwrap_or_else(|| self.model.params().clone()));
        let moments = |ts: &[Tensor<f32>]| -> Result<ParamStore<f32>> {
            let mut s = ParamStore::default();
            for ((name, _), t) in self.model.params().iter().zip(ts) {
                s.push(name.to_string(), t.clone())?;
            }
            Ok(s)
        };
        ck.put("adam_m", moments(&self.adam.m)?);
        ck.put("adam_v", moments(&self.adam.v)?);
        ck.iteration = self.iteration;
        ck.loss_trace = self.loss_trace.clone();
        ck.meta = serde_json::json!({ "train": cfg });
        Ok(ck)
    }
}

/// Runs training until `cfg.iterations` steps have completed, calling
/// `on_checkpoint` every `cfg.checkpoint_every` steps. The randomness of
/// step `k` depends only on `(seed, k)`, so resuming from any checkpoint
/// reproduces an uninterrupted run.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    mut state: TrainState,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(domain("training needs a nonempty dataset"));
    }
    let spec = state.model.spec();
    if spec.resolution != data.resolution || spec.input_channels != data.channels {
        return Err(domain(format!(
            "model expects {}-channel {}² maps, data has {}-channel {}²",
            spec.input_channels, spec.resolution, data.channels, data.resolution
        )));
    }
    let sched = cfg.schedule.build()?;
    state.model.set_dropout_rate(cfg.dropout_rate)?;
    state.adam.lr = cfg.learning_rate;
    while state.iteration < cfg.iterations {
        let k = state.iteration + 1;
        let mut rng = substream(cfg.seed, &[TRAIN_TAG, k]);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let (cond, target) = data.batch(&idx);
        let loss = train_step(&mut state.model, &mut state.adam, &cond, &target, &sched, cfg.loss_weighting, &mut rng)
            .map_err(|e| match e {
                Error::Training { detail, .. } => Error::Training { iteration: k, detail },
                other => other,
            })?;
        state.iteration = k;
        if k == cfg.ema_start_iter {
            state.ema = Some(state.model.params().clone());
        } else if let Some(ema) = &mut state.ema {
            ema_update(ema, state.model.params(), cfg.ema_rate)?;
        }
        state.loss_trace.push(LossRecord { iteration: k, loss, ema_active: state.ema.is_some() });
        if cfg.checkpoint_every > 0 && k % cfg.checkpoint_every == 0 {
            on_checkpoint(&state.to_checkpoint(cfg)?)?;
        }
        if k % 100 == 0 {
            log::info!("iteration {k}: loss {loss:.5}");
        }
    }
    state.to_checkpoint(cfg)
}

/// Writes the loss trace as `iteration,loss,ema_active` rows.
pub fn write_loss_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "iteration,loss,ema_active").map_err(io_err(path))?;
    for r in trace {
        writeln!(out, "{},{},{}", r.iteration, r.loss, r.ema_active).map_err(io_err(path))?;
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Mean of the last `window` losses (or fewer at the start).
pub fn moving_average(trace: &[LossRecord], end: usize, window: usize) -> f64 {
    let start = end.saturating_sub(window);
    let s = &trace[start..end];
    s.iter().map(|r| r.loss).sum::<f64>() / s.len().max(1) as f64
}
