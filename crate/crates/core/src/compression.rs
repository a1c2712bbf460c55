//! One-shot layer pruning by knapsack selection, and distillation of the
//! pruned network from the full one.

use std::collections::BTreeSet;

use cftwin_autograd::{Adam, Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, ForwardMode, LayerCatalog};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{domain, Error, Result};
use crate::rng::{normals, substream};
use crate::training::TrainData;
use crate::sampling::UpsampleMethod;

const CALIB_TAG: u64 = 0x4341_4C49;
const DISTILL_TAG: u64 = 0x4B44_4953;

/// Ids of blocks that can be removed without changing any tensor shape.
pub fn prunable_layers(catalog: &LayerCatalog) -> Vec<usize> {
    catalog.layers.iter().filter(|l| l.prunable).map(|l| l.id).collect()
}

/// Fixed corrupted inputs on which distortions are measured.
#[derive(Clone, Debug)]
pub struct Calibration<T> {
    pub cond: Tensor<T>,
    pub noisy: Tensor<T>,
    pub steps: Vec<usize>,
}

impl<T: Scalar> Calibration<T> {
    /// Draws `per_sample` corruptions of each of the first `samples` pairs.
    pub fn draw(data: &TrainData, samples: usize, per_sample: usize, sched: &NoiseSchedule, seed: u64) -> Result<Self> {
        let n = samples.min(data.len());
        if n == 0 || per_sample == 0 {
            return Err(domain("calibration set is empty"));
        }
        let idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, per_sample)).collect();
        let (cond, target) = data.batch(&idx);
        let mut rng = substream(seed, &[CALIB_TAG]);
        let steps: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=sched.steps())).collect();
        let eps = normals(&mut rng, target.numel());
        let noisy = corrupt_batch(target.data(), &steps, &eps, sched);
        Ok(Self { cond: cond.cast(), noisy: Tensor::new(target.shape(), noisy.into_iter().map(T::of).collect()), steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn chunk(&self, range: std::ops::Range<usize>) -> (Tensor<T>, Tensor<T>, &[usize]) {
        let per = self.noisy.numel() / self.len();
        let mut shape = self.noisy.shape().to_vec();
        shape[0] = range.len();
        let span = range.start * per..range.end * per;
        (
            Tensor::new(&shape, self.cond.data()[span.clone()].to_vec()),
            Tensor::new(&shape, self.noisy.data()[span].to_vec()),
            &self.steps[range],
        )
    }
}

fn corrupt_batch(clean: &[f32], steps: &[usize], eps: &[f64], sched: &NoiseSchedule) -> Vec<f64> {
    let per = clean.len() / steps.len();
    let mut out = Vec::with_capacity(clean.len());
    for (k, &t) in steps.iter().enumerate() {
        let (s, r) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        let span = k * per..(k + 1) * per;
        out.extend(clean[span.clone()].iter().zip(&eps[span]).map(|(&x, &e)| s * x as f64 + r * e));
    }
    out
}

const CHUNK: usize = 16;

fn outputs<T: Scalar>(model: &Denoiser<T>, calib: &Calibration<T>, skip: &BTreeSet<usize>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(calib.noisy.numel());
    for start in (0..calib.len()).step_by(CHUNK) {
        let (c, x, steps) = calib.chunk(start..(start + CHUNK).min(calib.len()));
        out.extend(model.predict_skipping(&c, &x, steps, skip)?.into_data());
    }
    Ok(out)
}

/// Mean over calibration items of the squared distance between two output sets.
fn mean_sq_distance<T: Scalar>(a: &[T], b: &[T], items: usize) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / items as f64
}

fn check_prunable<T: Scalar>(model: &Denoiser<T>, ids: &BTreeSet<usize>) -> Result<()> {
    let catalog = model.catalog();
    for &id in ids {
        match catalog.get(id) {
            Some(l) if l.prunable => {}
            _ => return Err(domain(format!("layer {id} is not prunable"))),
        }
    }
    Ok(())
}

/// Distortion caused by bypassing all of `ids` at once: the mean over
/// calibration items of `‖ε_full − ε_without‖²`.
pub fn removal_distortion<T: Scalar>(teacher: &Denoiser<T>, ids: &BTreeSet<usize>, calib: &Calibration<T>) -> Result<f64> {
    check_prunable(teacher, ids)?;
    let full = outputs(teacher, calib, &BTreeSet::new())?;
    Ok(mean_sq_distance(&full, &outputs(teacher, calib, ids)?, calib.len()))
}

/// Distortion from removing the single layer `id`.
pub fn layer_importance<T: Scalar>(teacher: &Denoiser<T>, id: usize, calib: &Calibration<T>) -> Result<f64> {
    removal_distortion(teacher, &BTreeSet::from([id]), calib)
}

/// Importance of every prunable layer, sharing one pass of the full model.
pub fn score_layers<T: Scalar>(teacher: &Denoiser<T>, calib: &Calibration<T>) -> Result<Vec<(usize, f64)>> {
    let full = outputs(teacher, calib, &BTreeSet::new())?;
    prunable_layers(&teacher.catalog())
        .into_iter()
        .filter(|id| !teacher.removed().contains(id))
        .map(|id| {
            let d = mean_sq_distance(&full, &outputs(teacher, calib, &BTreeSet::from([id]))?, calib.len());
            log::info!("layer {id}: distortion {d:.6e}");
            Ok((id, d))
        })
        .collect()
}

/// Weight discretization: exact counts up to 2^20 total, otherwise units of 1024.
pub fn weight_unit(total_weight: usize) -> usize {
    if total_weight <= 1 << 20 {
        1
    } else {
        1024
    }
}

/// Chooses items minimizing total value while their weights sum to at least
/// `budget`. Returns sorted item indices.
///
/// Solved as the complementary problem: keep the items of maximal value whose
/// weights fit in `Σw − budget`. Kept weights are rounded up and the capacity
/// down, so the budget always holds. Ties prefer fewer removed items, then
/// removing lower indices.
pub fn solve_knapsack(values: &[f64], weights: &[usize], budget: usize) -> Result<Vec<usize>> {
    if values.len() != weights.len() {
        return Err(domain("values and weights differ in length"));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(domain(format!("value {v} is not a finite nonnegative number")));
    }
    let total: usize = weights.iter().sum();
    if budget > total {
        return Err(Error::Infeasible(format!("budget {budget} exceeds the total weight {total}")));
    }
    if budget == 0 {
        return Ok(Vec::new());
    }
    let unit = weight_unit(total);
    let cap = (total - budget) / unit;
    let w: Vec<usize> = weights.iter().map(|&x| x.div_ceil(unit)).collect();
    let n = values.len();
    // best[i][c]: (kept value, kept count) over items i.. with capacity c.
    let width = cap + 1;
    let mut best = vec![(0.0f64, 0u32); (n + 1) * width];
    for i in (0..n).rev() {
        for c in 0..=cap {
            let skip = best[(i + 1) * width + c];
            let mut cell = skip;
            if w[i] <= c {
                let (v, k) = best[(i + 1) * width + c - w[i]];
                let take = (v + values[i], k + 1);
                if better(take, skip) {
                    cell = take;
                }
            }
            best[i * width + c] = cell;
        }
    }
    // Walk forward, removing an item whenever that stays optimal.
    let mut removed = Vec::new();
    let mut c = cap;
    for i in 0..n {
        let here = best[i * width + c];
        if best[(i + 1) * width + c] == here {
            removed.push(i);
        } else {
            c -= w[i];
        }
    }
    Ok(removed)
}

fn better(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    pub value: f64,
    pub weight: usize,
}

/// Auditable record of a pruning decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub ratio: f64,
    pub teacher_params: usize,
    pub budget_params: usize,
    pub weight_unit: usize,
    pub candidates: Vec<Candidate>,
    pub selection: Vec<usize>,
    pub objective_value: f64,
    pub pruned_params: usize,
    pub catalog_fingerprint: String,
}

impl PruningPlan {
    /// Builds a plan from scored candidates.
    pub fn from_scores(catalog: &LayerCatalog, scores: &[(usize, f64)], ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(domain(format!("pruning ratio {ratio} must lie in (0, 1)")));
        }
        let total = catalog.total_params();
        let budget = (ratio * total as f64).round() as usize;
        let mut candidates = Vec::with_capacity(scores.len());
        for &(id, value) in scores {
            let rec = catalog.get(id).filter(|l| l.prunable).ok_or_else(|| domain(format!("layer {id} is not prunable")))?;
            candidates.push(Candidate { id, value, weight: rec.params });
        }
        candidates.sort_by_key(|c| c.id);
        let mass: usize = candidates.iter().map(|c| c.weight).sum();
        if budget > mass {
            return Err(Error::Infeasible(format!(
                "budget of {budget} parameters exceeds the prunable mass {mass}; the largest achievable ratio is {:.4}",
                mass as f64 / total as f64
            )));
        }
        let values: Vec<f64> = candidates.iter().map(|c| c.value).collect();
        let weights: Vec<usize> = candidates.iter().map(|c| c.weight).collect();
        let picked = solve_knapsack(&values, &weights, budget)?;
        let selection: Vec<usize> = picked.iter().map(|&i| candidates[i].id).collect();
        let objective_value = picked.iter().map(|&i| candidates[i].value).sum();
        let pruned_params = picked.iter().map(|&i| candidates[i].weight).sum();
        Ok(Self {
            ratio,
            teacher_params: total,
            budget_params: budget,
            weight_unit: weight_unit(mass),
            candidates,
            selection,
            objective_value,
            pruned_params,
            catalog_fingerprint: catalog.fingerprint(),
        })
    }
}

/// Scores every prunable layer and selects the cheapest set meeting the budget.
pub fn plan_pruning<T: Scalar>(teacher: &Denoiser<T>, calib: &Calibration<T>, ratio: f64) -> Result<PruningPlan> {
    if !teacher.removed().is_empty() {
        return Err(domain("the teacher must be unpruned"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(domain(format!("pruning ratio {ratio} must lie in (0, 1)")));
    }
    let scores = score_layers(teacher, calib)?;
    PruningPlan::from_scores(&teacher.catalog(), &scores, ratio)
}

/// Removes the planned layers; the remaining weights are copied unchanged.
pub fn apply_pruning<T: Scalar>(teacher: &Denoiser<T>, plan: &PruningPlan) -> Result<Denoiser<T>> {
    if teacher.catalog().fingerprint() != plan.catalog_fingerprint {
        return Err(domain("pruning plan was made for a different model"));
    }
    teacher.without_blocks(&plan.selection.iter().copied().collect())
}

/// Row of the pairwise additivity diagnostic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditivityRow {
    pub first: usize,
    pub second: usize,
    pub joint: f64,
    pub sum_of_singles: f64,
    pub ratio: f64,
}

/// Compares the distortion of removing each pair of prunable layers with the
/// sum of their individual distortions.
pub fn additivity_table<T: Scalar>(teacher: &Denoiser<T>, calib: &Calibration<T>) -> Result<Vec<AdditivityRow>> {
    let singles = score_layers(teacher, calib)?;
    let full = outputs(teacher, calib, &BTreeSet::new())?;
    let mut rows = Vec::new();
    for (a, &(i, di)) in singles.iter().enumerate() {
        for &(j, dj) in &singles[a + 1..] {
            let joint = mean_sq_distance(&full, &outputs(teacher, calib, &BTreeSet::from([i, j]))?, calib.len());
            let sum = di + dj;
            let ratio = if sum > 0.0 { joint / sum } else { f64::NAN };
            rows.push(AdditivityRow { first: i, second: j, joint, sum_of_singles: sum, ratio });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda_o: f64,
    pub lambda_f: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    /// Stage ids whose boundary activations are matched; defaults to the
    /// ends of the down path, the middle, and the up path.
    pub feature_taps: Option<Vec<usize>>,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub upsample: UpsampleMethod,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_o: 1.0,
            lambda_f: 1.0,
            iterations: 50_000,
            batch_size: 16,
            learning_rate: 5e-5,
            dropout_rate: 0.1,
            feature_taps: None,
            schedule: ScheduleConfig::default(),
            seed: 0,
            upsample: UpsampleMethod::Bicubic,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_o >= 0.0 && self.lambda_f >= 0.0) {
            return Err(domain("distillation weights must be nonnegative"));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(domain("batch_size and learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(domain("dropout_rate must lie in [0, 1)"));
        }
        self.schedule.build().map(|_| ())
    }
}

/// One corrupted batch shared by teacher and student.
#[derive(Clone, Debug)]
pub struct KdBatch<T> {
    pub cond: Tensor<T>,
    pub noisy: Tensor<T>,
    pub eps: Tensor<T>,
    pub steps: Vec<usize>,
}

impl<T: Scalar> KdBatch<T> {
    pub fn draw(data: &TrainData, idx: &[usize], sched: &NoiseSchedule, rng: &mut impl Rng) -> Self {
        let (cond, target) = data.batch(idx);
        let steps: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=sched.steps())).collect();
        let eps = normals(rng, target.numel());
        let noisy = corrupt_batch(target.data(), &steps, &eps, sched);
        let shape = target.shape().to_vec();
        Self {
            cond: cond.cast(),
            noisy: Tensor::new(&shape, noisy.into_iter().map(T::of).collect()),
            eps: Tensor::new(&shape, eps.into_iter().map(T::of).collect()),
            steps,
        }
    }
}

/// Task, output-distillation and feature-distillation terms, each a mean
/// over elements (the feature term sums the per-tap means).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdLosses {
    pub task: f64,
    pub okd: f64,
    pub fkd: f64,
}

impl KdLosses {
    pub fn total(&self, lambda_o: f64, lambda_f: f64) -> f64 {
        self.task + lambda_o * self.okd + lambda_f * self.fkd
    }
}

/// Teacher outputs and activations at the taps, computed without gradients.
fn teacher_targets<T: Scalar>(teacher: &Denoiser<T>, batch: &KdBatch<T>, taps: &[usize]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let vars = teacher.bind(&mut g, false);
    let (c, x) = (g.input(batch.cond.clone()), g.input(batch.noisy.clone()));
    let out = teacher.forward_graph(&mut g, &vars, c, x, &batch.steps, ForwardMode::Eval, &BTreeSet::new())?;
    let feats = taps
        .iter()
        .map(|&s| out.tap(s).map(|v| g.value(v).clone()).ok_or_else(|| domain(format!("stage {s} has no tap"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((g.value(out.eps).clone(), feats))
}

struct KdGraph<T> {
    graph: Graph<T>,
    vars: Vec<Var>,
    total: Var,
    losses: KdLosses,
}

fn kd_graph<T: Scalar>(
    teacher: &Denoiser<T>,
    student: &Denoiser<T>,
    batch: &KdBatch<T>,
    taps: &[usize],
    weights: (f64, f64),
    mode: ForwardMode<'_>,
) -> Result<KdGraph<T>> {
    let (t_eps, t_feats) = teacher_targets(teacher, batch, taps)?;
    let mut g = Graph::new();
    let vars = student.bind(&mut g, true);
    let (c, x) = (g.input(batch.cond.clone()), g.input(batch.noisy.clone()));
    let out = student.forward_graph(&mut g, &vars, c, x, &batch.steps, mode, &BTreeSet::new())?;
    let e = g.input(batch.eps.clone());
    let task = g.mse(out.eps, e);
    let te = g.input(t_eps);
    let okd = g.mse(out.eps, te);
    let mut fkd_terms = Vec::with_capacity(taps.len());
    for (&s, tf) in taps.iter().zip(t_feats) {
        let sv = out.tap(s).ok_or_else(|| domain(format!("student has no tap at stage {s}")))?;
        if g.shape(sv) != tf.shape() {
            return Err(domain(format!("tap {s}: student {:?} vs teacher {:?}", g.shape(sv), tf.shape())));
        }
        let tv = g.input(tf);
        fkd_terms.push(g.mse(sv, tv));
    }
    let value = |g: &Graph<T>, v: Var| g.value(v).data()[0].f64();
    let losses = KdLosses {
        task: value(&g, task),
        okd: value(&g, okd),
        fkd: fkd_terms.iter().map(|&v| value(&g, v)).sum(),
    };
    let mut total = task;
    let wo = g.scale(okd, weights.0);
    total = g.add(total, wo);
    for f in fkd_terms {
        let wf = g.scale(f, weights.1);
        total = g.add(total, wf);
    }
    Ok(KdGraph { graph: g, vars, total, losses })
}

/// Evaluation-mode distillation terms for one batch.
pub fn kd_losses<T: Scalar>(teacher: &Denoiser<T>, student: &Denoiser<T>, batch: &KdBatch<T>, taps: &[usize]) -> Result<KdLosses> {
    Ok(kd_graph(teacher, student, batch, taps, (1.0, 1.0), ForwardMode::Eval)?.losses)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdRecord {
    pub iteration: u64,
    pub task: f64,
    pub okd: f64,
    pub fkd: f64,
    pub total: f64,
}

/// Fine-tunes `student` against the frozen `teacher`.
pub fn distill_finetune(
    teacher: &Denoiser<f32>,
    mut student: Denoiser<f32>,
    cfg: &DistillConfig,
    data: &TrainData,
) -> Result<(Denoiser<f32>, Vec<KdRecord>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(domain("distillation needs a nonempty dataset"));
    }
    let sched = cfg.schedule.build()?;
    let taps = cfg.feature_taps.clone().unwrap_or_else(|| teacher.spec().default_taps());
    student.set_dropout_rate(cfg.dropout_rate)?;
    let shapes = student.params().shapes();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(cfg.learning_rate, &refs);
    let mut trace = Vec::with_capacity(cfg.iterations as usize);
    for k in 1..=cfg.iterations {
        let mut rng = substream(cfg.seed, &[DISTILL_TAG, k]);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let batch = KdBatch::draw(data, &idx, &sched, &mut rng);
        let kd = kd_graph(teacher, &student, &batch, &taps, (cfg.lambda_o, cfg.lambda_f), ForwardMode::Train(&mut rng))?;
        let total = kd.losses.total(cfg.lambda_o, cfg.lambda_f);
        if !total.is_finite() {
            return Err(Error::Training { iteration: k, detail: format!("non-finite distillation loss {total}") });
        }
        let mut grads = kd.graph.backward(kd.total);
        let grads: Vec<Tensor<f32>> =
            kd.vars.iter().zip(student.params().tensors()).map(|(v, t)| grads.take_or_zeros(*v, t.shape())).collect();
        adam.update(student.params_mut().tensors_mut(), &grads);
        let l = kd.losses;
        trace.push(KdRecord { iteration: k, task: l.task, okd: l.okd, fkd: l.fkd, total });
        if k % 100 == 0 {
            log::info!("distill iteration {k}: total {total:.5} (task {:.5}, okd {:.5}, fkd {:.5})", l.task, l.okd, l.fkd);
        }
    }
    Ok((student, trace))
}
