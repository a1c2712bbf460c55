//! Conditional iterative refinement from a coarse map to a fine one.

use serde::{Deserialize, Serialize};

use crate::cfgen::{denormalize, CfGrid, Normalization};
use crate::denoiser::Denoiser;
use crate::diffusion::{q_sample, reverse_step, NoiseSchedule};
use crate::error::{domain, Error, Result};
use crate::rng::{normals, substream};
use cftwin_autograd::Tensor;

const SAMPLE_TAG: u64 = 0x5A4D_504C;

/// Interpolation used to bring the coarse map to the target grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMethod {
    #[default]
    Bicubic,
    Nearest,
}

/// Cubic convolution kernel with `a = -0.5`.
fn keys(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Weights on in-range samples standing in for sample `k`, which may lie
/// outside `0..n`; outside samples are extrapolated linearly from the edge.
fn edge_weights(k: isize, n: usize) -> Vec<(usize, f64)> {
    let last = n as isize - 1;
    if (0..=last).contains(&k) || n == 1 {
        return vec![(k.clamp(0, last) as usize, 1.0)];
    }
    let (edge, inner, d) = if k < 0 { (0, 1, -k) } else { (last, last - 1, k - last) };
    vec![(edge as usize, 1.0 + d as f64), (inner as usize, -(d as f64))]
}

/// Interpolation taps for every output index along one axis. Coarse sample
/// `k` sits at fine index `k·factor`.
fn axis_taps(n_in: usize, factor: usize, method: UpsampleMethod) -> Vec<Vec<(usize, f64)>> {
    (0..n_in * factor)
        .map(|i| match method {
            UpsampleMethod::Nearest => vec![((i / factor).min(n_in - 1), 1.0)],
            UpsampleMethod::Bicubic => {
                let pos = i as f64 / factor as f64;
                let base = pos.floor() as isize;
                let frac = pos - base as f64;
                (-1..=2)
                    .flat_map(|o| {
                        let w = keys(frac - o as f64);
                        edge_weights(base + o, n_in).into_iter().map(move |(k, e)| (k, w * e))
                    })
                    .collect()
            }
        })
        .collect()
}

/// Interpolates `lr` onto a `target × target` grid. Normalized maps are
/// clamped back into `[0, 1]`.
pub fn upsample_condition(lr: &CfGrid, target: usize, method: UpsampleMethod) -> Result<CfGrid> {
    let n = lr.resolution();
    if target == 0 || target % n != 0 {
        return Err(domain(format!("target {target} is not a multiple of resolution {n}")));
    }
    let factor = target / n;
    let c = lr.channels();
    let taps = axis_taps(n, factor, method);
    // Rows first, then columns.
    let mut rows = vec![0.0; target * n * c];
    for (i, ti) in taps.iter().enumerate() {
        for j in 0..n {
            for ch in 0..c {
                rows[(i * n + j) * c + ch] = ti.iter().map(|&(k, w)| w * lr.get(k, j, ch)).sum();
            }
        }
    }
    let mut out = vec![0.0; target * target * c];
    for i in 0..target {
        for (j, tj) in taps.iter().enumerate() {
            for ch in 0..c {
                out[(i * target + j) * c + ch] = tj.iter().map(|&(k, w)| w * rows[(i * n + k) * c + ch]).sum();
            }
        }
    }
    if matches!(lr.normalization(), Normalization::Minmax01 { .. }) {
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
    }
    CfGrid::new(out, target, c, lr.cell_size_m() / factor as f64, lr.normalization())
}

/// Anything that predicts the noise in a batch of corrupted maps.
///
/// Buffers are channel-major, one `[C, R, R]` block per sample.
pub trait NoisePredictor {
    fn predict_noise(&mut self, cond: &[f64], noisy: &[f64], steps: &[usize]) -> Result<Vec<f64>>;
}

/// Adapts a trained network to [`NoisePredictor`].
pub struct NetworkPredictor<'a> {
    pub model: &'a Denoiser<f32>,
}

impl NoisePredictor for NetworkPredictor<'_> {
    fn predict_noise(&mut self, cond: &[f64], noisy: &[f64], steps: &[usize]) -> Result<Vec<f64>> {
        let spec = self.model.spec();
        let shape = [steps.len(), spec.input_channels, spec.resolution, spec.resolution];
        let to = |v: &[f64]| Tensor::new(&shape, v.iter().map(|&x| x as f32).collect());
        let eps = self.model.predict(&to(cond), &to(noisy), steps)?;
        Ok(eps.data().iter().map(|&v| v as f64).collect())
    }
}

/// Always predicts zero noise.
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict_noise(&mut self, _cond: &[f64], noisy: &[f64], _steps: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![0.0; noisy.len()])
    }
}

/// Knows the clean maps and returns the exact noise relating them to the
/// current state, i.e. the ideal denoiser.
pub struct OraclePredictor<'a> {
    pub clean: Vec<f64>,
    pub schedule: &'a NoiseSchedule,
}

impl NoisePredictor for OraclePredictor<'_> {
    fn predict_noise(&mut self, _cond: &[f64], noisy: &[f64], steps: &[usize]) -> Result<Vec<f64>> {
        if noisy.len() != self.clean.len() || steps.is_empty() || noisy.len() % steps.len() != 0 {
            return Err(domain("oracle batch does not match its clean maps"));
        }
        let per = noisy.len() / steps.len();
        let mut out = Vec::with_capacity(noisy.len());
        for (k, &t) in steps.iter().enumerate() {
            let ab = self.schedule.alpha_bar(t);
            let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
            let span = k * per..(k + 1) * per;
            out.extend(noisy[span.clone()].iter().zip(&self.clean[span]).map(|(x, x0)| (x - s * x0) / n));
        }
        Ok(out)
    }
}

/// One coarse-to-fine request.
#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub lr: CfGrid,
    pub target_resolution: usize,
    pub seed: u64,
    pub method: UpsampleMethod,
    pub keep_trajectory: bool,
}

/// Result of one refinement chain.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Final map in the network's value domain (clamped to `[0, 1]` when normalized).
    pub normalized: CfGrid,
    /// Final map in dB when the input carried a normalization range.
    pub db: Option<CfGrid>,
    /// States `g_T, …, g_0` (channel-major) when requested.
    pub trajectory: Vec<Vec<f64>>,
}

/// Runs one chain; see [`sample_batch`].
pub fn sample_hr(pred: &mut dyn NoisePredictor, req: &SampleRequest, sched: &NoiseSchedule) -> Result<SampleOutput> {
    Ok(sample_batch(pred, std::slice::from_ref(req), sched)?.remove(0))
}

/// Runs independent chains side by side. Each request draws its noise from
/// its own seed, so results do not depend on how requests are batched.
pub fn sample_batch(pred: &mut dyn NoisePredictor, reqs: &[SampleRequest], sched: &NoiseSchedule) -> Result<Vec<SampleOutput>> {
    let Some(first) = reqs.first() else {
        return Ok(Vec::new());
    };
    let (res, ch) = (first.target_resolution, first.lr.channels());
    let per = res * res * ch;
    let mut conds = Vec::with_capacity(per * reqs.len());
    for r in reqs {
        if r.target_resolution != res || r.lr.channels() != ch {
            return Err(domain("batched requests must share target resolution and channels"));
        }
        conds.extend(upsample_condition(&r.lr, res, r.method)?.to_planar());
    }
    let mut rngs: Vec<_> = reqs.iter().map(|r| substream(r.seed, &[SAMPLE_TAG])).collect();
    let mut state: Vec<f64> = rngs.iter_mut().flat_map(|rng| normals(rng, per)).collect();
    let mut trajectories: Vec<Vec<Vec<f64>>> = reqs.iter().map(|_| Vec::new()).collect();
    let record = |traj: &mut Vec<Vec<Vec<f64>>>, state: &[f64]| {
        for (k, r) in reqs.iter().enumerate() {
            if r.keep_trajectory {
                traj[k].push(state[k * per..(k + 1) * per].to_vec());
            }
        }
    };
    record(&mut trajectories, &state);
    for t in (1..=sched.steps()).rev() {
        let steps = vec![t; reqs.len()];
        let eps = pred.predict_noise(&conds, &state, &steps)?;
        if eps.len() != state.len() {
            return Err(domain("predictor returned the wrong number of values"));
        }
        let mut next = Vec::with_capacity(state.len());
        for (k, rng) in rngs.iter_mut().enumerate() {
            let noise = if t > 1 { normals(rng, per) } else { vec![0.0; per] };
            let span = k * per..(k + 1) * per;
            next.extend(reverse_step(&state[span.clone()], &eps[span], t, &noise, sched)?);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling { step: t });
        }
        state = next;
        record(&mut trajectories, &state);
    }
    let mut out = Vec::with_capacity(reqs.len());
    for ((k, r), trajectory) in reqs.iter().enumerate().zip(trajectories) {
        let mut vals = state[k * per..(k + 1) * per].to_vec();
        let norm = r.lr.normalization();
        if matches!(norm, Normalization::Minmax01 { .. }) {
            for v in &mut vals {
                *v = v.clamp(0.0, 1.0);
            }
        }
        let cell = r.lr.cell_size_m() * r.lr.resolution() as f64 / res as f64;
        let normalized = CfGrid::from_planar(&vals, res, ch, cell, norm)?;
        let db = match norm {
            Normalization::Minmax01 { .. } => Some(denormalize(&normalized)?),
            Normalization::RawDb => None,
        };
        out.push(SampleOutput { normalized, db, trajectory });
    }
    Ok(out)
}

/// Corrupts `clean` to step `t` with seeded noise, returning `(g_t, ε)`.
pub fn corrupt(clean: &[f64], t: usize, seed: u64, sched: &NoiseSchedule) -> Result<(Vec<f64>, Vec<f64>)> {
    let eps = normals(&mut substream(seed, &[SAMPLE_TAG, t as u64]), clean.len());
    Ok((q_sample(clean, t, &eps, sched)?, eps))
}
