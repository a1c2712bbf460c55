//! Reconstruction metrics and batch evaluation.

use serde::{Deserialize, Serialize};

use crate::cfgen::{denormalize, downsample_cf, CfGrid, Dataset, Normalization};
use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{domain, Result};
use crate::rng::mix;
use crate::sampling::{sample_batch, upsample_condition, NetworkPredictor, SampleRequest, UpsampleMethod};

/// Peak value of the 8-bit scale on which metrics are reported.
pub const PEAK: f64 = 255.0;
/// Reported PSNR when the error vanishes.
pub const PSNR_CAP_DB: f64 = 100.0;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(domain(format!("metric inputs must be nonempty and equal in size ({} vs {})", a.len(), b.len())));
    }
    Ok(())
}

/// `Σ(pred−ref)² / Σref²`.
pub fn nmse(pred: &[f64], reference: &[f64]) -> Result<f64> {
    same_len(pred, reference)?;
    let den: f64 = reference.iter().map(|r| r * r).sum();
    if den == 0.0 {
        return Err(domain("NMSE is undefined for an all-zero reference"));
    }
    Ok(pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum::<f64>() / den)
}

pub fn mse(pred: &[f64], reference: &[f64]) -> Result<f64> {
    same_len(pred, reference)?;
    Ok(pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum::<f64>() / pred.len() as f64)
}

/// `20·log10(peak/√mse)`, or `cap` when the error is zero.
pub fn psnr_from_mse(mse: f64, peak: f64, cap: f64) -> f64 {
    if mse <= 0.0 {
        return cap;
    }
    (20.0 * (peak / mse.sqrt()).log10()).min(cap)
}

pub fn psnr(pred: &[f64], reference: &[f64], peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, reference)?, peak, PSNR_CAP_DB))
}

const C1: f64 = (0.01 * PEAK) * (0.01 * PEAK);
const C2: f64 = (0.03 * PEAK) * (0.03 * PEAK);

fn ssim_from_stats(mx: f64, my: f64, vx: f64, vy: f64, cov: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

/// Single-window SSIM over the whole map, for values on the 8-bit scale.
pub fn ssim(pred: &[f64], reference: &[f64]) -> Result<f64> {
    same_len(pred, reference)?;
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = reference.iter().sum::<f64>() / n;
    let vx = pred.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
    let vy = reference.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
    let cov = pred.iter().zip(reference).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
    Ok(ssim_from_stats(mx, my, vx, vy, cov))
}

/// Mean SSIM over 11×11 Gaussian windows (σ = 1.5) on a `side × side` map,
/// evaluated at every position where the window fits.
pub fn ssim_gaussian(pred: &[f64], reference: &[f64], side: usize) -> Result<f64> {
    same_len(pred, reference)?;
    const W: usize = 11;
    if pred.len() != side * side || side < W {
        return Err(domain(format!("windowed SSIM needs a square map of side at least {W}")));
    }
    let g: Vec<f64> = (0..W).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let mut total = 0.0;
    let count = (side - W + 1) * (side - W + 1);
    for i in 0..=side - W {
        for j in 0..=side - W {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..W {
                for b in 0..W {
                    let w = g[a] * g[b] / norm;
                    let (x, y) = (pred[(i + a) * side + j + b], reference[(i + a) * side + j + b]);
                    mx += w * x;
                    my += w * y;
                    xx += w * x * x;
                    yy += w * y * y;
                    xy += w * x * y;
                }
            }
            total += ssim_from_stats(mx, my, xx - mx * mx, yy - my * my, xy - mx * my);
        }
    }
    Ok(total / count as f64)
}

/// Which SSIM variant reports use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimWindow {
    /// One window over the whole map.
    #[default]
    Global,
    /// Mean over 11×11 Gaussian windows, averaged over channels.
    Gaussian,
}

/// Produces normalized fine maps from coarse ones.
pub trait Reconstructor {
    /// `truth` is only consulted by reference reconstructors.
    fn reconstruct(&mut self, lr: &[CfGrid], truth: &[CfGrid], target: usize, seeds: &[u64]) -> Result<Vec<CfGrid>>;
}

/// Conditional diffusion sampling with a trained network.
pub struct DiffusionReconstructor<'a> {
    pub model: &'a Denoiser<f32>,
    pub schedule: &'a NoiseSchedule,
    pub method: UpsampleMethod,
}

impl Reconstructor for DiffusionReconstructor<'_> {
    fn reconstruct(&mut self, lr: &[CfGrid], _truth: &[CfGrid], target: usize, seeds: &[u64]) -> Result<Vec<CfGrid>> {
        let reqs: Vec<SampleRequest> = lr
            .iter()
            .zip(seeds)
            .map(|(g, &seed)| SampleRequest { lr: g.clone(), target_resolution: target, seed, method: self.method, keep_trajectory: false })
            .collect();
        let mut pred = NetworkPredictor { model: self.model };
        Ok(sample_batch(&mut pred, &reqs, self.schedule)?.into_iter().map(|o| o.normalized).collect())
    }
}

/// Plain interpolation of the coarse map.
pub struct InterpolationBaseline(pub UpsampleMethod);

impl Reconstructor for InterpolationBaseline {
    fn reconstruct(&mut self, lr: &[CfGrid], _truth: &[CfGrid], target: usize, _seeds: &[u64]) -> Result<Vec<CfGrid>> {
        lr.iter().map(|g| upsample_condition(g, target, self.0)).collect()
    }
}

/// Returns the ground truth; bounds the metrics from the ideal side.
pub struct OracleReconstructor;

impl Reconstructor for OracleReconstructor {
    fn reconstruct(&mut self, _lr: &[CfGrid], truth: &[CfGrid], _target: usize, _seeds: &[u64]) -> Result<Vec<CfGrid>> {
        Ok(truth.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    /// Metrics on the `[0, 255]` scale.
    pub nmse: f64,
    pub mse: f64,
    pub psnr: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
    /// Error metrics on the denormalized dB maps, when a range is known.
    pub nmse_db: Option<f64>,
    pub mse_db: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub nmse: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub method: String,
    pub factor: usize,
    pub count: usize,
    pub samples: Vec<SampleMetrics>,
    pub mean: MetricSummary,
    pub median: MetricSummary,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl EvalReport {
    pub fn from_samples(task: String, method: String, factor: usize, samples: Vec<SampleMetrics>) -> Self {
        let col = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).collect::<Vec<f64>>();
        let cols = [col(|s| s.nmse), col(|s| s.mse), col(|s| s.psnr), col(|s| s.ssim)];
        let summary = |agg: fn(&[f64]) -> f64| MetricSummary {
            nmse: agg(&cols[0]),
            mse: agg(&cols[1]),
            psnr: agg(&cols[2]),
            ssim: agg(&cols[3]),
        };
        Self { task, method, factor, count: samples.len(), mean: summary(mean), median: summary(median), samples }
    }

    /// One table row per aggregate, in the usual NMSE/MSE/PSNR/SSIM layout.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {} ({}, {} maps)\n\n", self.task, self.method, self.count);
        s.push_str("| aggregate | NMSE | MSE | PSNR (dB) | SSIM |\n|---|---|---|---|---|\n");
        for (name, m) in [("mean", self.mean), ("median", self.median)] {
            s.push_str(&format!("| {name} | {:.4e} | {:.4e} | {:.3} | {:.4} |\n", m.nmse, m.mse, m.psnr, m.ssim));
        }
        s.push_str("\nMetrics are computed on maps rescaled to [0, 255].\n");
        s
    }
}

/// Computes all metrics for one reconstruction against its reference.
pub fn score(index: usize, pred: &CfGrid, truth: &CfGrid, window: SsimWindow) -> Result<SampleMetrics> {
    if pred.resolution() != truth.resolution() || pred.channels() != truth.channels() {
        return Err(domain("reconstruction and reference differ in shape"));
    }
    let scale = |g: &CfGrid| g.values().iter().map(|v| v * PEAK).collect::<Vec<f64>>();
    let (p, r) = (scale(pred), scale(truth));
    let m = mse(&p, &r)?;
    let (nmse_db, mse_db) = match (pred.normalization(), truth.normalization()) {
        (Normalization::Minmax01 { .. }, Normalization::Minmax01 { .. }) => {
            let (pd, td) = (denormalize(pred)?, denormalize(truth)?);
            (Some(nmse(pd.values(), td.values())?), Some(mse(pd.values(), td.values())?))
        }
        _ => (None, None),
    };
    Ok(SampleMetrics {
        index,
        nmse: nmse(&p, &r)?,
        mse: m,
        psnr: psnr_from_mse(m, PEAK, PSNR_CAP_DB),
        psnr_capped: m == 0.0 || psnr_from_mse(m, PEAK, f64::INFINITY) > PSNR_CAP_DB,
        ssim: match window {
            SsimWindow::Global => ssim(&p, &r)?,
            SsimWindow::Gaussian => {
                let side = pred.resolution();
                let plane = side * side;
                let (pp, rp) = (pred.to_planar(), truth.to_planar());
                let mut total = 0.0;
                for c in 0..pred.channels() {
                    let scaled = |v: &[f64]| v[c * plane..(c + 1) * plane].iter().map(|x| x * PEAK).collect::<Vec<f64>>();
                    total += ssim_gaussian(&scaled(&pp), &scaled(&rp), side)?;
                }
                total / pred.channels() as f64
            }
        },
        nmse_db,
        mse_db,
    })
}

/// Evaluation of a reconstructor on a test set at a given factor.
///
/// Coarse inputs are re-derived from the fine maps at `factor`, so factors
/// other than the one the data was made with give a zero-shot evaluation.
pub struct EvalRequest<'a> {
    pub test: &'a Dataset,
    pub factor: usize,
    pub seed: u64,
    pub method: String,
    pub batch: usize,
    pub ssim_window: SsimWindow,
}

pub fn evaluate(rec: &mut dyn Reconstructor, req: &EvalRequest<'_>) -> Result<EvalReport> {
    let hr_res = req.test.header.hr_resolution;
    if req.factor == 0 || hr_res % req.factor != 0 {
        return Err(domain(format!("factor {} does not divide resolution {hr_res}", req.factor)));
    }
    if req.test.is_empty() {
        return Err(domain("evaluation needs at least one test pair"));
    }
    let lr_res = hr_res / req.factor;
    let task = format!("x{} {lr_res}²→{hr_res}²", req.factor);
    let mut samples = Vec::with_capacity(req.test.len());
    let batch = req.batch.max(1);
    for start in (0..req.test.len()).step_by(batch) {
        let end = (start + batch).min(req.test.len());
        let truth: Vec<CfGrid> = req.test.pairs[start..end].iter().map(|(hr, _)| hr.clone()).collect();
        let lr = truth.iter().map(|hr| downsample_cf(hr, req.factor)).collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = (start..end).map(|i| mix(req.seed, &[i as u64])).collect();
        let recon = rec.reconstruct(&lr, &truth, hr_res, &seeds)?;
        for (k, (p, t)) in recon.iter().zip(&truth).enumerate() {
            samples.push(score(start + k, p, t, req.ssim_window)?);
        }
        log::info!("{task}: scored {end}/{} maps", req.test.len());
    }
    Ok(EvalReport::from_samples(task, req.method.clone(), req.factor, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let r = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(nmse(&r, &r).unwrap(), 0.0);
        assert_eq!(nmse(&[0.0; 4], &r).unwrap(), 1.0);
        assert!(nmse(&r, &[0.0; 4]).is_err());
        assert_eq!(mse(&r.map(|v| v + 3.0), &r).unwrap(), 9.0);
        assert_eq!(psnr_from_mse(255.0 * 255.0, 255.0, PSNR_CAP_DB), 0.0);
        assert!((psnr_from_mse(1.0, 255.0, PSNR_CAP_DB) - 48.1308).abs() < 1e-4);
        assert_eq!(psnr(&r, &r, 255.0).unwrap(), PSNR_CAP_DB);
        assert_eq!(ssim(&r, &r).unwrap(), 1.0);
        assert!(mse(&r, &[1.0]).is_err());
    }

    #[test]
    fn anti_correlated_ssim_is_negative() {
        let r: Vec<f64> = (0..64).map(|i| 100.0 + (i as f64 * 1.7).sin() * 60.0).collect();
        let m = r.iter().sum::<f64>() / 64.0;
        let p: Vec<f64> = r.iter().map(|v| 2.0 * m - v).collect();
        assert!(ssim(&p, &r).unwrap() < 0.0);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
