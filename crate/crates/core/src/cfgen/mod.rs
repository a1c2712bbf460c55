//! Channel-fingerprint synthesis.
//!
//! Each location gets a multipath set whose total gain follows a log-distance
//! mean plus spatially correlated log-normal shadowing; the wideband MIMO
//! channel of that path set is reduced to its power in dB.

mod dataset;
mod grid;

pub use dataset::{
    generate_pairs, read_dataset, split_train_test, write_dataset, Dataset, DatasetHeader, GenConfig, SampleMeta,
    DATASET_MAGIC,
};
pub use grid::{denormalize, downsample_cf, minmax_normalize, CfGrid, Normalization};

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::rng;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Raw power floor applied before normalization.
pub const POWER_FLOOR_DB: f64 = -174.0;

/// Number of random Fourier features in the shadowing field.
const SHADOW_FEATURES: usize = 256;

const TAG_SHADOW: u64 = 0x5348_4144;
const TAG_CELL: u64 = 0x4345_4c4c;

/// Statistics of the per-path complex gains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathGainParams {
    pub path_loss_exponent: f64,
    pub shadowing_std_db: f64,
    /// Half-width, in radians, of the uniform angular offset of scattered paths.
    pub angle_spread_rad: f64,
    /// Relative spread of the per-path power around its delay-decay profile, in `[0, 1)`.
    pub power_jitter: f64,
}

impl Default for PathGainParams {
    fn default() -> Self {
        Self { path_loss_exponent: 3.5, shadowing_std_db: 8.0, angle_spread_rad: 0.35, power_jitter: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub area_side_m: f64,
    pub n_ant_v: usize,
    pub n_ant_h: usize,
    pub n_subcarriers_total: usize,
    pub n_subcarriers_active: usize,
    pub subcarrier_spacing_hz: f64,
    pub carrier_freq_hz: f64,
    pub bs_location: [f64; 2],
    pub bs_height_m: f64,
    pub ue_height_m: f64,
    /// Carried for completeness; a static power map does not depend on it.
    pub ue_velocity_mps: f64,
    pub n_paths_mean: f64,
    pub path_gain: PathGainParams,
    pub delay_spread_s: f64,
    pub shadowing_corr_m: f64,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            area_side_m: 128.0,
            n_ant_v: 8,
            n_ant_h: 8,
            n_subcarriers_total: 512,
            n_subcarriers_active: 300,
            subcarrier_spacing_hz: 15e3,
            carrier_freq_hz: 2.4e9,
            bs_location: [64.0, 64.0],
            bs_height_m: 25.0,
            ue_height_m: 1.5,
            ue_velocity_mps: 0.3,
            n_paths_mean: 6.0,
            path_gain: PathGainParams::default(),
            delay_spread_s: 300e-9,
            shadowing_corr_m: 16.0,
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_ant_v", self.n_ant_v),
            ("n_ant_h", self.n_ant_h),
            ("n_subcarriers_total", self.n_subcarriers_total),
            ("n_subcarriers_active", self.n_subcarriers_active),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(domain(format!("{name} must be at least 1")));
            }
        }
        if self.n_subcarriers_active > self.n_subcarriers_total {
            return Err(domain(format!(
                "n_subcarriers_active ({}) exceeds n_subcarriers_total ({})",
                self.n_subcarriers_active, self.n_subcarriers_total
            )));
        }
        if !(self.area_side_m > 0.0 && self.area_side_m.is_finite()) {
            return Err(domain("area_side_m must be positive"));
        }
        let [bx, by] = self.bs_location;
        if !(0.0..=self.area_side_m).contains(&bx) || !(0.0..=self.area_side_m).contains(&by) {
            return Err(domain(format!("bs_location ({bx}, {by}) outside the area")));
        }
        if self.n_paths_mean < 1.0 {
            return Err(domain("n_paths_mean must be at least 1"));
        }
        if !(self.subcarrier_spacing_hz > 0.0 && self.carrier_freq_hz > 0.0) {
            return Err(domain("frequencies must be positive"));
        }
        if self.delay_spread_s < 0.0 || self.shadowing_corr_m <= 0.0 || self.path_gain.shadowing_std_db < 0.0 {
            return Err(domain("delay spread, shadowing correlation and shadowing std must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.path_gain.power_jitter) {
            return Err(domain("power_jitter must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn n_antennas(&self) -> usize {
        self.n_ant_v * self.n_ant_h
    }

    /// Length of the space-frequency channel vector.
    pub fn channel_len(&self) -> usize {
        self.n_subcarriers_active * self.n_antennas()
    }

    /// Free-space loss at 1 m in dB.
    fn reference_loss_db(&self) -> f64 {
        20.0 * (4.0 * PI * self.carrier_freq_hz / SPEED_OF_LIGHT).log10()
    }

    fn first_subcarrier(&self) -> i64 {
        -((self.n_subcarriers_active / 2) as i64)
    }
}

/// One propagation path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Path {
    pub gain: Complex64,
    pub delay_s: f64,
    /// Normalized horizontal angle in `[-1, 1]`.
    pub psi: f64,
    /// Normalized vertical angle in `[-1, 1]`.
    pub phi: f64,
}

/// Gaussian random field with squared-exponential covariance, realized by
/// random Fourier features.
#[derive(Clone, Debug)]
struct ShadowField {
    freqs: Vec<[f64; 2]>,
    phases: Vec<f64>,
    amplitude: f64,
}

impl ShadowField {
    fn new(scenario: &Scenario) -> Self {
        let mut rng = rng::substream(scenario.seed, &[TAG_SHADOW]);
        let normal = Normal::new(0.0, 1.0 / scenario.shadowing_corr_m).expect("positive correlation length");
        let freqs = (0..SHADOW_FEATURES).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
        let phases = (0..SHADOW_FEATURES).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let amplitude = scenario.path_gain.shadowing_std_db * (2.0 / SHADOW_FEATURES as f64).sqrt();
        Self { freqs, phases, amplitude }
    }

    fn value_db(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self.freqs.iter().zip(&self.phases).map(|(w, b)| (w[0] * x + w[1] * y + b).cos()).sum();
        self.amplitude * s
    }
}

/// A scenario together with its realized large-scale environment.
#[derive(Clone, Debug)]
pub struct Environment {
    scenario: Scenario,
    shadow: ShadowField,
}

impl Environment {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        Ok(Self { scenario: scenario.clone(), shadow: ShadowField::new(scenario) })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Mean total path gain (dB) at a location: distance loss plus shadowing.
    pub fn mean_gain_db(&self, location: [f64; 2]) -> f64 {
        let s = &self.scenario;
        let d3 = self.distance_3d(location).max(1.0);
        -(s.reference_loss_db() + 10.0 * s.path_gain.path_loss_exponent * d3.log10())
            + self.shadow.value_db(location[0], location[1])
    }

    fn distance_3d(&self, [x, y]: [f64; 2]) -> f64 {
        let s = &self.scenario;
        let d2 = (x - s.bs_location[0]).hypot(y - s.bs_location[1]);
        d2.hypot(s.bs_height_m - s.ue_height_m)
    }

    /// Draws the multipath set seen at `location`.
    pub fn sample_paths(&self, location: [f64; 2], rng: &mut impl Rng) -> Result<Vec<Path>> {
        let s = &self.scenario;
        let [x, y] = location;
        if !(0.0..=s.area_side_m).contains(&x) || !(0.0..=s.area_side_m).contains(&y) {
            return Err(domain(format!("location ({x}, {y}) outside the {}-m area", s.area_side_m)));
        }
        let count = if s.n_paths_mean > 1.0 {
            let extra: f64 = Poisson::new(s.n_paths_mean - 1.0).expect("positive rate").sample(rng);
            1 + extra as usize
        } else {
            1
        };
        let (dx, dy) = (x - s.bs_location[0], y - s.bs_location[1]);
        let d2 = dx.hypot(dy);
        let d3 = self.distance_3d(location);
        let azimuth = dy.atan2(dx);
        let elevation = (s.ue_height_m - s.bs_height_m).atan2(d2);
        let excess = (s.delay_spread_s > 0.0).then(|| Exp::new(1.0 / s.delay_spread_s).expect("positive rate"));
        let spread = s.path_gain.angle_spread_rad;

        let mut paths = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        for l in 0..count {
            let extra_delay = match (&excess, l) {
                (Some(e), l) if l > 0 => e.sample(rng),
                _ => 0.0,
            };
            let decay = if s.delay_spread_s > 0.0 { (-extra_delay / s.delay_spread_s).exp() } else { 1.0 };
            weights.push(decay * (1.0 - s.path_gain.power_jitter * rng.random::<f64>()));
            let (az, el) = if l == 0 || spread == 0.0 {
                (azimuth, elevation)
            } else {
                (azimuth + rng.random_range(-spread..=spread), elevation + rng.random_range(-spread..=spread))
            };
            let phase = rng.random_range(0.0..2.0 * PI);
            paths.push(Path {
                gain: Complex64::from_polar(1.0, phase),
                delay_s: d3 / SPEED_OF_LIGHT + extra_delay,
                psi: el.cos() * az.sin(),
                phi: el.sin(),
            });
        }
        let total_linear = 10f64.powf(self.mean_gain_db(location) / 10.0);
        let norm: f64 = weights.iter().sum();
        for (p, w) in paths.iter_mut().zip(weights) {
            p.gain *= (total_linear * w / norm).sqrt();
        }
        Ok(paths)
    }

    /// Raw channel power (dB, floored) at a location, using its own substream.
    pub fn power_at(&self, location: [f64; 2]) -> Result<f64> {
        let mut rng = rng::substream(self.scenario.seed, &[TAG_CELL, millimetres(location[0]), millimetres(location[1])]);
        let paths = self.sample_paths(location, &mut rng)?;
        Ok(power_to_db(path_set_power(&self.scenario, &paths)?))
    }

    /// Evaluates the map at grid points `(i·Δ, j·Δ)`, `Δ = W / resolution`.
    pub fn rasterize(&self, resolution: usize) -> Result<CfGrid> {
        if resolution < 2 {
            return Err(domain("resolution must be at least 2"));
        }
        let cell = self.scenario.area_side_m / resolution as f64;
        let mut values = Vec::with_capacity(resolution * resolution);
        for i in 0..resolution {
            for j in 0..resolution {
                values.push(self.power_at([i as f64 * cell, j as f64 * cell])?);
            }
        }
        CfGrid::new(values, resolution, 1, cell, Normalization::RawDb)
    }
}

/// Location key for per-cell substreams; independent of the grid resolution
/// so the same point always sees the same multipath draw.
fn millimetres(v: f64) -> u64 {
    (v * 1000.0).round() as i64 as u64
}

/// Convenience wrapper building the environment for a single draw.
pub fn sample_paths(scenario: &Scenario, location: [f64; 2], rng: &mut impl Rng) -> Result<Vec<Path>> {
    Environment::new(scenario)?.sample_paths(location, rng)
}

/// Rasterizes a scenario onto a `resolution × resolution` grid of raw dB power.
pub fn rasterize_cf(scenario: &Scenario, resolution: usize) -> Result<CfGrid> {
    Environment::new(scenario)?.rasterize(resolution)
}

fn steering(count: usize, start: i64, theta: f64) -> impl Iterator<Item = Complex64> {
    (0..count as i64).map(move |n| Complex64::from_polar(1.0, -theta * (start + n) as f64))
}

/// Space-frequency channel vector of a path set, ordered subcarrier-major,
/// then horizontal, then vertical antenna index.
pub fn channel_vector(scenario: &Scenario, paths: &[Path]) -> Result<Vec<Complex64>> {
    if paths.is_empty() {
        return Err(domain("channel_vector of an empty path set"));
    }
    let (nv, nh, nk) = (scenario.n_ant_v, scenario.n_ant_h, scenario.n_subcarriers_active);
    let mut h = vec![Complex64::new(0.0, 0.0); scenario.channel_len()];
    for p in paths {
        if !(-1.0..=1.0).contains(&p.psi) || !(-1.0..=1.0).contains(&p.phi) || p.delay_s < 0.0 {
            return Err(domain(format!("invalid path {p:?}")));
        }
        let at: Vec<_> = steering(nk, scenario.first_subcarrier(), 2.0 * PI * scenario.subcarrier_spacing_hz * p.delay_s)
            .map(|c| c.conj())
            .collect();
        let ah: Vec<_> = steering(nh, 0, PI * p.psi).map(|c| c.conj()).collect();
        let av: Vec<_> = steering(nv, 0, PI * p.phi).map(|c| c.conj()).collect();
        let mut idx = 0;
        for t in &at {
            for a in &ah {
                let ta = p.gain * t * a;
                for v in &av {
                    h[idx] += ta * v;
                    idx += 1;
                }
            }
        }
    }
    Ok(h)
}

/// `10·log10(‖h‖²)`, floored at [`POWER_FLOOR_DB`].
pub fn channel_power_db(channel: &[Complex64]) -> Result<f64> {
    if channel.is_empty() {
        return Err(domain("channel_power_db of an empty vector"));
    }
    Ok(power_to_db(channel.iter().map(|c| c.norm_sqr()).sum()))
}

fn power_to_db(linear: f64) -> f64 {
    if linear > 0.0 {
        (10.0 * linear.log10()).max(POWER_FLOOR_DB)
    } else {
        POWER_FLOOR_DB
    }
}

/// `Σ_{n=start}^{start+count-1} e^{jnθ}` by phasor recurrence.
fn phasor_sum(start: i64, count: usize, theta: f64) -> Complex64 {
    let step = Complex64::from_polar(1.0, theta);
    let mut z = Complex64::from_polar(1.0, theta * start as f64);
    let mut acc = Complex64::new(0.0, 0.0);
    for _ in 0..count {
        acc += z;
        z *= step;
    }
    acc
}

/// `‖h‖²` of a path set without forming the channel vector.
///
/// The Kronecker structure factors every path-pair inner product into three
/// short sums, so the cost is `O(L²·(N_k + N_h + N_v))` instead of
/// `O(L·N_k·N_h·N_v)`.
pub fn path_set_power(scenario: &Scenario, paths: &[Path]) -> Result<f64> {
    if paths.is_empty() {
        return Err(domain("path_set_power of an empty path set"));
    }
    let n = scenario.channel_len() as f64;
    let mut total = 0.0;
    for (l, p) in paths.iter().enumerate() {
        total += p.gain.norm_sqr() * n;
        for q in &paths[l + 1..] {
            let gram = phasor_sum(
                scenario.first_subcarrier(),
                scenario.n_subcarriers_active,
                2.0 * PI * scenario.subcarrier_spacing_hz * (p.delay_s - q.delay_s),
            ) * phasor_sum(0, scenario.n_ant_h, PI * (p.psi - q.psi))
                * phasor_sum(0, scenario.n_ant_v, PI * (p.phi - q.phi));
            total += 2.0 * (p.gain * q.gain.conj() * gram).re;
        }
    }
    Ok(total.max(0.0))
}
