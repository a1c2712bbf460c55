use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Value domain of a [`CfGrid`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Normalization {
    RawDb,
    /// Values were mapped to `[0, 1]` by `(v - min) / (max - min)`.
    Minmax01 { min: f64, max: f64 },
}

/// Square power map stored row-major with interleaved channels
/// (`resolution × resolution × channels`).
#[derive(Clone, Debug, PartialEq)]
pub struct CfGrid {
    values: Vec<f64>,
    resolution: usize,
    channels: usize,
    cell_size_m: f64,
    normalization: Normalization,
}

impl CfGrid {
    pub fn new(
        values: Vec<f64>,
        resolution: usize,
        channels: usize,
        cell_size_m: f64,
        normalization: Normalization,
    ) -> Result<Self> {
        if resolution == 0 || channels == 0 {
            return Err(domain("grid needs a positive resolution and channel count"));
        }
        if values.len() != resolution * resolution * channels {
            return Err(domain(format!(
                "grid of {resolution}x{resolution}x{channels} needs {} values, got {}",
                resolution * resolution * channels,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(domain(format!("grid value {v} is not finite")));
        }
        if let Normalization::Minmax01 { min, max } = normalization {
            if !(min < max) {
                return Err(domain(format!("normalized grid needs min < max, got [{min}, {max}]")));
            }
            if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(domain("normalized grid values must lie in [0, 1]"));
            }
        }
        Ok(Self { values, resolution, channels, cell_size_m, normalization })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[(i * self.resolution + j) * self.channels + c]
    }

    /// Copy with the single channel repeated `channels` times.
    pub fn replicate_channels(&self, channels: usize) -> Result<Self> {
        if self.channels != 1 {
            return Err(domain("only single-channel grids can be replicated"));
        }
        let values = self.values.iter().flat_map(|&v| std::iter::repeat_n(v, channels)).collect();
        Self::new(values, self.resolution, channels, self.cell_size_m, self.normalization)
    }

    /// Rounds every value to the nearest `f32` so that the grid survives
    /// a single-precision round trip unchanged.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }

    /// Channel-major (`C × H × W`) copy of the values, as used by the network.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.resolution * self.resolution;
        let mut out = vec![0.0; self.values.len()];
        for (p, px) in self.values.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + p] = v;
            }
        }
        out
    }

    /// Inverse of [`CfGrid::to_planar`].
    pub fn from_planar(
        planar: &[f64],
        resolution: usize,
        channels: usize,
        cell_size_m: f64,
        normalization: Normalization,
    ) -> Result<Self> {
        let plane = resolution * resolution;
        if planar.len() != plane * channels {
            return Err(domain("planar buffer size does not match the grid shape"));
        }
        let mut values = vec![0.0; planar.len()];
        for c in 0..channels {
            for p in 0..plane {
                values[p * channels + c] = planar[c * plane + p];
            }
        }
        Self::new(values, resolution, channels, cell_size_m, normalization)
    }
}

/// Keeps every `factor`-th grid point in both directions.
pub fn downsample_cf(hr: &CfGrid, factor: usize) -> Result<CfGrid> {
    if factor == 0 || hr.resolution % factor != 0 {
        return Err(domain(format!("factor {factor} does not divide resolution {}", hr.resolution)));
    }
    let res = hr.resolution / factor;
    let c = hr.channels;
    let mut values = Vec::with_capacity(res * res * c);
    for i in 0..res {
        for j in 0..res {
            let base = (i * factor * hr.resolution + j * factor) * c;
            values.extend_from_slice(&hr.values[base..base + c]);
        }
    }
    CfGrid::new(values, res, c, hr.cell_size_m * factor as f64, hr.normalization)
}

/// Maps a raw-dB grid to `[0, 1]`, returning the `(min, max)` used.
pub fn minmax_normalize(grid: &CfGrid) -> Result<(CfGrid, (f64, f64))> {
    if grid.normalization != Normalization::RawDb {
        return Err(domain("grid is already normalized"));
    }
    let min = grid.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = grid.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::Degenerate(format!("constant grid ({min} dB) cannot be normalized")));
    }
    let span = max - min;
    let values = grid.values.iter().map(|v| (v - min) / span).collect();
    let out = CfGrid::new(values, grid.resolution, grid.channels, grid.cell_size_m, Normalization::Minmax01 { min, max })?;
    Ok((out, (min, max)))
}

/// Maps a normalized grid back to dB with its stored range.
pub fn denormalize(grid: &CfGrid) -> Result<CfGrid> {
    let Normalization::Minmax01 { min, max } = grid.normalization else {
        return Err(domain("grid is not normalized"));
    };
    let values = grid.values.iter().map(|v| v * (max - min) + min).collect();
    CfGrid::new(values, grid.resolution, grid.channels, grid.cell_size_m, Normalization::RawDb)
}
