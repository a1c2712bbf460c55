//! Side-by-side heatmaps on a shared color scale, written as 8-bit RGB PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cftwin::cfgen::CfGrid;

const GAP_PX: usize = 4;

// Anchor colors of a perceptually ordered dark-blue to yellow ramp.
const RAMP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Maps `u ∈ [0, 1]` to a ramp color.
pub fn color(u: f64) -> [u8; 3] {
    let u = if u.is_finite() { u.clamp(0.0, 1.0) } else { 0.0 };
    let x = u * (RAMP.len() - 1) as f64;
    let k = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - k as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (RAMP[k][c] + f * (RAMP[k + 1][c] - RAMP[k][c])).round() as u8;
    }
    out
}

/// An RGB image holding the first channel of each map, left to right, enlarged to a
/// common panel size and colored on the min/max range shared by all maps.
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub range: (f64, f64),
}

pub fn render(maps: &[&CfGrid], min_panel_px: usize) -> Result<Heatmap> {
    if maps.is_empty() {
        bail!("nothing to plot");
    }
    let largest = maps.iter().map(|m| m.resolution()).max().expect("nonempty");
    if maps.iter().any(|m| largest % m.resolution() != 0) {
        bail!("map sides must divide the largest side {largest}");
    }
    let panel = largest * min_panel_px.div_ceil(largest).max(1);
    let plane = |m: &CfGrid| {
        let n = m.resolution() * m.resolution();
        m.to_planar()[..n].to_vec()
    };
    let planes: Vec<Vec<f64>> = maps.iter().map(|m| plane(m)).collect();
    let lo = planes.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = planes.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = maps.len() * panel + (maps.len() - 1) * GAP_PX;
    let mut rgb = vec![255u8; width * panel * 3];
    for (p, (m, values)) in maps.iter().zip(&planes).enumerate() {
        let side = m.resolution();
        let scale = panel / side;
        let x0 = p * (panel + GAP_PX);
        for y in 0..panel {
            for x in 0..panel {
                let v = values[(y / scale) * side + x / scale];
                let px = ((y * width) + x0 + x) * 3;
                rgb[px..px + 3].copy_from_slice(&color((v - lo) / span));
            }
        }
    }
    Ok(Heatmap { width, height: panel, rgb, range: (lo, hi) })
}

pub fn write_png(h: &Heatmap, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), h.width as u32, h.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(&h.rgb)?;
    w.finish()?;
    Ok(())
}
