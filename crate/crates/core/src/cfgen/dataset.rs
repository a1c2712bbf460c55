use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{downsample_cf, minmax_normalize, CfGrid, Normalization};
use super::{Environment, Scenario};
use crate::container;
use crate::error::{domain, format_err, FormatKind, Result};
use crate::rng;

pub const DATASET_MAGIC: &[u8; 8] = b"CFDS0001";

const TAG_GEN: u64 = 0x4745_4e00;
const TAG_SPLIT: u64 = 0x5350_4c54;

/// Per-pair metadata kept in the dataset header.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    /// Raw dB `[min, max]` used for normalization, when normalized.
    pub range_db: Option<[f64; 2]>,
    pub bs_location: Option<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    RawDb,
    Minmax01,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub scenario: Option<Scenario>,
    pub hr_resolution: usize,
    pub lr_resolution: usize,
    pub factor: usize,
    pub channels: usize,
    pub hr_cell_size_m: f64,
    pub normalization: NormalizationMode,
    pub count: usize,
    pub samples: Vec<SampleMeta>,
    /// Hex SHA-256 of the float payload.
    pub checksum: String,
}

/// Paired fine (HR) and coarse (LR) grids sharing one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub pairs: Vec<(CfGrid, CfGrid)>,
}

impl Dataset {
    /// Builds a dataset, checking that every pair shares resolutions and normalization mode.
    pub fn new(pairs: Vec<(CfGrid, CfGrid)>, scenario: Option<Scenario>, bs_locations: Option<Vec<[f64; 2]>>) -> Result<Self> {
        if let Some(locs) = &bs_locations {
            if locs.len() != pairs.len() {
                return Err(domain("one base-station location per pair is required"));
            }
        }
        let (hr_resolution, lr_resolution, channels, hr_cell_size_m, normalization) = match pairs.first() {
            Some((hr, lr)) => (hr.resolution(), lr.resolution(), hr.channels(), hr.cell_size_m(), mode_of(hr)),
            None => (0, 0, 1, 0.0, NormalizationMode::Minmax01),
        };
        let mut samples = Vec::with_capacity(pairs.len());
        for (k, (hr, lr)) in pairs.iter().enumerate() {
            if hr.resolution() != hr_resolution || lr.resolution() != lr_resolution {
                return Err(domain(format!("pair {k} has resolutions {}/{}", hr.resolution(), lr.resolution())));
            }
            if hr.channels() != channels || lr.channels() != channels {
                return Err(domain(format!("pair {k} has a different channel count")));
            }
            if hr.normalization() != lr.normalization() || mode_of(hr) != normalization {
                return Err(domain(format!("pair {k} mixes normalization modes")));
            }
            if lr_resolution == 0 || hr_resolution % lr_resolution != 0 {
                return Err(domain(format!("LR resolution {lr_resolution} does not divide HR {hr_resolution}")));
            }
            let range_db = match hr.normalization() {
                Normalization::Minmax01 { min, max } => Some([min, max]),
                Normalization::RawDb => None,
            };
            samples.push(SampleMeta { range_db, bs_location: bs_locations.as_ref().map(|l| l[k]) });
        }
        let factor = if lr_resolution == 0 { 0 } else { hr_resolution / lr_resolution };
        let header = DatasetHeader {
            scenario,
            hr_resolution,
            lr_resolution,
            factor,
            channels,
            hr_cell_size_m,
            normalization,
            count: pairs.len(),
            samples,
            checksum: String::new(),
        };
        let mut ds = Self { header, pairs };
        ds.header.checksum = container::payload_checksum(&ds.payload()?);
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Single-precision payload: each pair's HR grid followed by its LR grid.
    fn payload(&self) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for (hr, lr) in &self.pairs {
            for &v in hr.values().iter().chain(lr.values()) {
                let f = v as f32;
                if f as f64 != v {
                    return Err(domain(format!("value {v} is not exactly representable in single precision")));
                }
                out.push(f);
            }
        }
        Ok(out)
    }

    /// New dataset holding the pairs at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let pairs = indices.iter().map(|&i| self.pairs[i].clone()).collect();
        let locs = self.header.samples.iter().map(|s| s.bs_location).collect::<Option<Vec<_>>>();
        let locs = locs.map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(pairs, self.header.scenario.clone(), locs)
    }
}

fn mode_of(g: &CfGrid) -> NormalizationMode {
    match g.normalization() {
        Normalization::RawDb => NormalizationMode::RawDb,
        Normalization::Minmax01 { .. } => NormalizationMode::Minmax01,
    }
}

/// Writes a dataset file, returning the payload checksum.
///
/// Values are stored as `f32`; grids must already be single-precision exact
/// (see [`CfGrid::quantize_f32`]) so that reading back is lossless.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<String> {
    let payload = dataset.payload()?;
    let mut header = dataset.header.clone();
    header.checksum = container::payload_checksum(&payload);
    let json = serde_json::to_vec(&header)?;
    container::write(path, DATASET_MAGIC, &json, &payload)?;
    Ok(header.checksum)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let (header_bytes, payload) = container::read(path, DATASET_MAGIC)?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| format_err(path, FormatKind::CorruptHeader, e.to_string()))?;
    if header.samples.len() != header.count {
        return Err(format_err(path, FormatKind::CorruptHeader, "sample metadata does not match count"));
    }
    let c = header.channels;
    let (hr_n, lr_n) = (header.hr_resolution.pow(2) * c, header.lr_resolution.pow(2) * c);
    let expected = header.count * (hr_n + lr_n);
    if payload.len() != expected {
        let kind = if payload.len() < expected { FormatKind::Truncated } else { FormatKind::ShapeMismatch };
        return Err(format_err(path, kind, format!("expected {expected} floats, found {}", payload.len())));
    }
    if container::payload_checksum(&payload) != header.checksum {
        return Err(format_err(path, FormatKind::ChecksumMismatch, "payload does not match header checksum"));
    }
    let lr_cell = header.hr_cell_size_m * header.factor as f64;
    let mut pairs = Vec::with_capacity(header.count);
    for (k, chunk) in payload.chunks((hr_n + lr_n).max(1)).enumerate().take(header.count) {
        let norm = match (header.normalization, header.samples[k].range_db) {
            (NormalizationMode::RawDb, _) => Normalization::RawDb,
            (NormalizationMode::Minmax01, Some([min, max])) => Normalization::Minmax01 { min, max },
            (NormalizationMode::Minmax01, None) => {
                return Err(format_err(path, FormatKind::CorruptHeader, format!("sample {k} lacks its range")))
            }
        };
        let to_grid = |vals: &[f32], res, cell| {
            CfGrid::new(vals.iter().map(|&v| v as f64).collect(), res, c, cell, norm)
                .map_err(|e| format_err(path, FormatKind::ShapeMismatch, e.to_string()))
        };
        let hr = to_grid(&chunk[..hr_n], header.hr_resolution, header.hr_cell_size_m)?;
        let lr = to_grid(&chunk[hr_n..], header.lr_resolution, lr_cell)?;
        pairs.push((hr, lr));
    }
    Ok(Dataset { header, pairs })
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub count: usize,
    pub hr_resolution: usize,
    pub factor: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { count: 6000, hr_resolution: 128, factor: 4, channels: 1, seed: 0 }
    }
}

/// Synthesizes normalized HR/LR pairs, one random base-station position per pair.
///
/// Base stations sit at integer coordinates in `[1, W]`; each pair gets its own
/// environment seed. The LR grid is the stride-subsampled normalized HR grid and
/// carries the same range.
pub fn generate_pairs(template: &Scenario, cfg: &GenConfig) -> Result<Dataset> {
    Scenario { bs_location: [0.0, 0.0], ..template.clone() }.validate()?;
    if cfg.factor == 0 || cfg.hr_resolution % cfg.factor != 0 {
        return Err(domain(format!("factor {} does not divide resolution {}", cfg.factor, cfg.hr_resolution)));
    }
    if cfg.channels == 0 {
        return Err(domain("channels must be at least 1"));
    }
    let side = template.area_side_m.floor() as i64;
    if side < 1 {
        return Err(domain("area must be at least 1 m wide to place base stations"));
    }
    let mut pairs = Vec::with_capacity(cfg.count);
    let mut locations = Vec::with_capacity(cfg.count);
    for k in 0..cfg.count {
        let mut r = rng::substream(cfg.seed, &[TAG_GEN, k as u64]);
        let bs = [r.random_range(1..=side) as f64, r.random_range(1..=side) as f64];
        let scenario = Scenario { bs_location: bs, seed: rng::mix(cfg.seed, &[k as u64]), ..template.clone() };
        let raw = Environment::new(&scenario)?.rasterize(cfg.hr_resolution)?;
        let (mut hr, _) = minmax_normalize(&raw)?;
        hr.quantize_f32();
        if cfg.channels > 1 {
            hr = hr.replicate_channels(cfg.channels)?;
        }
        let lr = downsample_cf(&hr, cfg.factor)?;
        pairs.push((hr, lr));
        locations.push(bs);
        if (k + 1) % 64 == 0 {
            log::info!("generated {}/{} maps", k + 1, cfg.count);
        }
    }
    Dataset::new(pairs, Some(template.clone()), Some(locations))
}

/// Seed-stable 5:1 train/test split of `count` indices (test share rounded).
pub fn split_train_test(count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng::substream(seed, &[TAG_SPLIT]));
    let n_test = ((count as f64) / 6.0).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn pair(seed: f64) -> (CfGrid, CfGrid) {
        let norm = Normalization::Minmax01 { min: -120.0 + seed, max: -40.0 };
        let hr = CfGrid::new((0..16).map(|v| (v as f64 + seed) / 32.0).collect(), 4, 1, 2.0, norm).unwrap();
        let lr = downsample_cf(&hr, 2).unwrap();
        (hr, lr)
    }

    #[test]
    fn empty_and_single_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.cfds");
        let empty = Dataset::new(vec![], None, None).unwrap();
        write_dataset(&empty, &p).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back, empty);

        let p = dir.path().join("one.cfds");
        let one = Dataset::new(vec![pair(1.0)], Some(Scenario::default()), Some(vec![[3.0, 4.0]])).unwrap();
        write_dataset(&one, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), one);
    }

    #[test]
    fn damaged_files_give_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.cfds");
        let ds = Dataset::new(vec![pair(1.0), pair(2.0)], None, None).unwrap();
        write_dataset(&ds, &p).unwrap();
        let good = std::fs::read(&p).unwrap();
        let kind_of = |bytes: &[u8]| {
            std::fs::write(&p, bytes).unwrap();
            match read_dataset(&p) {
                Err(Error::Format { kind, .. }) => kind,
                other => panic!("expected a format error, got {other:?}"),
            }
        };
        let mut b = good.clone();
        b[0] = b'X';
        assert_eq!(kind_of(&b), FormatKind::BadMagic);
        let mut b = good.clone();
        b[17] = b'#';
        assert_eq!(kind_of(&b), FormatKind::CorruptHeader);
        assert_eq!(kind_of(&good[..good.len() - 4]), FormatKind::Truncated);
        let mut b = good.clone();
        b.extend_from_slice(&[0; 4]);
        assert_eq!(kind_of(&b), FormatKind::ShapeMismatch);
        let mut b = good.clone();
        let last = b.len() - 1;
        b[last] ^= 0x01;
        assert_eq!(kind_of(&b), FormatKind::ChecksumMismatch);
    }

    #[test]
    fn non_single_precision_values_are_refused() {
        let hr = CfGrid::new(vec![0.1; 4], 2, 1, 1.0, Normalization::Minmax01 { min: 0.0, max: 1.0 }).unwrap();
        let lr = downsample_cf(&hr, 1).unwrap();
        assert!(Dataset::new(vec![(hr, lr)], None, None).is_err());
    }

    #[test]
    fn mixed_layouts_are_refused() {
        let (hr, lr) = pair(1.0);
        let other = CfGrid::new(vec![0.5; 4], 2, 1, 1.0, Normalization::RawDb).unwrap();
        assert!(Dataset::new(vec![(hr.clone(), lr.clone()), (other.clone(), downsample_cf(&other, 1).unwrap())], None, None).is_err());
    }

    #[test]
    fn split_ratio() {
        let (train, test) = split_train_test(6, 3);
        assert_eq!((train.len(), test.len()), (5, 1));
        let (train, test) = split_train_test(512, 3);
        assert_eq!(train.len() + test.len(), 512);
        assert_eq!(test.len(), 85);
        assert_eq!(split_train_test(512, 3), (train, test));
    }

    #[test]
    fn generated_pairs_are_normalized_and_consistent() {
        let scenario = Scenario { area_side_m: 16.0, n_subcarriers_active: 16, ..Scenario::default() };
        let cfg = GenConfig { count: 3, hr_resolution: 8, factor: 2, channels: 1, seed: 5 };
        let ds = generate_pairs(&scenario, &cfg).unwrap();
        assert_eq!(ds.len(), 3);
        for ((hr, lr), meta) in ds.pairs.iter().zip(&ds.header.samples) {
            assert!(hr.values().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(downsample_cf(hr, 2).unwrap(), *lr);
            let [x, y] = meta.bs_location.unwrap();
            assert!((1.0..=16.0).contains(&x) && x.fract() == 0.0 && (1.0..=16.0).contains(&y));
        }
        assert_eq!(generate_pairs(&scenario, &cfg).unwrap(), ds);
    }
}
