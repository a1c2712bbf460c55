use std::collections::BTreeSet;
use std::path::Path;

use cftwin_autograd::Tensor;
use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserSpec, ParamStore};
use crate::container;
use crate::error::{domain, format_err, FormatKind, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CFCK0001";

/// One row of the training loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    pub ema_active: bool,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SetEntry {
    set: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: DenoiserSpec,
    removed: Vec<usize>,
    iteration: u64,
    sets: Vec<SetEntry>,
    loss_trace: Vec<LossRecord>,
    meta: serde_json::Value,
    checksum: String,
}

/// Model weights plus training state, stored as named tensor sets
/// (for example `raw`, `ema`, `adam_m`, `adam_v`).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: DenoiserSpec,
    pub removed: BTreeSet<usize>,
    pub iteration: u64,
    pub sets: Vec<(String, ParamStore<f32>)>,
    pub loss_trace: Vec<LossRecord>,
    /// Free-form metadata such as the training configuration.
    pub meta: serde_json::Value,
}

impl Checkpoint {
    /// Checkpoint holding a single `raw` set taken from `model`.
    pub fn from_model(model: &Denoiser<f32>) -> Self {
        Self {
            spec: model.spec().clone(),
            removed: model.removed().clone(),
            iteration: 0,
            sets: vec![("raw".into(), model.params().clone())],
            loss_trace: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn set(&self, name: &str) -> Option<&ParamStore<f32>> {
        self.sets.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    /// Adds or replaces a set.
    pub fn put(&mut self, name: &str, store: ParamStore<f32>) {
        match self.sets.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = store,
            None => self.sets.push((name.to_string(), store)),
        }
    }

    /// Rebuilds the network from set `name`.
    pub fn model(&self, name: &str) -> Result<Denoiser<f32>> {
        let store = self.set(name).ok_or_else(|| domain(format!("checkpoint has no '{name}' weights")))?;
        Denoiser::from_parts(self.spec.clone(), self.removed.clone(), store.clone())
    }

    /// Prefers EMA weights when present.
    pub fn inference_model(&self) -> Result<Denoiser<f32>> {
        if self.set("ema").is_some() {
            self.model("ema")
        } else {
            self.model("raw")
        }
    }

    fn payload(&self) -> Vec<f32> {
        self.sets.iter().flat_map(|(_, s)| s.tensors().flat_map(|t| t.data().iter().copied())).collect()
    }

    /// Writes atomically and returns the payload checksum.
    pub fn save(&self, path: &Path) -> Result<String> {
        let payload = self.payload();
        let checksum = container::payload_checksum(&payload);
        let header = Header {
            spec: self.spec.clone(),
            removed: self.removed.iter().copied().collect(),
            iteration: self.iteration,
            sets: self
                .sets
                .iter()
                .map(|(set, s)| SetEntry {
                    set: set.clone(),
                    tensors: s.iter().map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
                })
                .collect(),
            loss_trace: self.loss_trace.clone(),
            meta: self.meta.clone(),
            checksum: checksum.clone(),
        };
        container::write(path, CHECKPOINT_MAGIC, &serde_json::to_vec(&header)?, &payload)?;
        Ok(checksum)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (raw, payload) = container::read(path, CHECKPOINT_MAGIC)?;
        let header: Header = serde_json::from_slice(&raw)
            .map_err(|e| format_err(path, FormatKind::CorruptHeader, e.to_string()))?;
        let expected: usize = header.sets.iter().flat_map(|s| &s.tensors).map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() < expected {
            return Err(format_err(path, FormatKind::Truncated, format!("{} of {expected} values present", payload.len())));
        }
        if payload.len() > expected {
            return Err(format_err(path, FormatKind::ShapeMismatch, format!("{} values for {expected} declared", payload.len())));
        }
        if container::payload_checksum(&payload) != header.checksum {
            return Err(format_err(path, FormatKind::ChecksumMismatch, "payload does not match header checksum"));
        }
        let mut offset = 0;
        let mut sets = Vec::with_capacity(header.sets.len());
        for entry in header.sets {
            let mut store = ParamStore::default();
            for t in entry.tensors {
                let n: usize = t.shape.iter().product();
                let tensor = Tensor::new(&t.shape, payload[offset..offset + n].to_vec());
                offset += n;
                store
                    .push(t.name, tensor)
                    .map_err(|e| format_err(path, FormatKind::CorruptHeader, e.to_string()))?;
            }
            sets.push((entry.set, store));
        }
        let ck = Self {
            spec: header.spec,
            removed: header.removed.into_iter().collect(),
            iteration: header.iteration,
            sets,
            loss_trace: header.loss_trace,
            meta: header.meta,
        };
        if let Some(raw) = ck.set("raw") {
            Denoiser::from_parts(ck.spec.clone(), ck.removed.clone(), raw.clone())
                .map_err(|e| format_err(path, FormatKind::ShapeMismatch, e.to_string()))?;
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> DenoiserSpec {
        DenoiserSpec {
            resolution: 8,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            blocks_per_stage: 1,
            time_embed_dim: 8,
            attention_max_side: 4,
            ..DenoiserSpec::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = Denoiser::<f32>::new(&spec(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut ck = Checkpoint::from_model(&m);
        ck.put("ema", m.params().clone());
        ck.iteration = 42;
        ck.loss_trace = vec![LossRecord { iteration: 1, loss: 0.123456789, ema_active: false }];
        ck.meta = serde_json::json!({"seed": 7});
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let sum = ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(sum, ck.save(&dir.path().join("again.ckpt")).unwrap());
        assert_eq!(back.inference_model().unwrap().params(), m.params());
    }

    #[test]
    fn damage_is_reported() {
        let m = Denoiser::<f32>::new(&spec(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        Checkpoint::from_model(&m).save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { kind: FormatKind::ChecksumMismatch, .. })));
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { kind: FormatKind::Truncated, .. })));
    }
}
