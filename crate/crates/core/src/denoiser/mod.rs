//! Conditional noise-prediction network: a U-shaped stack of residual blocks
//! with step-embedding injection, self-attention at coarse resolutions and
//! concatenated skip connections.

mod checkpoint;
mod model;
mod time;

pub use checkpoint::{Checkpoint, LossRecord, CHECKPOINT_MAGIC};
pub use model::{res_plus_forward, self_attention_forward, Denoiser, ForwardMode, ForwardOutput, ParamStore};
pub use time::{time_embedding, time_shift_matrix};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Smallest number of channels a normalization group may hold.
const MIN_CHANNELS_PER_GROUP: usize = 4;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSpec {
    /// Spatial side of the maps the network runs on.
    pub resolution: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Residual (+ attention) blocks per resolution level.
    pub blocks_per_stage: usize,
    pub time_embed_dim: usize,
    /// Channels of one map; the network input holds twice as many.
    pub input_channels: usize,
    pub dropout_rate: f64,
    /// Attention runs at levels whose spatial side is at most this (0 disables),
    /// unless `attention_levels` lists the levels explicitly.
    pub attention_max_side: usize,
    pub attention_levels: Option<Vec<usize>>,
    pub groups_for_norm: usize,
    pub max_channels: usize,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            resolution: 128,
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4, 8, 16],
            blocks_per_stage: 2,
            time_embed_dim: 64,
            input_channels: 1,
            dropout_rate: 0.1,
            attention_max_side: 32,
            attention_levels: None,
            groups_for_norm: 32,
            max_channels: 4096,
        }
    }
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(domain("channel_multipliers must be nonempty and positive"));
        }
        if self.base_channels == 0 || self.blocks_per_stage == 0 || self.input_channels == 0 {
            return Err(domain("base_channels, blocks_per_stage and input_channels must be positive"));
        }
        let widest = self.base_channels * self.channel_multipliers.iter().max().expect("nonempty");
        if widest > self.max_channels {
            return Err(domain(format!("widest level has {widest} channels, above the cap of {}", self.max_channels)));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(domain("time_embed_dim must be even and positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(domain("dropout_rate must lie in [0, 1)"));
        }
        if self.groups_for_norm == 0 {
            return Err(domain("groups_for_norm must be positive"));
        }
        let div = 1 << (self.levels() - 1);
        if self.resolution == 0 || self.resolution % div != 0 {
            return Err(domain(format!(
                "resolution {} is not divisible by 2^(levels-1) = {div}",
                self.resolution
            )));
        }
        if let Some(levels) = &self.attention_levels {
            if let Some(l) = levels.iter().find(|&&l| l >= self.levels()) {
                return Err(domain(format!("attention level {l} does not exist")));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn level_side(&self, level: usize) -> usize {
        self.resolution >> level
    }

    pub fn has_attention(&self, level: usize) -> bool {
        match &self.attention_levels {
            Some(levels) => levels.contains(&level),
            None => self.attention_max_side > 0 && self.level_side(level) <= self.attention_max_side,
        }
    }

    /// Stage ids of the default distillation taps: the end of the down path,
    /// the middle, and the up path.
    pub fn default_taps(&self) -> Vec<usize> {
        let l = self.levels();
        vec![l, l + 1, 2 * l + 1]
    }
}

/// Number of normalization groups for `channels`: the largest divisor not
/// exceeding `max_groups` that leaves at least four channels per group.
pub fn norm_groups(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels))
        .rev()
        .find(|&d| channels % d == 0 && channels / d >= MIN_CHANNELS_PER_GROUP)
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Head,
    ResPlus,
    Attention,
    Downsample,
    Upsample,
    Tail,
}

/// One block of the network with its channel widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub id: usize,
    pub stage: usize,
    pub kind: BlockKind,
    pub in_ch: usize,
    pub out_ch: usize,
    /// Spatial side of the block's input.
    pub side: usize,
}

impl BlockSpec {
    /// Shape-preserving blocks that may be removed outright.
    pub fn prunable(&self) -> bool {
        match self.kind {
            BlockKind::ResPlus => self.in_ch == self.out_ch,
            BlockKind::Attention => true,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Step {
    Block(usize),
    PushSkip,
    ConcatSkip,
    StageEnd(usize),
}

/// Block list plus the execution program of a spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub blocks: Vec<BlockSpec>,
    pub(crate) steps: Vec<Step>,
    pub num_stages: usize,
}

impl Layout {
    /// Stages: 0 is the input convolution, `1..=L` the down path, `L+1` the
    /// middle, `L+2..=2L+1` the up path, and `2L+2` the output head.
    pub fn new(spec: &DenoiserSpec) -> Result<Self> {
        spec.validate()?;
        let l = spec.levels();
        let mut b = Builder::default();
        let c1 = spec.level_channels(0);
        b.block(0, BlockKind::Head, 2 * spec.input_channels, c1, spec.resolution);
        b.steps.push(Step::StageEnd(0));

        let mut ch = c1;
        for level in 0..l {
            let (c, side, stage) = (spec.level_channels(level), spec.level_side(level), 1 + level);
            for _ in 0..spec.blocks_per_stage {
                b.block(stage, BlockKind::ResPlus, ch, c, side);
                ch = c;
                if spec.has_attention(level) {
                    b.block(stage, BlockKind::Attention, c, c, side);
                }
            }
            b.steps.push(Step::PushSkip);
            b.steps.push(Step::StageEnd(stage));
            if level + 1 < l {
                b.block(stage, BlockKind::Downsample, c, c, side);
            }
        }

        let (mid, deep_side) = (l + 1, spec.level_side(l - 1));
        b.block(mid, BlockKind::ResPlus, ch, ch, deep_side);
        if spec.has_attention(l - 1) {
            b.block(mid, BlockKind::Attention, ch, ch, deep_side);
        }
        b.block(mid, BlockKind::ResPlus, ch, ch, deep_side);
        b.steps.push(Step::StageEnd(mid));

        for level in (0..l).rev() {
            let (c, side, stage) = (spec.level_channels(level), spec.level_side(level), l + 2 + (l - 1 - level));
            if level + 1 < l {
                b.block(stage, BlockKind::Upsample, ch, ch, side / 2);
            }
            b.steps.push(Step::ConcatSkip);
            ch += c;
            for _ in 0..spec.blocks_per_stage {
                b.block(stage, BlockKind::ResPlus, ch, c, side);
                ch = c;
                if spec.has_attention(level) {
                    b.block(stage, BlockKind::Attention, c, c, side);
                }
            }
            b.steps.push(Step::StageEnd(stage));
        }
        b.block(2 * l + 2, BlockKind::Tail, ch, spec.input_channels, spec.resolution);
        Ok(Self { blocks: b.blocks, steps: b.steps, num_stages: 2 * l + 3 })
    }

    pub fn block(&self, id: usize) -> Option<&BlockSpec> {
        self.blocks.get(id)
    }
}

#[derive(Default)]
struct Builder {
    blocks: Vec<BlockSpec>,
    steps: Vec<Step>,
}

impl Builder {
    fn block(&mut self, stage: usize, kind: BlockKind, in_ch: usize, out_ch: usize, side: usize) {
        let id = self.blocks.len();
        self.blocks.push(BlockSpec { id, stage, kind, in_ch, out_ch, side });
        self.steps.push(Step::Block(id));
    }
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform variance scaling over the average fan.
    Fan { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Named parameter shapes of a block, in storage order.
pub(crate) fn block_params(b: &BlockSpec, time_dim: usize) -> Vec<(&'static str, Vec<usize>, Init)> {
    let conv = |cin: usize, cout: usize, k: usize| Init::Fan { fan_in: cin * k * k, fan_out: cout * k * k };
    let (ci, co) = (b.in_ch, b.out_ch);
    match b.kind {
        BlockKind::Head => vec![("conv.w", vec![co, ci, 3, 3], conv(ci, co, 3)), ("conv.b", vec![co], Init::Zeros)],
        BlockKind::ResPlus => {
            let mut v = vec![
                ("norm1.g", vec![ci], Init::Ones),
                ("norm1.b", vec![ci], Init::Zeros),
                ("conv1.w", vec![co, ci, 3, 3], conv(ci, co, 3)),
                ("conv1.b", vec![co], Init::Zeros),
                ("time1.w", vec![co, time_dim], Init::Fan { fan_in: time_dim, fan_out: co }),
                ("time1.b", vec![co], Init::Zeros),
                ("time2.w", vec![co, co], Init::Fan { fan_in: co, fan_out: co }),
                ("time2.b", vec![co], Init::Zeros),
                ("norm2.g", vec![co], Init::Ones),
                ("norm2.b", vec![co], Init::Zeros),
                ("conv2.w", vec![co, co, 3, 3], conv(co, co, 3)),
                ("conv2.b", vec![co], Init::Zeros),
            ];
            if ci != co {
                v.push(("skip.w", vec![co, ci, 1, 1], conv(ci, co, 1)));
                v.push(("skip.b", vec![co], Init::Zeros));
            }
            v
        }
        BlockKind::Attention => {
            let fan = Init::Fan { fan_in: ci, fan_out: ci };
            vec![
                ("norm.g", vec![ci], Init::Ones),
                ("norm.b", vec![ci], Init::Zeros),
                ("query.w", vec![ci, ci], fan),
                ("key.w", vec![ci, ci], fan),
                ("value.w", vec![ci, ci], fan),
            ]
        }
        BlockKind::Downsample | BlockKind::Upsample => {
            vec![("conv.w", vec![co, ci, 3, 3], conv(ci, co, 3)), ("conv.b", vec![co], Init::Zeros)]
        }
        BlockKind::Tail => vec![
            ("norm.g", vec![ci], Init::Ones),
            ("norm.b", vec![ci], Init::Zeros),
            ("conv.w", vec![co, ci, 3, 3], Init::Zeros),
            ("conv.b", vec![co], Init::Zeros),
        ],
    }
}

pub(crate) fn param_name(block: usize, suffix: &str) -> String {
    format!("{block:03}.{suffix}")
}

/// Parameter count of a `kernel × kernel` convolution.
pub fn conv_params(in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> usize {
    in_ch * out_ch * kernel * kernel + if bias { out_ch } else { 0 }
}

/// Parameter count of one block.
pub fn block_param_count(b: &BlockSpec, time_dim: usize) -> usize {
    block_params(b, time_dim).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

/// Floating-point operations of one block for a single sample, counting a
/// multiply-accumulate as two; normalization and activations are ignored.
pub fn block_flops(b: &BlockSpec, time_dim: usize) -> u64 {
    let (ci, co, s) = (b.in_ch as u64, b.out_ch as u64, b.side as u64);
    let px = s * s;
    let conv = |cin: u64, cout: u64, k: u64, out_px: u64| 2 * cin * cout * k * k * out_px;
    match b.kind {
        BlockKind::Head | BlockKind::Tail => conv(ci, co, 3, px),
        BlockKind::ResPlus => {
            let skip = if ci != co { conv(ci, co, 1, px) } else { 0 };
            conv(ci, co, 3, px) + conv(co, co, 3, px) + 2 * (time_dim as u64 * co + co * co) + skip
        }
        BlockKind::Attention => 2 * px * ci * 3 * ci + 2 * px * px * ci * 2,
        BlockKind::Downsample => conv(ci, co, 3, px / 4),
        BlockKind::Upsample => conv(ci, co, 3, px * 4),
    }
}

/// One catalog row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub id: usize,
    pub stage: usize,
    pub kind: BlockKind,
    pub params: usize,
    pub flops: u64,
    pub prunable: bool,
}

/// Every block of a (possibly pruned) model with its cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCatalog {
    pub layers: Vec<LayerRecord>,
}

impl LayerCatalog {
    pub fn new(spec: &DenoiserSpec, removed: &BTreeSet<usize>) -> Result<Self> {
        let layout = Layout::new(spec)?;
        let layers = layout
            .blocks
            .iter()
            .filter(|b| !removed.contains(&b.id))
            .map(|b| LayerRecord {
                id: b.id,
                stage: b.stage,
                kind: b.kind,
                params: block_param_count(b, spec.time_embed_dim),
                flops: block_flops(b, spec.time_embed_dim),
                prunable: b.prunable(),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn get(&self, id: usize) -> Option<&LayerRecord> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Order-sensitive digest of the catalog used to detect stale pruning plans.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update(format!("{}:{}:{:?}:{};", l.id, l.stage, l.kind, l.params).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Parameter and FLOP totals of the unpruned network for a given input side.
pub fn count_params_flops(spec: &DenoiserSpec, input_resolution: usize) -> Result<(usize, u64)> {
    let spec = DenoiserSpec { resolution: input_resolution, ..spec.clone() };
    let cat = LayerCatalog::new(&spec, &BTreeSet::new())?;
    Ok((cat.total_params(), cat.total_flops()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserSpec {
        DenoiserSpec {
            resolution: 8,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            blocks_per_stage: 1,
            time_embed_dim: 8,
            dropout_rate: 0.0,
            attention_max_side: 4,
            ..DenoiserSpec::default()
        }
    }

    #[test]
    fn group_rule() {
        assert_eq!(norm_groups(64, 32), 16);
        assert_eq!(norm_groups(128, 32), 32);
        assert_eq!(norm_groups(1024, 32), 32);
        assert_eq!(norm_groups(16, 32), 4);
        assert_eq!(norm_groups(4, 32), 1);
        assert_eq!(norm_groups(2, 32), 1);
        assert_eq!(norm_groups(48, 32), 12);
    }

    #[test]
    fn layout_stages_and_widths() {
        let layout = Layout::new(&tiny()).unwrap();
        let kinds: Vec<_> = layout.blocks.iter().map(|b| (b.stage, b.kind, b.in_ch, b.out_ch)).collect();
        use BlockKind::*;
        assert_eq!(
            kinds,
            vec![
                (0, Head, 2, 4),
                (1, ResPlus, 4, 4),
                (1, Downsample, 4, 4),
                (2, ResPlus, 4, 8),
                (2, Attention, 8, 8),
                (3, ResPlus, 8, 8),
                (3, Attention, 8, 8),
                (3, ResPlus, 8, 8),
                (4, ResPlus, 16, 8),
                (4, Attention, 8, 8),
                (5, Upsample, 8, 8),
                (5, ResPlus, 12, 4),
                (6, Tail, 4, 1),
            ]
        );
        assert_eq!(layout.num_stages, 7);
        assert_eq!(tiny().default_taps(), vec![2, 3, 5]);
    }

    #[test]
    fn single_conv_counts() {
        assert_eq!(conv_params(1, 1, 1, true), 2);
        let b = BlockSpec { id: 0, stage: 0, kind: BlockKind::Head, in_ch: 1, out_ch: 1, side: 1 };
        assert_eq!(block_param_count(&b, 2), conv_params(1, 1, 3, true));
    }

    #[test]
    fn catalog_sums_match_counts() {
        let spec = tiny();
        let cat = LayerCatalog::new(&spec, &BTreeSet::new()).unwrap();
        let (p, f) = count_params_flops(&spec, 8).unwrap();
        assert_eq!(cat.total_params(), p);
        assert_eq!(cat.total_flops(), f);
    }

    #[test]
    fn width_doubling_scales_quadratically() {
        let spec = DenoiserSpec { resolution: 32, base_channels: 32, time_embed_dim: 32, ..tiny() };
        let (p1, _) = count_params_flops(&spec, 32).unwrap();
        let (p2, _) = count_params_flops(&DenoiserSpec { base_channels: 64, ..spec.clone() }, 32).unwrap();
        let ratio = p2 as f64 / p1 as f64;
        assert!((3.6..=4.4).contains(&ratio), "{ratio}");
    }

    #[test]
    fn block_count_sweep_is_monotone() {
        let mut last = (0, 0);
        for n in 1..=4 {
            let spec = DenoiserSpec { blocks_per_stage: n, ..DenoiserSpec::default() };
            let c = count_params_flops(&spec, 128).unwrap();
            assert!(c.0 > last.0 && c.1 > last.1);
            last = c;
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(DenoiserSpec { resolution: 7, ..tiny() }.validate().is_err());
        assert!(DenoiserSpec { time_embed_dim: 7, ..tiny() }.validate().is_err());
        assert!(DenoiserSpec { channel_multipliers: vec![], ..tiny() }.validate().is_err());
        assert!(DenoiserSpec { max_channels: 4, ..tiny() }.validate().is_err());
        assert!(DenoiserSpec { attention_levels: Some(vec![2]), ..tiny() }.validate().is_err());
    }
}
