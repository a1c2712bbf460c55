use std::collections::{BTreeSet, HashMap};

use cftwin_autograd::{Graph, Scalar, Tensor, Var};
use rand::{Rng, RngCore};

use super::{block_params, norm_groups, param_name, time_embedding, BlockKind, BlockSpec, DenoiserSpec, Init, LayerCatalog, Layout, Step, NORM_EPS};
use crate::error::{domain, Result};

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn push(&mut self, name: String, tensor: Tensor<T>) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(domain(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.entries.iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// True when both stores hold the same names and shapes in the same order.
    pub fn same_structure(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

/// Dropout behaviour of a forward pass.
pub enum ForwardMode<'a> {
    /// Deterministic; dropout disabled.
    Eval,
    /// Dropout masks drawn from the given generator.
    Train(&'a mut dyn RngCore),
}

/// Result of a graph forward pass.
pub struct ForwardOutput {
    pub eps: Var,
    /// Activations at each stage boundary, keyed by stage id.
    pub taps: Vec<(usize, Var)>,
}

impl ForwardOutput {
    pub fn tap(&self, stage: usize) -> Option<Var> {
        self.taps.iter().find(|(s, _)| *s == stage).map(|&(_, v)| v)
    }
}

/// Noise-prediction network, possibly with some blocks removed.
#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    spec: DenoiserSpec,
    layout: Layout,
    removed: BTreeSet<usize>,
    params: ParamStore<T>,
    /// Store positions of each block's parameters, in declaration order.
    slots: Vec<Vec<usize>>,
}

impl<T: Scalar> Denoiser<T> {
    /// Builds and initializes the full network.
    pub fn new(spec: &DenoiserSpec, rng: &mut impl Rng) -> Result<Self> {
        let layout = Layout::new(spec)?;
        let mut params = ParamStore::default();
        for b in &layout.blocks {
            for (suffix, shape, init) in block_params(b, spec.time_embed_dim) {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Fan { fan_in, fan_out } => {
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| T::of(rng.random_range(-limit..=limit))).collect()
                    }
                };
                params.push(param_name(b.id, suffix), Tensor::new(&shape, data))?;
            }
        }
        Self::from_parts(spec.clone(), BTreeSet::new(), params)
    }

    /// Reassembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(spec: DenoiserSpec, removed: BTreeSet<usize>, params: ParamStore<T>) -> Result<Self> {
        let layout = Layout::new(&spec)?;
        for &id in &removed {
            match layout.block(id) {
                Some(b) if b.prunable() => {}
                _ => return Err(domain(format!("block {id} cannot be removed"))),
            }
        }
        let mut slots = vec![Vec::new(); layout.blocks.len()];
        let mut expected = 0;
        for b in layout.blocks.iter().filter(|b| !removed.contains(&b.id)) {
            for (suffix, shape, _) in block_params(b, spec.time_embed_dim) {
                let name = param_name(b.id, suffix);
                let pos = params.position(&name).ok_or_else(|| domain(format!("missing parameter {name}")))?;
                let t = &params.entries[pos].1;
                if t.shape() != shape.as_slice() {
                    return Err(domain(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())));
                }
                slots[b.id].push(pos);
                expected += 1;
            }
        }
        if expected != params.len() {
            return Err(domain(format!("{} parameters supplied, {expected} expected", params.len())));
        }
        Ok(Self { spec, layout, removed, params, slots })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn removed(&self) -> &BTreeSet<usize> {
        &self.removed
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Mutable access for in-place updates; names and shapes must not change.
    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Changes the dropout probability used by training-mode passes.
    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(domain("dropout_rate must lie in [0, 1)"));
        }
        self.spec.dropout_rate = rate;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn catalog(&self) -> LayerCatalog {
        LayerCatalog::new(&self.spec, &self.removed).expect("spec validated at construction")
    }

    /// Parameters of block `id` in declaration order (empty when removed).
    pub fn block_params(&self, id: usize) -> Vec<(&str, &Tensor<T>)> {
        self.slots[id].iter().map(|&p| (self.params.entries[p].0.as_str(), &self.params.entries[p].1)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            removed: self.removed.clone(),
            params: self.params.cast(),
            slots: self.slots.clone(),
        }
    }

    /// Copy with additional blocks removed; remaining weights are copied exactly.
    pub fn without_blocks(&self, ids: &BTreeSet<usize>) -> Result<Self> {
        let removed: BTreeSet<usize> = self.removed.union(ids).copied().collect();
        let drop: BTreeSet<String> = ids
            .iter()
            .filter_map(|id| self.layout.block(*id))
            .flat_map(|b| block_params(b, self.spec.time_embed_dim).into_iter().map(|(s, _, _)| param_name(b.id, s)))
            .collect();
        let mut params = ParamStore::default();
        for (name, t) in self.params.iter() {
            if !drop.contains(name) {
                params.push(name.to_string(), t.clone())?;
            }
        }
        Self::from_parts(self.spec.clone(), removed, params)
    }

    /// Registers the parameters on a graph, in store order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    fn check_skip(&self, skip: &BTreeSet<usize>) -> Result<()> {
        for &id in skip {
            match self.layout.block(id) {
                Some(b) if b.prunable() => {}
                _ => return Err(domain(format!("block {id} is not prunable"))),
            }
        }
        Ok(())
    }

    /// Records a forward pass on `g`.
    ///
    /// `cond` and `noisy` are `[N, c_in, R, R]`; `steps` holds one diffusion
    /// step per sample. Blocks in `skip` are bypassed as if removed.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        cond: Var,
        noisy: Var,
        steps: &[usize],
        mode: ForwardMode<'_>,
        skip: &BTreeSet<usize>,
    ) -> Result<ForwardOutput> {
        self.check_skip(skip)?;
        if vars.len() != self.params.len() {
            return Err(domain("parameter bindings do not match the model"));
        }
        let shape = g.shape(noisy).to_vec();
        let r = self.spec.resolution;
        let expect = [shape.first().copied().unwrap_or(0), self.spec.input_channels, r, r];
        if shape != expect || g.shape(cond) != expect.as_slice() {
            return Err(domain(format!(
                "inputs must be [N, {}, {r}, {r}]; got {:?} and {:?}",
                self.spec.input_channels,
                g.shape(cond),
                shape
            )));
        }
        if steps.len() != expect[0] {
            return Err(domain("one diffusion step per sample is required"));
        }
        let dim = self.spec.time_embed_dim;
        let mut temb = Vec::with_capacity(steps.len() * dim);
        for &t in steps {
            temb.extend(time_embedding(t as f64, dim)?.into_iter().map(T::of));
        }
        let temb = g.input(Tensor::new(&[steps.len(), dim], temb));

        let mut mode = mode;
        let mut h = g.concat(cond, noisy);
        let mut skips = Vec::new();
        let mut taps = Vec::new();
        for step in &self.layout.steps {
            match *step {
                Step::Block(id) => {
                    if self.removed.contains(&id) || skip.contains(&id) {
                        continue;
                    }
                    let b = self.layout.blocks[id];
                    let p: Vec<Var> = self.slots[id].iter().map(|&i| vars[i]).collect();
                    h = self.block_forward(g, &b, &p, h, temb, &mut mode);
                }
                Step::PushSkip => skips.push(h),
                Step::ConcatSkip => {
                    let s = skips.pop().expect("layout pairs every concat with a skip");
                    h = g.concat(h, s);
                }
                Step::StageEnd(s) => taps.push((s, h)),
            }
        }
        Ok(ForwardOutput { eps: h, taps })
    }

    fn block_forward(
        &self,
        g: &mut Graph<T>,
        b: &BlockSpec,
        p: &[Var],
        x: Var,
        temb: Var,
        mode: &mut ForwardMode<'_>,
    ) -> Var {
        let groups = self.spec.groups_for_norm;
        match b.kind {
            BlockKind::Head => g.conv2d(x, p[0], Some(p[1]), 1, 1),
            BlockKind::Downsample => g.conv2d(x, p[0], Some(p[1]), 2, 1),
            BlockKind::Upsample => {
                let u = g.upsample2x(x);
                g.conv2d(u, p[0], Some(p[1]), 1, 1)
            }
            BlockKind::Tail => {
                let z = norm(g, x, p[0], p[1], groups);
                let z = g.silu(z);
                g.conv2d(z, p[2], Some(p[3]), 1, 1)
            }
            BlockKind::Attention => attention_block(g, x, p, groups),
            BlockKind::ResPlus => {
                let rate = self.spec.dropout_rate;
                res_plus(g, x, temb, p, groups, &mut |g, z| dropout(g, z, rate, mode))
            }
        }
    }

    /// Evaluation-mode prediction for a batch, bypassing the blocks in `skip`.
    pub fn predict_skipping(
        &self,
        cond: &Tensor<T>,
        noisy: &Tensor<T>,
        steps: &[usize],
        skip: &BTreeSet<usize>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (c, x) = (g.input(cond.clone()), g.input(noisy.clone()));
        let out = self.forward_graph(&mut g, &vars, c, x, steps, ForwardMode::Eval, skip)?;
        Ok(g.value(out.eps).clone())
    }

    /// Evaluation-mode noise prediction for a batch.
    pub fn predict(&self, cond: &Tensor<T>, noisy: &Tensor<T>, steps: &[usize]) -> Result<Tensor<T>> {
        self.predict_skipping(cond, noisy, steps, &BTreeSet::new())
    }
}

fn norm<T: Scalar>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, max_groups: usize) -> Var {
    let groups = norm_groups(g.shape(x)[1], max_groups);
    g.group_norm(x, gamma, beta, groups, NORM_EPS)
}

fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, rate: f64, mode: &mut ForwardMode<'_>) -> Var {
    match mode {
        ForwardMode::Train(rng) if rate > 0.0 => {
            let keep = T::of(1.0 / (1.0 - rate));
            let mask = (0..g.value(x).numel())
                .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                .collect();
            g.mask(x, mask)
        }
        _ => x,
    }
}

type DropFn<'a, T> = dyn FnMut(&mut Graph<T>, Var) -> Var + 'a;

/// Residual block with time conditioning; `p` follows the block's parameter order.
fn res_plus<T: Scalar>(g: &mut Graph<T>, x: Var, temb: Var, p: &[Var], groups: usize, drop: &mut DropFn<'_, T>) -> Var {
    let z = norm(g, x, p[0], p[1], groups);
    let z = g.silu(z);
    let z = drop(g, z);
    let z = g.conv2d(z, p[2], Some(p[3]), 1, 1);
    let m = g.linear(temb, p[4], Some(p[5]));
    let m = g.silu(m);
    let m = g.linear(m, p[6], Some(p[7]));
    let z = g.add_channel_bias(z, m);
    let z = norm(g, z, p[8], p[9], groups);
    let z = g.silu(z);
    let z = drop(g, z);
    let z = g.conv2d(z, p[10], Some(p[11]), 1, 1);
    let shortcut = if p.len() > 12 { g.conv2d(x, p[12], Some(p[13]), 1, 0) } else { x };
    g.add(z, shortcut)
}

fn attention_block<T: Scalar>(g: &mut Graph<T>, x: Var, p: &[Var], groups: usize) -> Var {
    let z = norm(g, x, p[0], p[1], groups);
    let a = g.attention(z, p[2], p[3], p[4]);
    g.add(x, a)
}

/// Evaluation-mode residual block on a single `[C_in, H, W]` map with a time
/// vector of length `c_time`. `params` are ordered as
/// `norm1.{g,b}, conv1.{w,b}, time1.{w,b}, time2.{w,b}, norm2.{g,b}, conv2.{w,b}`
/// followed by `skip.{w,b}` when the widths differ.
pub fn res_plus_forward<T: Scalar>(
    x: &Tensor<T>,
    temb: &Tensor<T>,
    params: &[Tensor<T>],
    max_groups: usize,
) -> Result<Tensor<T>> {
    let [c_in, h, w] = x.shape() else {
        return Err(domain("res_plus_forward expects a [C, H, W] map"));
    };
    let (c_in, h, w) = (*c_in, *h, *w);
    let out_ch = params.get(2).map(|t| t.shape()[0]).ok_or_else(|| domain("missing convolution weights"))?;
    let block = BlockSpec { id: 0, stage: 0, kind: BlockKind::ResPlus, in_ch: c_in, out_ch, side: h };
    let expected = block_params(&block, temb.numel());
    if expected.len() != params.len() {
        return Err(domain(format!("{} parameters given, {} expected", params.len(), expected.len())));
    }
    for ((suffix, shape, _), t) in expected.iter().zip(params) {
        if t.shape() != shape.as_slice() {
            return Err(domain(format!("{suffix} has shape {:?}, expected {shape:?}", t.shape())));
        }
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone().reshape(&[1, c_in, h, w]));
    let tv = g.input(temb.clone().reshape(&[1, temb.numel()]));
    let p: Vec<Var> = params.iter().map(|t| g.input(t.clone())).collect();
    let y = res_plus(&mut g, xv, tv, &p, max_groups, &mut |_, z| z);
    Ok(g.value(y).clone().reshape(&[out_ch, h, w]))
}

/// Dot-product self-attention over the rows of `z` (`[tokens, features]`).
/// Returns the output rows and the row-stochastic attention matrix.
pub fn self_attention_forward<T: Scalar>(
    z: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [m, d] = z.shape() else {
        return Err(domain("self_attention_forward expects a [tokens, features] matrix"));
    };
    let (m, d) = (*m, *d);
    if wq.shape().len() != 2 || wq.shape()[0] != d || wq.shape() != wk.shape() || wv.shape() != [d, d] {
        return Err(domain(format!(
            "projection shapes {:?}, {:?}, {:?} do not fit {d} features",
            wq.shape(),
            wk.shape(),
            wv.shape()
        )));
    }
    // Tokens become spatial positions of a channel-major map.
    let mut planar = vec![T::zero(); m * d];
    for (t, row) in z.data().chunks(d).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            planar[c * m + t] = v;
        }
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[1, d, m, 1], planar));
    let (q, k, v) = (g.input(wq.clone()), g.input(wk.clone()), g.input(wv.clone()));
    let y = g.attention(x, q, k, v);
    let out = g.value(y).data();
    let mut rows = vec![T::zero(); m * d];
    for t in 0..m {
        for c in 0..d {
            rows[t * d + c] = out[c * m + t];
        }
    }
    let probs = g.attention_probs(y).expect("attention node").to_vec();
    Ok((Tensor::new(&[m, d], rows), Tensor::new(&[m, m], probs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserSpec {
        DenoiserSpec {
            resolution: 8,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            blocks_per_stage: 1,
            time_embed_dim: 8,
            dropout_rate: 0.1,
            attention_max_side: 4,
            ..DenoiserSpec::default()
        }
    }

    fn inputs(n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || Tensor::new(&[n, 1, 8, 8], (0..n * 64).map(|_| rng.random_range(-1.0..1.0)).collect());
        (t(), t())
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = Denoiser::<f64>::new(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (c, x) = inputs(3, 2);
        let a = m.predict(&c, &x, &[1, 5, 9]).unwrap();
        let b = m.predict(&c, &x, &[1, 5, 9]).unwrap();
        assert_eq!(a.shape(), &[3, 1, 8, 8]);
        assert_eq!(a, b);
        assert!(m.predict(&c, &x, &[1]).is_err());
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let m = Denoiser::<f64>::new(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (c, x) = inputs(2, 3);
        assert!(m.predict(&c, &x, &[4, 7]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_matches_catalog() {
        let m = Denoiser::<f32>::new(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.num_params(), m.catalog().total_params());
        let ids: BTreeSet<usize> = m.catalog().layers.iter().filter(|l| l.prunable).map(|l| l.id).take(2).collect();
        let s = m.without_blocks(&ids).unwrap();
        assert_eq!(s.num_params(), s.catalog().total_params());
        let removed: usize = ids.iter().map(|&i| m.catalog().get(i).unwrap().params).sum();
        assert_eq!(s.num_params(), m.num_params() - removed);
        assert!(m.without_blocks(&BTreeSet::from([0])).is_err());
    }

    #[test]
    fn from_parts_rejects_mismatches() {
        let m = Denoiser::<f32>::new(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut p = m.params().clone();
        p.push("999.extra".into(), Tensor::zeros(&[1])).unwrap();
        assert!(Denoiser::from_parts(tiny(), BTreeSet::new(), p).is_err());
        let spec = DenoiserSpec { base_channels: 8, ..tiny() };
        assert!(Denoiser::from_parts(spec, BTreeSet::new(), m.params().clone()).is_err());
    }

    #[test]
    fn training_mode_dropout_changes_outputs() {
        let spec = tiny();
        let mut m = Denoiser::<f64>::new(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for t in m.params_mut().tensors_mut() {
            for v in t.data_mut() {
                if *v == 0.0 {
                    *v = 0.05;
                }
            }
        }
        let (c, x) = inputs(1, 4);
        let run = |mode: ForwardMode<'_>| {
            let mut g = Graph::new();
            let vars = m.bind(&mut g, false);
            let (cv, xv) = (g.input(c.clone()), g.input(x.clone()));
            let out = m.forward_graph(&mut g, &vars, cv, xv, &[3], mode, &BTreeSet::new()).unwrap();
            g.value(out.eps).clone()
        };
        let eval = run(ForwardMode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let train = run(ForwardMode::Train(&mut rng));
        assert_ne!(eval, train);
        assert_eq!(eval, run(ForwardMode::Eval));
    }
}
