use crate::kernels::{self, AttnGeom, ConvGeom, GroupStats};
use crate::scalar::gemm;
use crate::{Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    /// Multiplies by a fixed mask (already scaled by the keep probability).
    Mask(Var, Vec<T>),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupStats },
    AddChannelBias { x: Var, bias: Var },
    Concat(Var, Var),
    Upsample2x(Var),
    Attention { x: Var, wq: Var, wk: Var, wv: Var, geom: AttnGeom, probs: Vec<T> },
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run computation tape.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for back-propagation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the loss.
    pub fn take_or_zeros(&mut self, v: Var, like: &[usize]) -> Tensor<T> {
        self.grads.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected an NCHW tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; gradients are tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.value(a).map(|v| v * f);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Swish activation `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| T::of(v.f64() * kernels::sigmoid(v.f64())));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.numel(), mask.len(), "mask length mismatch");
        let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(va.shape(), data);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mask(a, mask), rg)
    }

    /// 2-D convolution of `x [N,C,H,W]` with `w [O,C,k,k]` and optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = dims4(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,k,k]");
        assert_eq!(ws[1], c, "conv2d: weight expects {} input channels, got {c}", ws[1]);
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        let geom = ConvGeom { batch: n, in_ch: c, height: h, width: wd, out_ch: ws[0], kernel: ws[2], stride, pad };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new(&[n, ws[0], geom.out_height(), geom.out_width()], y);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(out, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Fully connected layer: `x [N,D]`, `w [O,D]`, `b [O]` gives `[N,O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [N,D]");
        assert_eq!(ws[1], xs[1], "linear: weight expects {} features, got {}", ws[1], xs[1]);
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * o];
        gemm(false, true, n, d, o, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), &mut y);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(&[n, o], y), Op::Linear { x, w, b }, rg)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        assert!(groups > 0 && c % groups == 0, "group_norm: {groups} groups do not divide {c} channels");
        let (y, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            h * w,
            groups,
            eps,
        );
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Tensor::new(&[n, c, h, w], y), Op::GroupNorm { x, gamma, beta, groups, stats }, rg)
    }

    /// Broadcasts a per-sample, per-channel vector `[N,C]` over the spatial plane.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        assert_eq!(self.shape(bias), &[n, c], "add_channel_bias: bias must be [N,C]");
        let plane = h * w;
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .zip(bv)
            .flat_map(|(chunk, &b)| chunk.iter().map(move |&v| v + b))
            .collect();
        let rg = self.rg(&[x, bias]);
        self.push(Tensor::new(&[n, c, h, w], data), Op::AddChannelBias { x, bias }, rg)
    }

    /// Channel-wise concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = dims4(self.shape(a));
        let (nb, cb, hb, wb) = dims4(self.shape(b));
        assert_eq!((n, h, w), (nb, hb, wb), "concat: batch/spatial mismatch");
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (pa + pb));
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&self.value(b).data()[i * pb..(i + 1) * pb]);
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[n, ca + cb, h, w], data), Op::Concat(a, b), rg)
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let (n, c, h, w) = dims4(self.shape(a));
        let src = self.value(a).data();
        let mut data = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data[(p * 2 * h + y) * 2 * w + x] = src[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[n, c, 2 * h, 2 * w], data), Op::Upsample2x(a), rg)
    }

    /// Self-attention across the spatial positions of `x [N,C,H,W]`.
    ///
    /// `wq`, `wk` are `[C, d_k]`, `wv` is `[C, C]`.
    pub fn attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        let (qs, ks, vs) = (self.shape(wq).to_vec(), self.shape(wk).to_vec(), self.shape(wv).to_vec());
        assert_eq!(qs, ks, "attention: query and key projections must agree");
        assert_eq!(qs[0], c, "attention: projection expects {} channels, got {c}", qs[0]);
        assert_eq!(vs, vec![c, c], "attention: value projection must be [C,C]");
        let geom = AttnGeom { batch: n, dim: c, tokens: h * w, key_dim: qs[1] };
        let (y, probs) = kernels::attention_forward(
            self.value(x).data(),
            self.value(wq).data(),
            self.value(wk).data(),
            self.value(wv).data(),
            &geom,
        );
        let rg = self.rg(&[x, wq, wk, wv]);
        self.push(Tensor::new(&[n, c, h, w], y), Op::Attention { x, wq, wk, wv, geom, probs }, rg)
    }

    /// Attention probabilities recorded by an attention node (`tokens x tokens` per sample).
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean squared difference, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse: shape mismatch");
        let n = va.numel() as f64;
        let sum: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(T::of(sum / n)), Op::Mse(a, b), rg)
    }

    /// Reverse-mode sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Scale(a, f) => {
                let f = T::of(*f);
                acc(*a, g.map(|v| v * f));
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| {
                        let s = kernels::sigmoid(xv.f64());
                        T::of(gv.f64() * s * (1.0 + xv.f64() * (1.0 - s)))
                    })
                    .collect();
                acc(*a, Tensor::new(x.shape(), data));
            }
            Op::Mask(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                acc(*a, Tensor::new(g.shape(), data));
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    geom,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(self.shape(*x), dx));
                }
                if self.needs(*w) {
                    acc(*w, Tensor::new(self.shape(*w), dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        acc(*b, Tensor::new(self.shape(*b), db));
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    gemm(false, false, n, o, d, T::one(), g.data(), self.value(*w).data(), T::zero(), &mut dx);
                    acc(*x, Tensor::new(&[n, d], dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * d];
                    gemm(true, false, o, n, d, T::one(), g.data(), self.value(*x).data(), T::zero(), &mut dw);
                    acc(*w, Tensor::new(&[o, d], dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in g.data().chunks(o) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(*b, Tensor::new(&[o], db));
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (n, c, h, w) = dims4(self.shape(*x));
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    g.data(),
                    stats,
                    n,
                    c,
                    h * w,
                    *groups,
                );
                if self.needs(*x) {
                    acc(*x, Tensor::new(&[n, c, h, w], dx));
                }
                if self.needs(*gamma) {
                    acc(*gamma, Tensor::new(&[c], dgamma));
                }
                if self.needs(*beta) {
                    acc(*beta, Tensor::new(&[c], dbeta));
                }
            }
            Op::AddChannelBias { x, bias } => {
                if self.needs(*x) {
                    acc(*x, g.clone());
                }
                if self.needs(*bias) {
                    let (n, c, h, w) = dims4(g.shape());
                    let db = g.data().chunks(h * w).map(|ch| ch.iter().copied().sum()).collect();
                    acc(*bias, Tensor::new(&[n, c], db));
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = dims4(self.shape(*a));
                let cb = self.shape(*b)[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(n * pa);
                    for i in 0..n {
                        da.extend_from_slice(&g.data()[i * (pa + pb)..i * (pa + pb) + pa]);
                    }
                    acc(*a, Tensor::new(&[n, ca, h, w], da));
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(n * pb);
                    for i in 0..n {
                        db.extend_from_slice(&g.data()[i * (pa + pb) + pa..(i + 1) * (pa + pb)]);
                    }
                    acc(*b, Tensor::new(&[n, cb, h, w], db));
                }
            }
            Op::Upsample2x(a) => {
                let (n, c, h, w) = dims4(self.shape(*a));
                let mut da = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            da[(p * h + y / 2) * w + x / 2] += g.data()[(p * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                acc(*a, Tensor::new(&[n, c, h, w], da));
            }
            Op::Attention { x, wq, wk, wv, geom, probs } => {
                let (dx, dwq, dwk, dwv) = kernels::attention_backward(
                    self.value(*x).data(),
                    self.value(*wq).data(),
                    self.value(*wk).data(),
                    self.value(*wv).data(),
                    probs,
                    g.data(),
                    geom,
                );
                if self.needs(*x) {
                    acc(*x, Tensor::new(self.shape(*x), dx));
                }
                if self.needs(*wq) {
                    acc(*wq, Tensor::new(self.shape(*wq), dwq));
                }
                if self.needs(*wk) {
                    acc(*wk, Tensor::new(self.shape(*wk), dwk));
                }
                if self.needs(*wv) {
                    acc(*wv, Tensor::new(self.shape(*wv), dwv));
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.data()[0].f64() / va.numel() as f64;
                let diff: Vec<T> =
                    va.data().iter().zip(vb.data()).map(|(&x, &y)| T::of(k * (x.f64() - y.f64()))).collect();
                if self.needs(*b) {
                    acc(*b, Tensor::new(vb.shape(), diff.iter().map(|&v| -v).collect()));
                }
                if self.needs(*a) {
                    acc(*a, Tensor::new(va.shape(), diff));
                }
            }
        }
    }
}
