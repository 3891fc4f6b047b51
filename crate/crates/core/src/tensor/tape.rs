use super::conv::ConvGeometry;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// Probability floor used by the concept cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

enum Op<T> {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, k: Var, geom: ConvGeometry },
    ConvT { x: Var, k: Var, geom: ConvGeometry },
    ChannelBias { x: Var, b: Var },
    Act { x: Var, kind: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    Reparam { mu: Var, log_var: Var, noise: Vec<T> },
    Sum(Var),
    KlGaussian { mu: Var, log_var: Var },
    HalfSse { pred: Var, target: Vec<T> },
    WeightedBce { prob: Var, target: Vec<T>, pos_w: T, neg_w: T, denoms: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records every operation of one forward pass, in execution order, so a
/// single reverse sweep can push gradients back to the tracked leaves.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a leaf. Tracking follows the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records an untracked leaf from raw parts.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    /// Copies a recorded value out as an untracked tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are consistent")
    }

    /// Gradient of the last backward pass. Tracked values the loss never
    /// reached report an all-zero gradient.
    pub fn grad(&self, v: Var) -> Option<Vec<T>> {
        if !self.backward_done || !self.node(v).tracked {
            return None;
        }
        Some(
            self.grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![T::zero(); self.node(v).value.len()]),
        )
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- forward operations -------------------------------------------

    /// `x[B×I] · w[I×O] + b[O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim("dense", &xs, &ws));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[1]);
        let mut y = vec![T::zero(); batch * out];
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.iter().product::<usize>() != out {
                return Err(Error::dim("dense bias", &ws, bs));
            }
            let bv = self.value(b);
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(batch, inp, out, self.value(x), false, self.value(w), false, beta, &mut y);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let tracked = self.any_tracked(&inputs);
        Ok(self.push(vec![batch, out], y, Op::Dense { x, w, b }, tracked))
    }

    /// Cross-correlation of `x[B×C×H×W]` with `k[F×C×K×K]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || ks[2] != ks[3] {
            return Err(Error::dim("conv2d", &xs, &ks));
        }
        let geom = ConvGeometry::forward(xs[1], xs[2], xs[3], ks[2], stride, padding)?;
        let (batch, filters) = (xs[0], ks[0]);
        let (plen, nlen) = (geom.patch_len(), geom.narrow_len());
        let mut y = vec![T::zero(); batch * filters * nlen];
        let mut col = vec![T::zero(); plen * nlen];
        let (xv, kv) = (self.value(x), self.value(k));
        for bi in 0..batch {
            geom.im2col(&xv[bi * geom.wide_len()..(bi + 1) * geom.wide_len()], &mut col);
            let out = &mut y[bi * filters * nlen..(bi + 1) * filters * nlen];
            T::gemm(filters, plen, nlen, kv, false, &col, false, T::zero(), out);
        }
        let tracked = self.any_tracked(&[x, k]);
        Ok(self.push(
            vec![batch, filters, geom.out_h, geom.out_w],
            y,
            Op::Conv { x, k, geom },
            tracked,
        ))
    }

    /// Adjoint of [`conv2d`](Self::conv2d): `x[B×F×H×W]`, `k[F×C×K×K]` gives
    /// `B×C×H'×W'` with `H' = (H-1)·stride - 2·padding + K + output_padding`.
    pub fn transpose_conv2d(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] || ks[2] != ks[3] {
            return Err(Error::dim("transpose_conv2d", &xs, &ks));
        }
        let geom =
            ConvGeometry::transposed(ks[1], xs[2], xs[3], ks[2], stride, padding, output_padding)?;
        let (batch, filters) = (xs[0], ks[0]);
        let (plen, nlen) = (geom.patch_len(), geom.narrow_len());
        let mut y = vec![T::zero(); batch * geom.wide_len()];
        let mut col = vec![T::zero(); plen * nlen];
        let (xv, kv) = (self.value(x), self.value(k));
        for bi in 0..batch {
            let xb = &xv[bi * filters * nlen..(bi + 1) * filters * nlen];
            T::gemm(plen, filters, nlen, kv, true, xb, false, T::zero(), &mut col);
            geom.col2im(&col, &mut y[bi * geom.wide_len()..(bi + 1) * geom.wide_len()]);
        }
        let tracked = self.any_tracked(&[x, k]);
        Ok(self.push(
            vec![batch, geom.channels, geom.height, geom.width],
            y,
            Op::ConvT { x, k, geom },
            tracked,
        ))
    }

    /// Adds a per-channel bias `b[C]` to `x[B×C×H×W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || bs.iter().product::<usize>() != xs[1] {
            return Err(Error::dim("channel_bias", &xs, &bs));
        }
        let plane = xs[2] * xs[3];
        let bv = self.value(b);
        let mut y = self.value(x).to_vec();
        for (i, chunk) in y.chunks_mut(plane).enumerate() {
            let bias = bv[i % xs[1]];
            chunk.iter_mut().for_each(|v| *v = *v + bias);
        }
        let tracked = self.any_tracked(&[x, b]);
        Ok(self.push(xs, y, Op::ChannelBias { x, b }, tracked))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let tracked = self.any_tracked(&[x]);
        self.push(self.shape(x).to_vec(), y, Op::Act { x, kind }, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| f(p, q))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, "add", |p, q| p + q)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), y, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, "sub", |p, q| p - q)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), y, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, "mul", |p, q| p * q)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), y, Op::Mul(a, b), tracked))
    }

    /// `scale · x + shift`, elementwise with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let y = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let tracked = self.any_tracked(&[x]);
        self.push(self.shape(x).to_vec(), y, Op::Affine { x, scale }, tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let y = self.value(x).to_vec();
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(shape.to_vec(), y, Op::Reshape(x), tracked))
    }

    /// Columns `start..start+len` of a `B×N` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || start + len > xs[1] || len == 0 {
            return Err(Error::dim("slice_cols", &xs, &[start, len]));
        }
        let y: Vec<T> = self
            .value(x)
            .chunks(xs[1])
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(vec![xs[0], len], y, Op::SliceCols { x, start }, tracked))
    }

    /// `mu + exp(0.5·log_var) ⊙ noise`; the noise is a constant.
    pub fn reparameterize(&mut self, mu: Var, log_var: Var, noise: &Tensor<T>) -> Result<Var> {
        if self.shape(mu) != self.shape(log_var) {
            return Err(Error::dim("reparameterize", self.shape(mu), self.shape(log_var)));
        }
        if self.shape(mu) != noise.shape() {
            return Err(Error::dim("reparameterize noise", self.shape(mu), noise.shape()));
        }
        let half = T::of(0.5);
        let y = self
            .value(mu)
            .iter()
            .zip(self.value(log_var))
            .zip(noise.data())
            .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
            .collect();
        let tracked = self.any_tracked(&[mu, log_var]);
        Ok(self.push(
            self.shape(mu).to_vec(),
            y,
            Op::Reparam {
                mu,
                log_var,
                noise: noise.data().to_vec(),
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let tracked = self.any_tracked(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), tracked)
    }

    /// Closed-form `KL(N(mu, exp(log_var)) || N(0, I))`, summed over every
    /// element (batch included).
    pub fn kl_gaussian(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        if self.shape(mu) != self.shape(log_var) {
            return Err(Error::dim("kl_gaussian", self.shape(mu), self.shape(log_var)));
        }
        let half = T::of(0.5);
        let total: T = self
            .value(mu)
            .iter()
            .zip(self.value(log_var))
            .map(|(&m, &lv)| T::one() + lv - m * m - lv.exp())
            .sum();
        let tracked = self.any_tracked(&[mu, log_var]);
        Ok(self.push(vec![1], vec![-half * total], Op::KlGaussian { mu, log_var }, tracked))
    }

    /// `½·Σ (pred - target)²` against a constant target.
    pub fn half_sse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        if self.value(pred).len() != target.len() {
            return Err(Error::dim("half_sse", self.shape(pred), &[target.len()]));
        }
        let half = T::of(0.5);
        let s: T = self
            .value(pred)
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let tracked = self.any_tracked(&[pred]);
        Ok(self.push(
            vec![1],
            vec![half * s],
            Op::HalfSse {
                pred,
                target: target.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean of squared differences against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        if self.value(pred).len() != target.len() {
            return Err(Error::dim("mse", self.shape(pred), &[target.len()]));
        }
        let n = T::of(target.len() as f64);
        let s: T = self
            .value(pred)
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let tracked = self.any_tracked(&[pred]);
        Ok(self.push(
            vec![1],
            vec![s / n],
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            tracked,
        ))
    }

    /// Class-balanced binary cross-entropy of a probability map against a
    /// binary mask, one normalized term per leading-axis sample, summed.
    ///
    /// Positives weigh `1 - p`, negatives `p`; each sample is divided by its
    /// total weight `(1-p)·n_true + p·n_false`. Probabilities are clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`; the backward pass evaluates the
    /// derivative at the clamped value.
    pub fn weighted_bce(&mut self, prob: Var, target: &[T], p: T) -> Result<Var> {
        if !(p > T::zero() && p <= T::one()) {
            return Err(Error::Config(format!(
                "class ratio must lie in (0, 1], got {:?}",
                p
            )));
        }
        let shape = self.shape(prob).to_vec();
        if self.value(prob).len() != target.len() {
            return Err(Error::dim("weighted_bce", &shape, &[target.len()]));
        }
        let batch = shape[0];
        let per = target.len() / batch;
        let pos_w = T::one() - p;
        let neg_w = p;
        let lo = T::of(PROB_CLAMP);
        let hi = T::one() - lo;
        let mut denoms = Vec::with_capacity(batch);
        let mut total = T::zero();
        for i in 0..batch {
            let ys = &target[i * per..(i + 1) * per];
            let ps = &self.value(prob)[i * per..(i + 1) * per];
            let n_true: T = ys.iter().copied().sum();
            let n_false = T::of(per as f64) - n_true;
            let denom = pos_w * n_true + neg_w * n_false;
            let mut acc = T::zero();
            for (&y, &q) in ys.iter().zip(ps) {
                let q = q.max(lo).min(hi);
                acc = acc + pos_w * y * q.ln() + neg_w * (T::one() - y) * (T::one() - q).ln();
            }
            total = total - acc / denom;
            denoms.push(denom);
        }
        let tracked = self.any_tracked(&[prob]);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::WeightedBce {
                prob,
                target: target.to_vec(),
                pos_w,
                neg_w,
                denoms,
            },
            tracked,
        ))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Propagates d(loss)/d(·) to every tracked value recorded before `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.backward_done = true;
        if !self.node(loss).tracked {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(gy) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy);
            self.grads[idx] = Some(gy);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, gy: &[T]) {
        // Split borrows: node values are read while input grads are written.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[idx];
        let tracked = |v: Var| nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (batch, inp) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let out = nodes[w.0].shape[1];
                if tracked(*x) {
                    let g = self.grad_buf_in(&nodes, *x);
                    T::gemm(batch, out, inp, gy, false, &nodes[w.0].value, true, T::one(), g);
                }
                if tracked(*w) {
                    let g = self.grad_buf_in(&nodes, *w);
                    T::gemm(inp, batch, out, &nodes[x.0].value, true, gy, false, T::one(), g);
                }
                if let Some(b) = b.filter(|b| tracked(*b)) {
                    let g = self.grad_buf_in(&nodes, b);
                    for row in gy.chunks(out) {
                        add_into(g, row);
                    }
                }
            }
            Op::Conv { x, k, geom } => {
                let batch = nodes[x.0].shape[0];
                let filters = nodes[k.0].shape[0];
                let (plen, nlen, wlen) = (geom.patch_len(), geom.narrow_len(), geom.wide_len());
                let mut col = vec![T::zero(); plen * nlen];
                for bi in 0..batch {
                    let gyb = &gy[bi * filters * nlen..(bi + 1) * filters * nlen];
                    if tracked(*k) {
                        geom.im2col(&nodes[x.0].value[bi * wlen..(bi + 1) * wlen], &mut col);
                        let g = self.grad_buf_in(&nodes, *k);
                        T::gemm(filters, nlen, plen, gyb, false, &col, true, T::one(), g);
                    }
                    if tracked(*x) {
                        T::gemm(plen, filters, nlen, &nodes[k.0].value, true, gyb, false, T::zero(), &mut col);
                        let g = self.grad_buf_in(&nodes, *x);
                        geom.col2im(&col, &mut g[bi * wlen..(bi + 1) * wlen]);
                    }
                }
            }
            Op::ConvT { x, k, geom } => {
                let batch = nodes[x.0].shape[0];
                let filters = nodes[k.0].shape[0];
                let (plen, nlen, wlen) = (geom.patch_len(), geom.narrow_len(), geom.wide_len());
                let mut col = vec![T::zero(); plen * nlen];
                for bi in 0..batch {
                    geom.im2col(&gy[bi * wlen..(bi + 1) * wlen], &mut col);
                    if tracked(*x) {
                        let g = self.grad_buf_in(&nodes, *x);
                        let gxb = &mut g[bi * filters * nlen..(bi + 1) * filters * nlen];
                        T::gemm(filters, plen, nlen, &nodes[k.0].value, false, &col, false, T::one(), gxb);
                    }
                    if tracked(*k) {
                        let xb = &nodes[x.0].value[bi * filters * nlen..(bi + 1) * filters * nlen];
                        let g = self.grad_buf_in(&nodes, *k);
                        T::gemm(filters, nlen, plen, xb, false, &col, true, T::one(), g);
                    }
                }
            }
            Op::ChannelBias { x, b } => {
                if tracked(*x) {
                    add_into(self.grad_buf_in(&nodes, *x), gy);
                }
                if tracked(*b) {
                    let s = &node.shape;
                    let plane = s[2] * s[3];
                    let g = self.grad_buf_in(&nodes, *b);
                    for (i, chunk) in gy.chunks(plane).enumerate() {
                        let c = i % s[1];
                        g[c] = g[c] + chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Act { x, kind } => {
                let g = self.grad_buf_in(&nodes, *x);
                for ((gi, &go), &y) in g.iter_mut().zip(gy).zip(&node.value) {
                    *gi = *gi + go * kind.derivative(y);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if tracked(v) {
                        add_into(self.grad_buf_in(&nodes, v), gy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    add_into(self.grad_buf_in(&nodes, *a), gy);
                }
                if tracked(*b) {
                    let g = self.grad_buf_in(&nodes, *b);
                    for (gi, &go) in g.iter_mut().zip(gy) {
                        *gi = *gi - go;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if tracked(v) {
                        let g = self.grad_buf_in(&nodes, v);
                        for ((gi, &go), &o) in g.iter_mut().zip(gy).zip(&nodes[other.0].value) {
                            *gi = *gi + go * o;
                        }
                    }
                }
            }
            Op::Affine { x, scale } => {
                let g = self.grad_buf_in(&nodes, *x);
                for (gi, &go) in g.iter_mut().zip(gy) {
                    *gi = *gi + *scale * go;
                }
            }
            Op::Reshape(x) => add_into(self.grad_buf_in(&nodes, *x), gy),
            Op::SliceCols { x, start } => {
                let cols = nodes[x.0].shape[1];
                let len = node.shape[1];
                let g = self.grad_buf_in(&nodes, *x);
                for (grow, orow) in g.chunks_mut(cols).zip(gy.chunks(len)) {
                    add_into(&mut grow[*start..*start + len], orow);
                }
            }
            Op::Reparam { mu, log_var, noise } => {
                if tracked(*mu) {
                    add_into(self.grad_buf_in(&nodes, *mu), gy);
                }
                if tracked(*log_var) {
                    let half = T::of(0.5);
                    let lv = &nodes[log_var.0].value;
                    let g = self.grad_buf_in(&nodes, *log_var);
                    for i in 0..g.len() {
                        g[i] = g[i] + gy[i] * half * (half * lv[i]).exp() * noise[i];
                    }
                }
            }
            Op::Sum(x) => {
                let g = self.grad_buf_in(&nodes, *x);
                g.iter_mut().for_each(|v| *v = *v + gy[0]);
            }
            Op::KlGaussian { mu, log_var } => {
                let go = gy[0];
                if tracked(*mu) {
                    let m = &nodes[mu.0].value;
                    let g = self.grad_buf_in(&nodes, *mu);
                    for (gi, &mi) in g.iter_mut().zip(m) {
                        *gi = *gi + go * mi;
                    }
                }
                if tracked(*log_var) {
                    let half = T::of(0.5);
                    let lv = &nodes[log_var.0].value;
                    let g = self.grad_buf_in(&nodes, *log_var);
                    for (gi, &l) in g.iter_mut().zip(lv) {
                        *gi = *gi + go * half * (l.exp() - T::one());
                    }
                }
            }
            Op::HalfSse { pred, target } => {
                let go = gy[0];
                let p = &nodes[pred.0].value;
                let g = self.grad_buf_in(&nodes, *pred);
                for ((gi, &pi), &ti) in g.iter_mut().zip(p).zip(target) {
                    *gi = *gi + go * (pi - ti);
                }
            }
            Op::Mse { pred, target } => {
                let scale = gy[0] * T::of(2.0) / T::of(target.len() as f64);
                let p = &nodes[pred.0].value;
                let g = self.grad_buf_in(&nodes, *pred);
                for ((gi, &pi), &ti) in g.iter_mut().zip(p).zip(target) {
                    *gi = *gi + scale * (pi - ti);
                }
            }
            Op::WeightedBce {
                prob,
                target,
                pos_w,
                neg_w,
                denoms,
            } => {
                let go = gy[0];
                let per = target.len() / denoms.len();
                let lo = T::of(PROB_CLAMP);
                let hi = T::one() - lo;
                let q = &nodes[prob.0].value;
                let g = self.grad_buf_in(&nodes, *prob);
                for (i, &d) in denoms.iter().enumerate() {
                    for j in i * per..(i + 1) * per {
                        let qc = q[j].max(lo).min(hi);
                        let y = target[j];
                        let dl = -(*pos_w * y / qc - *neg_w * (T::one() - y) / (T::one() - qc)) / d;
                        g[j] = g[j] + go * dl;
                    }
                }
            }
        }
        self.nodes = nodes;
    }

    fn grad_buf_in(&mut self, nodes: &[Node<T>], v: Var) -> &mut Vec<T> {
        let n = nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_and_hand_expansion() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0]);

        let x = tape.leaf(&t(&[1, 2], &[1.0, 1.0]));
        let w = tape.leaf(&t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let b = tape.leaf(&t(&[2], &[1.0, 1.0]));
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[7.0, 9.0]);
    }

    #[test]
    fn dense_shape_contract_and_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::zeros([4, 8]).unwrap());
        let w = tape.leaf(&Tensor::<f64>::zeros([8, 3]).unwrap());
        let b = tape.leaf(&Tensor::<f64>::zeros([3]).unwrap());
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.shape(y), &[4, 3]);

        let bad = tape.leaf(&Tensor::<f64>::zeros([7, 3]).unwrap());
        match tape.dense(x, bad, None) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![4, 8]);
                assert_eq!(right, vec![7, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv2d_identity_window_sum_and_shape() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..9).map(f64::from).collect();
        let x = tape.leaf(&t(&[1, 1, 3, 3], &data));
        let k = tape.leaf(&t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &data[..]);

        let x = tape.leaf(&t(&[1, 1, 4, 4], &[1.0; 16]));
        let k = tape.leaf(&t(&[1, 1, 3, 3], &[1.0; 9]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y), &[9.0; 4]);

        let x = tape.leaf(&Tensor::<f64>::zeros([2, 3, 64, 64]).unwrap());
        let k = tape.leaf(&Tensor::<f64>::zeros([16, 3, 7, 7]).unwrap());
        let y = tape.conv2d(x, k, 2, 3).unwrap();
        assert_eq!(tape.shape(y), &[2, 16, 32, 32]);
    }

    #[test]
    fn transpose_conv_shape_and_impulse_response() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::zeros([1, 16, 32, 32]).unwrap());
        let k = tape.leaf(&Tensor::<f64>::zeros([16, 3, 5, 5]).unwrap());
        let y = tape.transpose_conv2d(x, k, 2, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 64, 64]);

        // A single 1 at (1,1) of a 3×3 grid, stride 1, no padding: the kernel
        // appears with its top-left corner at (1,1) of the 5×5 output.
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let kern: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.leaf(&t(&[1, 1, 3, 3], &delta));
        let k = tape.leaf(&t(&[1, 1, 3, 3], &kern));
        let y = tape.transpose_conv2d(x, k, 1, 0, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 5, 5]);
        let out = tape.value(y);
        for r in 0..5 {
            for c in 0..5 {
                let expected = if (1..4).contains(&r) && (1..4).contains(&c) {
                    kern[(r - 1) * 3 + (c - 1)]
                } else {
                    0.0
                };
                assert_eq!(out[r * 5 + c], expected, "at ({r},{c})");
            }
        }
    }

    #[test]
    fn activation_anchor_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 2.0, 0.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 2.0, 0.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s)[2], 0.5);
        let h = tape.tanh(x);
        assert_eq!(tape.value(h)[2], 0.0);
    }

    #[test]
    fn reparameterize_limits_and_gradient_routing() {
        let mut tape = Tape::new();
        let mu = tape.leaf(&t(&[1, 2], &[0.3, -1.0]).tracked());
        let lv = tape.leaf(&t(&[1, 2], &[0.0, 0.0]).tracked());
        let z = tape
            .reparameterize(mu, lv, &t(&[1, 2], &[0.0, 0.0]))
            .unwrap();
        assert_eq!(tape.value(z), &[0.3, -1.0]);
        let z = tape
            .reparameterize(mu, lv, &t(&[1, 2], &[0.5, 2.0]))
            .unwrap();
        assert_eq!(tape.value(z), &[0.8, 1.0]);
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(mu).unwrap(), vec![1.0, 1.0]);
        assert_eq!(tape.grad(lv).unwrap(), vec![0.25, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares_and_constant_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).tracked());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![2.0, 4.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).tracked());
        let c = tape.constant(&[1], vec![3.0]).unwrap();
        let _unused = tape.relu(x);
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).tracked());
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
        tape.reset_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn untouched_leaf_gets_exact_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]).tracked());
        let b = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]).tracked());
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn weighted_bce_anchor_cases() {
        let mut tape = Tape::new();
        let q = tape.constant(&[1, 4], vec![0.5; 4]).unwrap();
        let l = tape.weighted_bce(q, &[0.0; 4], 0.8409).unwrap();
        assert!((tape.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let q = tape.constant(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            tape.weighted_bce(q, &[0.0, 1.0], 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            tape.weighted_bce(q, &[0.0, 1.0], 1.5),
            Err(Error::Config(_))
        ));
        let l = tape.weighted_bce(q, &[0.0, 1.0], 0.3).unwrap();
        assert!(tape.value(l)[0] <= 1.6e-6);
    }
}
