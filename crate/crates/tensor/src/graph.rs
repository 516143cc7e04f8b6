//! Eager tape of differentiable operations.
//!
//! Every op computes its value immediately and appends a node. Nodes are
//! appended in dependency order, so walking the tape backwards is a reverse
//! topological traversal; each node is visited exactly once per backward.

use std::collections::HashMap;

use rand::{Rng, RngCore};

use crate::conv::{self, ConvGeometry, ConvShape};
use crate::error::{invalid, shape_err, Result, TensorError};
use crate::gemm::gemm;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    LeakyRelu { alpha: f64 },
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub const LEAKY_RELU: Activation = Activation::LeakyRelu { alpha: 0.2 };

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { alpha } => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative given the input `x` and output `y = apply(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu { alpha } => {
                if x >= 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, shape: ConvShape },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, shape: ConvShape },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ChannelAffine { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dense { x: Var, w: Var, b: Var },
    Act { x: Var, kind: Activation },
    Mask { x: Var, mask: Vec<f64> },
    Reshape { x: Var },
    ConcatChannels { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Mean { x: Var },
    Mse { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Hash of every branch taken by a piecewise op: the sign pattern of
    /// each ReLU / leaky ReLU input and the winner of each max-pool window.
    /// Two evaluations with equal signatures lie on the same linear piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Act { x, kind } => {
                    let input = self.value(*x).data();
                    match kind {
                        Activation::Relu => input.iter().for_each(|&v| (v > 0.0).hash(&mut h)),
                        Activation::LeakyRelu { .. } => input.iter().for_each(|&v| (v >= 0.0).hash(&mut h)),
                        Activation::Tanh | Activation::Sigmoid => {}
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked (e.g. network inputs under a gradient check).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers a trainable parameter once per graph; repeated calls share the node
    /// so gradients from several uses accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let shape = ConvShape::for_conv(self.value(x).shape(), self.value(w).shape(), ConvGeometry::new(stride, padding))?;
        self.check_bias("conv2d", b, shape.cout)?;
        let out = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &shape,
        );
        let value = Tensor::new(vec![shape.n, shape.cout, shape.oh, shape.ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, shape }, rg))
    }

    /// Weight layout is `in_channels x out_channels x k x k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let shape =
            ConvShape::for_transpose(self.value(x).shape(), self.value(w).shape(), ConvGeometry::new(stride, padding))?;
        self.check_bias("conv_transpose2d", b, shape.cin)?;
        let out = conv::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &shape,
        );
        let value = Tensor::new(vec![shape.n, shape.cin, shape.h, shape.w], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, shape }, rg))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        match b {
            Some(b) if self.value(b).shape() != [channels] => Err(shape_err(
                op,
                format!("bias {:?} for {channels} output channels", self.value(b).shape()),
            )),
            _ => Ok(()),
        }
    }

    /// Non-overlapping max pooling with window = stride = `k`. Ties route the
    /// gradient to the first maximal element in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("maxpool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err("maxpool2d", format!("{h}x{w} not divisible by {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("avgpool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err("avgpool2d", format!("{h}x{w} not divisible by {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(plane * oh + y / k) * ow + xx / k] += src[(plane * h + y) * w + xx] * norm;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool { x, k }, rg))
    }

    /// Training-mode batch normalization over `(n, h, w)` per channel. Returns
    /// the normalized output and the biased batch statistics.
    pub fn batchnorm2d_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = self.value(x).dims4("batchnorm2d")?;
        self.check_channel_vec("batchnorm2d", gamma, c)?;
        self.check_channel_vec("batchnorm2d", beta, c)?;
        let m = n * h * w;
        if m < 2 {
            return Err(invalid("batchnorm2d", "train mode needs batch*height*width > 1"));
        }
        let src = self.value(x).data();
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let s = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for b in 0..n {
            for ch in 0..c {
                let s = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.affine_normalize(x, gamma, beta, &mean, &inv_std);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(value, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, rg);
        Ok((v, BatchStats { mean, var }))
    }

    /// Evaluation-mode batch normalization using fixed running statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("batchnorm2d")?;
        self.check_channel_vec("batchnorm2d", gamma, c)?;
        self.check_channel_vec("batchnorm2d", beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batchnorm2d", "running statistics length"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.affine_normalize(x, gamma, beta, running_mean, &inv_std);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::ChannelAffine { x, gamma, beta, xhat, inv_std }, rg))
    }

    fn check_channel_vec(&self, op: &'static str, v: Var, c: usize) -> Result<()> {
        if self.value(v).shape() != [c] {
            return Err(shape_err(op, format!("expected [{c}], got {:?}", self.value(v).shape())));
        }
        Ok(())
    }

    fn affine_normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let shape = self.value(x).shape();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (i, (&v, (xh, o))) in src.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / hw) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + bt[ch];
        }
        (xhat, out)
    }

    /// Affine map `x W + b` for `x: batch x in`, `W: in x out`, `b: out`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, fin) = self.value(x).dims2("dense")?;
        let (win, fout) = self.value(w).dims2("dense")?;
        if win != fin || self.value(b).shape() != [fout] {
            return Err(shape_err(
                "dense",
                format!(
                    "x {:?}, W {:?}, b {:?}",
                    self.value(x).shape(),
                    self.value(w).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let mut out = vec![0.0; batch * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(batch, fin, fout, self.value(x).data(), false, self.value(w).data(), false, &mut out, 1.0);
        let value = Tensor::new(vec![batch, fout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(x);
        self.push(value, Op::Act { x, kind }, rg)
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: RngCore + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mask { x, mask }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Concatenates two NCHW tensors along channels, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err(
                "concat_channels",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatChannels { a, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Mean over every element, as a single-element tensor.
    pub fn mean(&mut self, x: Var, op: &'static str) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(TensorError::EmptyBatch { op });
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean { x }, rg))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        if self.value(a).is_empty() {
            return Err(TensorError::EmptyBatch { op: "mse_loss" });
        }
        let n = self.value(a).len() as f64;
        let sum: f64 = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| (x - y).powi(2)).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(sum / n), Op::Mse { a, b }, rg))
    }

    /// Reverse-mode differentiation from a single-element output.
    ///
    /// A graph supports one backward pass; a second call is rejected so that
    /// gradients can never silently accumulate across passes.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        if self.value(output).len() != 1 {
            return Err(TensorError::NonScalarOutput(self.value(output).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads)?;
            // only leaf gradients are observable afterwards
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }

        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) -> Result<()> {
        let t = Tensor::new(self.value(v).shape().to_vec(), data)?;
        self.accumulate(grads, v, t);
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, shape } => {
                let need = [self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))];
                let g = conv::conv2d_backward(self.value(*x).data(), self.value(*w).data(), dy.data(), shape, need);
                self.apply_conv_grads(grads, *x, *w, *b, g)?;
            }
            Op::ConvTranspose2d { x, w, b, shape } => {
                let need = [self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))];
                let g = conv::conv_transpose2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy.data(),
                    shape,
                    need,
                );
                self.apply_conv_grads(grads, *x, *w, *b, g)?;
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, g) in argmax.iter().zip(dy.data()) {
                    dx[src] += g;
                }
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::AvgPool { x, k } => {
                let (_, _, h, w) = self.value(*x).dims4("avgpool2d")?;
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i, v) in dx.iter_mut().enumerate() {
                    let (plane, rem) = (i / (h * w), i % (h * w));
                    let (y, xx) = (rem / w, rem % w);
                    *v = dy.data()[(plane * oh + y / k) * ow + xx / k] * norm;
                }
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let shape = self.value(*x).shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                let m = (xhat.len() / c) as f64;
                let g = self.value(*gamma).data();
                let (mut dgamma, mut dbeta) = (vec![0.0; c], vec![0.0; c]);
                // per-channel sums of dxhat and dxhat * xhat
                let (mut sum_d, mut sum_dx) = (vec![0.0; c], vec![0.0; c]);
                for (i, (&d, &xh)) in dy.data().iter().zip(xhat).enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] += d * xh;
                    dbeta[ch] += d;
                    sum_d[ch] += d * g[ch];
                    sum_dx[ch] += d * g[ch] * xh;
                }
                if self.rg(*x) {
                    let dx = dy
                        .data()
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&d, &xh))| {
                            let ch = (i / hw) % c;
                            inv_std[ch] / m * (m * d * g[ch] - sum_d[ch] - xh * sum_dx[ch])
                        })
                        .collect();
                    self.accumulate_vec(grads, *x, dx)?;
                }
                self.accumulate_vec(grads, *gamma, dgamma)?;
                self.accumulate_vec(grads, *beta, dbeta)?;
            }
            Op::ChannelAffine { x, gamma, beta, xhat, inv_std } => {
                let shape = self.value(*x).shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                let g = self.value(*gamma).data();
                let (mut dgamma, mut dbeta) = (vec![0.0; c], vec![0.0; c]);
                let mut dx = vec![0.0; xhat.len()];
                for (i, (&d, &xh)) in dy.data().iter().zip(xhat).enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] += d * xh;
                    dbeta[ch] += d;
                    dx[i] = d * g[ch] * inv_std[ch];
                }
                self.accumulate_vec(grads, *x, dx)?;
                self.accumulate_vec(grads, *gamma, dgamma)?;
                self.accumulate_vec(grads, *beta, dbeta)?;
            }
            Op::Dense { x, w, b } => {
                let (batch, fin) = self.value(*x).dims2("dense")?;
                let fout = self.value(*b).len();
                if self.rg(*x) {
                    let mut dx = vec![0.0; batch * fin];
                    gemm(batch, fout, fin, dy.data(), false, self.value(*w).data(), true, &mut dx, 0.0);
                    self.accumulate_vec(grads, *x, dx)?;
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; fin * fout];
                    gemm(fin, batch, fout, self.value(*x).data(), true, dy.data(), false, &mut dw, 0.0);
                    self.accumulate_vec(grads, *w, dw)?;
                }
                let mut db = vec![0.0; fout];
                for row in dy.data().chunks(fout) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                self.accumulate_vec(grads, *b, db)?;
            }
            Op::Act { x, kind } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(dy.data())
                    .map(|((&xi, &yi), &d)| d * kind.derivative(xi, yi))
                    .collect();
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::Mask { x, mask } => {
                let dx = dy.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::Reshape { x } => {
                self.accumulate_vec(grads, *x, dy.data().to_vec())?;
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4("concat_channels")?;
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let (mut da, mut db) = (Vec::with_capacity(n * ca * hw), Vec::with_capacity(n * cb * hw));
                for chunk in dy.data().chunks((ca + cb) * hw) {
                    da.extend_from_slice(&chunk[..ca * hw]);
                    db.extend_from_slice(&chunk[ca * hw..]);
                }
                self.accumulate_vec(grads, *a, da)?;
                self.accumulate_vec(grads, *b, db)?;
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, dy.map(|v| v * factor));
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let g = dy.data()[0] / n as f64;
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Mse { a, b } => {
                let n = self.value(*a).len() as f64;
                let g = dy.data()[0];
                let da: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| 2.0 * (x - y) / n * g)
                    .collect();
                if self.rg(*b) {
                    self.accumulate_vec(grads, *b, da.iter().map(|v| -v).collect())?;
                }
                self.accumulate_vec(grads, *a, da)?;
            }
        }
        Ok(())
    }

    fn apply_conv_grads(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        w: Var,
        b: Option<Var>,
        g: conv::ConvGrads,
    ) -> Result<()> {
        if let Some(dx) = g.dx {
            self.accumulate_vec(grads, x, dx)?;
        }
        if let Some(dw) = g.dweight {
            self.accumulate_vec(grads, w, dw)?;
        }
        if let (Some(b), Some(db)) = (b, g.dbias) {
            self.accumulate_vec(grads, b, db)?;
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to any node that required gradients.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a registered parameter.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.iter().map(|(id, _)| *id)
    }
}
