//! Interprets a [`NetworkSpec`] on a [`Graph`].

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use snowkit_tensor::{BatchStats, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::models::spec::{LayerDesc, NetworkSpec, BATCHNORM_EPS, BATCHNORM_MOMENTUM};
use crate::models::weights::{NamedTensor, WeightStore};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and active dropout.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

pub struct ForwardCtx<'a> {
    pub mode: Mode,
    /// Needed for dropout in train mode.
    pub rng: Option<&'a mut dyn RngCore>,
    /// Registers weights as constants so no gradient is computed for them.
    pub frozen: bool,
}

impl ForwardCtx<'_> {
    pub fn eval() -> Self {
        ForwardCtx { mode: Mode::Eval, rng: None, frozen: true }
    }
}

pub struct ForwardOutput {
    pub output: Var,
    /// Batch statistics of every batchnorm layer run in train mode, keyed by
    /// layer index.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Debug)]
enum LayerParams {
    None,
    Affine { weight: ParamId, bias: ParamId },
    Norm { gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId },
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    store: ParamStore,
    layers: Vec<LayerParams>,
}

/// Name and shape of every tensor a layer owns.
fn layer_tensors(i: usize, layer: &LayerDesc) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::{Buffer, Trainable};
    match *layer {
        LayerDesc::Dense { inputs, outputs } => vec![
            (format!("{i}.dense.weight"), vec![inputs, outputs], Trainable),
            (format!("{i}.dense.bias"), vec![outputs], Trainable),
        ],
        LayerDesc::Conv { cin, cout, k, .. } => vec![
            (format!("{i}.conv.weight"), vec![cout, cin, k, k], Trainable),
            (format!("{i}.conv.bias"), vec![cout], Trainable),
        ],
        LayerDesc::ConvTranspose { cin, cout, k, .. } => vec![
            (format!("{i}.convt.weight"), vec![cin, cout, k, k], Trainable),
            (format!("{i}.convt.bias"), vec![cout], Trainable),
        ],
        LayerDesc::BatchNorm { channels } => vec![
            (format!("{i}.bn.gamma"), vec![channels], Trainable),
            (format!("{i}.bn.beta"), vec![channels], Trainable),
            (format!("{i}.bn.running_mean"), vec![channels], Buffer),
            (format!("{i}.bn.running_var"), vec![channels], Buffer),
        ],
        _ => vec![],
    }
}

/// He-normal standard deviation for a layer's weight.
fn he_std(layer: &LayerDesc) -> f64 {
    let fan_in = match *layer {
        LayerDesc::Dense { inputs, .. } => inputs as f64,
        LayerDesc::Conv { cin, k, .. } => (cin * k * k) as f64,
        // each output sees about cin * (k / stride)^2 inputs
        LayerDesc::ConvTranspose { cin, k, stride, .. } => (cin * k * k) as f64 / (stride * stride) as f64,
        _ => 1.0,
    };
    (2.0 / fan_in.max(1.0)).sqrt()
}

impl Network {
    fn assemble(spec: NetworkSpec, mut value_for: impl FnMut(usize, &LayerDesc, &str, &[usize]) -> Result<Tensor>) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let ids = layer_tensors(i, layer)
                .into_iter()
                .map(|(name, shape, kind)| Ok(store.add(name.clone(), value_for(i, layer, &name, &shape)?, kind)))
                .collect::<Result<Vec<_>>>()?;
            layers.push(match ids[..] {
                [] => LayerParams::None,
                [weight, bias] => LayerParams::Affine { weight, bias },
                [gamma, beta, mean, var] => LayerParams::Norm { gamma, beta, mean, var },
                _ => unreachable!("layer_tensors yields 0, 2 or 4 tensors"),
            });
        }
        Ok(Self { spec, store, layers })
    }

    /// Fresh weights: He-normal for dense/conv weights, zero biases, unit
    /// batchnorm scale with zero shift, running statistics (0, 1).
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        Self::assemble(spec, |_, layer, name, shape| {
            let t = if name.ends_with(".weight") {
                let normal = Normal::new(0.0, he_std(layer)).expect("finite std");
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut r)).collect())?
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                Tensor::full(shape, 1.0)
            } else {
                Tensor::zeros(shape)
            };
            Ok(t)
        })
    }

    /// Rebuilds a network from stored weights after checking the fingerprint
    /// and that every expected tensor is present with the right shape.
    pub fn from_weights(spec: NetworkSpec, weights: &WeightStore) -> Result<Self> {
        weights.check_fingerprint(&spec)?;
        let expected: usize = spec.layers.iter().enumerate().map(|(i, l)| layer_tensors(i, l).len()).sum();
        if weights.tensors.len() != expected {
            return Err(Error::WeightLayout(format!("{} tensors, expected {expected}", weights.tensors.len())));
        }
        Self::assemble(spec, |_, _, name, shape| {
            let t = weights.get(name).ok_or_else(|| Error::WeightLayout(format!("missing {name}")))?;
            if t.shape != shape {
                return Err(Error::WeightLayout(format!("{name} has shape {:?}, expected {shape:?}", t.shape)));
            }
            Ok(Tensor::new(shape.to_vec(), t.values.iter().map(|&v| f64::from(v)).collect())?)
        })
    }

    /// Snapshot of every tensor (including running statistics) in f32.
    pub fn to_weights(&self) -> WeightStore {
        let tensors = self
            .store
            .iter()
            .map(|(_, e)| NamedTensor {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                values: e.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        WeightStore { fingerprint: self.spec.fingerprint(), tensors }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_ids().iter().map(|&id| self.store.get(id).len()).sum()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<ForwardOutput> {
        self.forward_with(&self.store, g, x, ctx)
    }

    /// Runs the architecture with parameters taken from `store`, which must
    /// have the layout of [`Network::params`]. Used for gradient checking.
    pub fn forward_with(&self, store: &ParamStore, g: &mut Graph, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<ForwardOutput> {
        if store.len() != self.store.len() {
            return Err(invalid(format!("parameter store has {} entries, network needs {}", store.len(), self.store.len())));
        }
        let fetch = |g: &mut Graph, id: ParamId, frozen: bool| {
            if frozen {
                g.constant(store.get(id).clone())
            } else {
                g.param(store, id)
            }
        };
        let shape = g.value(x).shape().to_vec();
        let batch = *shape.first().ok_or_else(|| invalid("network input has no batch dimension"))?;
        self.spec.check_input(&shape[1..])?;
        let mut cur = x;
        let mut skips = Vec::new();
        let mut batch_stats = Vec::new();
        for (i, (layer, params)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            cur = match (layer, params) {
                (LayerDesc::Dense { .. }, LayerParams::Affine { weight, bias }) => {
                    let (w, b) = (fetch(g, *weight, ctx.frozen), fetch(g, *bias, ctx.frozen));
                    g.dense(cur, w, b)?
                }
                (LayerDesc::Conv { stride, padding, .. }, LayerParams::Affine { weight, bias }) => {
                    let (w, b) = (fetch(g, *weight, ctx.frozen), fetch(g, *bias, ctx.frozen));
                    g.conv2d(cur, w, Some(b), *stride, *padding)?
                }
                (LayerDesc::ConvTranspose { stride, padding, .. }, LayerParams::Affine { weight, bias }) => {
                    let (w, b) = (fetch(g, *weight, ctx.frozen), fetch(g, *bias, ctx.frozen));
                    g.conv_transpose2d(cur, w, Some(b), *stride, *padding)?
                }
                (LayerDesc::BatchNorm { .. }, LayerParams::Norm { gamma, beta, mean, var }) => {
                    let (gm, bt) = (fetch(g, *gamma, ctx.frozen), fetch(g, *beta, ctx.frozen));
                    match ctx.mode {
                        Mode::Train => {
                            let (y, stats) = g.batchnorm2d_train(cur, gm, bt, BATCHNORM_EPS)?;
                            batch_stats.push((i, stats));
                            y
                        }
                        Mode::Eval => g.batchnorm2d_eval(
                            cur,
                            gm,
                            bt,
                            store.get(*mean).data(),
                            store.get(*var).data(),
                            BATCHNORM_EPS,
                        )?,
                    }
                }
                (LayerDesc::Reshape { shape }, _) => {
                    let full: Vec<usize> = std::iter::once(batch).chain(shape.iter().copied()).collect();
                    g.reshape(cur, &full)?
                }
                (LayerDesc::Flatten, _) => {
                    let n = g.value(cur).len() / batch;
                    g.reshape(cur, &[batch, n])?
                }
                (LayerDesc::Act { act }, _) => g.activation(cur, *act),
                (LayerDesc::Dropout { rate }, _) => match ctx.mode {
                    Mode::Eval => cur,
                    Mode::Train => {
                        let r = ctx.rng.as_deref_mut().ok_or_else(|| invalid("dropout in train mode needs an rng"))?;
                        g.dropout(cur, *rate, r)?
                    }
                },
                (LayerDesc::MaxPool { k }, _) => g.maxpool2d(cur, *k)?,
                (LayerDesc::AvgPool { k }, _) => g.avgpool2d(cur, *k)?,
                (LayerDesc::PushSkip, _) => {
                    skips.push(cur);
                    cur
                }
                (LayerDesc::ConcatSkip, _) => {
                    let skip = skips.pop().ok_or_else(|| invalid(format!("layer {i}: no saved activation")))?;
                    g.concat_channels(cur, skip)?
                }
                (layer, _) => unreachable!("parameters built for {layer:?}"),
            };
        }
        Ok(ForwardOutput { output: cur, batch_stats })
    }

    /// `running = m * running + (1 - m) * batch` for every reported layer,
    /// with the biased batch variance.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (layer, s) in stats {
            if let LayerParams::Norm { mean, var, .. } = self.layers[*layer] {
                for (id, batch) in [(mean, &s.mean), (var, &s.var)] {
                    for (r, b) in self.store.get_mut(id).data_mut().iter_mut().zip(batch) {
                        *r = BATCHNORM_MOMENTUM * *r + (1.0 - BATCHNORM_MOMENTUM) * b;
                    }
                }
            }
        }
    }

    /// Eval-mode inference on a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, &mut ForwardCtx::eval())?;
        Ok(g.value(out.output).clone())
    }
}
