use serde::{Deserialize, Serialize};
use snowkit_tensor::Activation;

use crate::error::{Error, Result};

/// One step of a feed-forward network. Skip connections are expressed with a
/// stack: `PushSkip` saves the current activation and `ConcatSkip` pops it and
/// concatenates it after the current activation along channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerDesc {
    Dense { inputs: usize, outputs: usize },
    /// Per-sample target shape; the batch dimension is kept.
    Reshape { shape: Vec<usize> },
    Flatten,
    Conv { cin: usize, cout: usize, k: usize, stride: usize, padding: usize },
    ConvTranspose { cin: usize, cout: usize, k: usize, stride: usize, padding: usize },
    BatchNorm { channels: usize },
    Act { act: Activation },
    Dropout { rate: f64 },
    MaxPool { k: usize },
    AvgPool { k: usize },
    PushSkip,
    ConcatSkip,
}

/// Ordered layer list with its input contract.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input shape; a 0 extent accepts any size.
    pub input: Vec<usize>,
    /// Spatial extents must be multiples of this.
    pub spatial_multiple: usize,
    pub layers: Vec<LayerDesc>,
}

pub const BATCHNORM_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic in each update.
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl NetworkSpec {
    /// Canonical text describing the architecture.
    pub fn descriptor(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.descriptor().as_bytes())
    }

    /// Checks a per-sample input shape against the contract.
    pub fn check_input(&self, sample: &[usize]) -> Result<()> {
        let ok = sample.len() == self.input.len()
            && sample.iter().zip(&self.input).all(|(&s, &want)| want == 0 || s == want);
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "{} expects per-sample input {:?} (0 = any), got {sample:?}",
                self.name, self.input
            )));
        }
        if sample.len() == 3 && sample[1..].iter().any(|e| e % self.spatial_multiple != 0) {
            return Err(Error::ShapeMismatch(format!(
                "{} needs spatial extents divisible by {}, got {}x{}",
                self.name, self.spatial_multiple, sample[2], sample[1]
            )));
        }
        Ok(())
    }

    /// Per-sample shape after every layer for the given input.
    pub fn infer_shapes(&self, sample: &[usize]) -> Result<Vec<Vec<usize>>> {
        self.check_input(sample)?;
        let mismatch = |i: usize, what: String| Error::ShapeMismatch(format!("{} layer {i}: {what}", self.name));
        let mut cur = sample.to_vec();
        let mut skips = Vec::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerDesc::Dense { inputs, outputs } => {
                    if cur != [*inputs] {
                        return Err(mismatch(i, format!("dense expects [{inputs}], got {cur:?}")));
                    }
                    vec![*outputs]
                }
                LayerDesc::Reshape { shape } => {
                    if shape.iter().product::<usize>() != cur.iter().product::<usize>() {
                        return Err(mismatch(i, format!("cannot reshape {cur:?} to {shape:?}")));
                    }
                    shape.clone()
                }
                LayerDesc::Flatten => vec![cur.iter().product()],
                LayerDesc::Conv { cin, cout, k, stride, padding } => {
                    let [c, h, w] = spatial(&cur).ok_or_else(|| mismatch(i, format!("conv on {cur:?}")))?;
                    if c != *cin {
                        return Err(mismatch(i, format!("conv expects {cin} channels, got {c}")));
                    }
                    let geo = snowkit_tensor::ConvGeometry::new(*stride, *padding);
                    match (geo.conv_out(h, *k), geo.conv_out(w, *k)) {
                        (Some(oh), Some(ow)) => vec![*cout, oh, ow],
                        _ => return Err(mismatch(i, format!("conv geometry does not fit {h}x{w}"))),
                    }
                }
                LayerDesc::ConvTranspose { cin, cout, k, stride, padding } => {
                    let [c, h, w] = spatial(&cur).ok_or_else(|| mismatch(i, format!("transposed conv on {cur:?}")))?;
                    if c != *cin {
                        return Err(mismatch(i, format!("transposed conv expects {cin} channels, got {c}")));
                    }
                    let geo = snowkit_tensor::ConvGeometry::new(*stride, *padding);
                    match (geo.conv_transpose_out(h, *k), geo.conv_transpose_out(w, *k)) {
                        (Some(oh), Some(ow)) => vec![*cout, oh, ow],
                        _ => return Err(mismatch(i, format!("transposed conv geometry does not fit {h}x{w}"))),
                    }
                }
                LayerDesc::BatchNorm { channels } => {
                    if spatial(&cur).map(|s| s[0]) != Some(*channels) {
                        return Err(mismatch(i, format!("batchnorm over {channels} channels on {cur:?}")));
                    }
                    cur
                }
                LayerDesc::Act { .. } | LayerDesc::Dropout { .. } => cur,
                LayerDesc::MaxPool { k } | LayerDesc::AvgPool { k } => {
                    let [c, h, w] = spatial(&cur).ok_or_else(|| mismatch(i, format!("pooling on {cur:?}")))?;
                    if h % k != 0 || w % k != 0 {
                        return Err(mismatch(i, format!("pool {k} on {h}x{w}")));
                    }
                    vec![c, h / k, w / k]
                }
                LayerDesc::PushSkip => {
                    skips.push(cur.clone());
                    cur
                }
                LayerDesc::ConcatSkip => {
                    let skip = skips.pop().ok_or_else(|| mismatch(i, "no saved activation".into()))?;
                    if skip.len() != 3 || cur.len() != 3 || skip[1..] != cur[1..] {
                        return Err(mismatch(i, format!("cannot concatenate {cur:?} with {skip:?}")));
                    }
                    vec![cur[0] + skip[0], cur[1], cur[2]]
                }
            };
            out.push(cur.clone());
        }
        if !skips.is_empty() {
            return Err(Error::ShapeMismatch(format!("{}: {} unused skip activations", self.name, skips.len())));
        }
        Ok(out)
    }

    pub fn output_shape(&self, sample: &[usize]) -> Result<Vec<usize>> {
        Ok(self.infer_shapes(sample)?.pop().unwrap_or_else(|| sample.to_vec()))
    }
}

fn spatial(shape: &[usize]) -> Option<[usize; 3]> {
    match *shape {
        [c, h, w] => Some([c, h, w]),
        _ => None,
    }
}
