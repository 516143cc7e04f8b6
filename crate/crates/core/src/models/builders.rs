use serde::{Deserialize, Serialize};
use snowkit_tensor::Activation;

use crate::degrade::PATCH_SIDE;
use crate::error::{invalid, Result};
use crate::models::spec::{LayerDesc, NetworkSpec};

fn conv(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> LayerDesc {
    LayerDesc::Conv { cin, cout, k, stride, padding }
}

fn act(act: Activation) -> LayerDesc {
    LayerDesc::Act { act }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub z_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { base_channels: 128, z_dim: 100 }
    }
}

/// `z -> dense(4*4*base) -> BN -> LReLU`, then three stride-2 transposed
/// convolutions 4 -> 8 -> 16 -> 32 with channels base -> base/2 -> base/4 -> 1,
/// BN + LReLU between stages and tanh at the end.
pub fn build_generator(cfg: GeneratorConfig) -> Result<NetworkSpec> {
    let b = cfg.base_channels;
    if cfg.z_dim == 0 {
        return Err(invalid("generator latent size must be at least 1"));
    }
    if b < 4 || !b.is_multiple_of(4) {
        return Err(invalid(format!("generator base channels {b} must be a positive multiple of 4")));
    }
    let up = |cin, cout| LayerDesc::ConvTranspose { cin, cout, k: 4, stride: 2, padding: 1 };
    let layers = vec![
        LayerDesc::Dense { inputs: cfg.z_dim, outputs: 16 * b },
        LayerDesc::Reshape { shape: vec![b, 4, 4] },
        LayerDesc::BatchNorm { channels: b },
        act(Activation::LEAKY_RELU),
        up(b, b / 2),
        LayerDesc::BatchNorm { channels: b / 2 },
        act(Activation::LEAKY_RELU),
        up(b / 2, b / 4),
        LayerDesc::BatchNorm { channels: b / 4 },
        act(Activation::LEAKY_RELU),
        up(b / 4, 1),
        act(Activation::Tanh),
    ];
    Ok(NetworkSpec { name: "generator".into(), input: vec![cfg.z_dim], spatial_multiple: 1, layers })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub base_channels: usize,
    pub dropout: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { base_channels: 32, dropout: 0.3 }
    }
}

/// Two stride-2 convolutions (base, 2*base channels) with LReLU and dropout,
/// then a dense layer to one unbounded score.
pub fn build_critic(cfg: CriticConfig) -> Result<NetworkSpec> {
    let b = cfg.base_channels;
    if b == 0 {
        return Err(invalid("critic base channels must be at least 1"));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(invalid(format!("dropout rate {} outside [0, 1)", cfg.dropout)));
    }
    let side = PATCH_SIDE / 4;
    let layers = vec![
        conv(1, b, 4, 2, 1),
        act(Activation::LEAKY_RELU),
        LayerDesc::Dropout { rate: cfg.dropout },
        conv(b, 2 * b, 4, 2, 1),
        act(Activation::LEAKY_RELU),
        LayerDesc::Dropout { rate: cfg.dropout },
        LayerDesc::Flatten,
        LayerDesc::Dense { inputs: 2 * b * side * side, outputs: 1 },
    ];
    Ok(NetworkSpec { name: "critic".into(), input: vec![1, PATCH_SIDE, PATCH_SIDE], spatial_multiple: 1, layers })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub channels: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { depth: 4, base_channels: 16, channels: 3 }
    }
}

/// Encoder levels of two 3x3 conv + ReLU followed by 2x2 max pooling with
/// channels doubling, a two-conv bottleneck, decoder levels of a 2x2 stride-2
/// transposed conv, skip concatenation and two convs, and a 1x1 sigmoid head.
pub fn build_unet(cfg: UnetConfig) -> Result<NetworkSpec> {
    if cfg.depth == 0 || cfg.base_channels == 0 || cfg.channels == 0 {
        return Err(invalid("U-Net depth, width and channel count must be at least 1"));
    }
    let mut layers = Vec::new();
    let double = |layers: &mut Vec<LayerDesc>, cin, cout| {
        layers.extend([conv(cin, cout, 3, 1, 1), act(Activation::Relu), conv(cout, cout, 3, 1, 1), act(Activation::Relu)]);
    };
    let mut cin = cfg.channels;
    for level in 0..cfg.depth {
        let ch = cfg.base_channels << level;
        double(&mut layers, cin, ch);
        layers.extend([LayerDesc::PushSkip, LayerDesc::MaxPool { k: 2 }]);
        cin = ch;
    }
    let bottom = cfg.base_channels << cfg.depth;
    double(&mut layers, cin, bottom);
    cin = bottom;
    for level in (0..cfg.depth).rev() {
        let ch = cfg.base_channels << level;
        layers.extend([LayerDesc::ConvTranspose { cin, cout: ch, k: 2, stride: 2, padding: 0 }, LayerDesc::ConcatSkip]);
        double(&mut layers, 2 * ch, ch);
        cin = ch;
    }
    layers.extend([conv(cin, cfg.channels, 1, 1, 0), act(Activation::Sigmoid)]);
    Ok(NetworkSpec {
        name: "unet".into(),
        input: vec![cfg.channels, 0, 0],
        spatial_multiple: 1 << cfg.depth,
        layers,
    })
}

pub const FEATURE_CHANNELS: [usize; 3] = [16, 32, 64];

/// Three stages of 3x3 conv + ReLU + 2x2 average pooling.
pub fn build_feature_net(channels: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut cin = channels;
    for ch in FEATURE_CHANNELS {
        layers.extend([conv(cin, ch, 3, 1, 1), act(Activation::Relu), LayerDesc::AvgPool { k: 2 }]);
        cin = ch;
    }
    NetworkSpec {
        name: "features".into(),
        input: vec![channels, 0, 0],
        spatial_multiple: 1 << FEATURE_CHANNELS.len(),
        layers,
    }
}
