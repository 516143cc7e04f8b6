//! Network definitions, a generic interpreter for them, and weight files.

mod builders;
mod features;
mod network;
mod spec;
mod weights;

pub use builders::{
    build_critic, build_feature_net, build_generator, build_unet, CriticConfig, GeneratorConfig, UnetConfig,
    FEATURE_CHANNELS,
};
pub use features::FeatureNet;
pub use network::{ForwardCtx, ForwardOutput, Mode, Network};
pub use spec::{fnv1a64, LayerDesc, NetworkSpec, BATCHNORM_EPS, BATCHNORM_MOMENTUM};
pub use weights::{load_weights, save_weights, NamedTensor, WeightStore, FORMAT_VERSION, MAGIC};

use rand_distr::{Distribution, StandardNormal};
use snowkit_tensor::Tensor;

use crate::degrade::{PatchSet, PatchSource, PATCH_SIDE};
use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::rng;

const GENERATE_CHUNK: usize = 64;

/// Samples `n` latent vectors from N(0, 1), runs the generator in eval mode
/// and maps tanh outputs to `[0, 1]` with `(x + 1) / 2`.
pub fn generate_patches(generator: &Network, n: usize, seed: u64) -> Result<PatchSet> {
    if n == 0 {
        return Err(Error::Empty("requested patch set"));
    }
    let z_dim = match generator.spec().input[..] {
        [z] => z,
        _ => return Err(Error::ShapeMismatch("generator input must be a latent vector".into())),
    };
    let mut r = rng::seeded(seed);
    let mut patches = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let b = remaining.min(GENERATE_CHUNK);
        let z: Vec<f64> = (0..b * z_dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let out = generator.predict(&Tensor::new(vec![b, z_dim], z)?)?;
        if out.shape()[1..] != [1, PATCH_SIDE, PATCH_SIDE] {
            return Err(Error::ShapeMismatch(format!("generator produced {:?}", out.shape())));
        }
        for sample in out.data().chunks_exact(PATCH_SIDE * PATCH_SIDE) {
            let data = sample.iter().map(|v| (v + 1.0) / 2.0).collect();
            patches.push(Image::from_clamped(PATCH_SIDE, PATCH_SIDE, 1, data)?);
        }
        remaining -= b;
    }
    PatchSet::new(patches, PatchSource::Generated)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_parameter_count_matches_formula() {
        for b in [4, 8, 128] {
            let z = 100;
            let net = Network::init(build_generator(GeneratorConfig { base_channels: b, z_dim: z }).unwrap(), 1).unwrap();
            let (h, q) = (b / 2, b / 4);
            let want = (z * 16 * b + 16 * b) + 2 * b + (b * h * 16 + h) + 2 * h + (h * q * 16 + q) + 2 * q + (q * 16 + 1);
            assert_eq!(net.parameter_count(), want);
        }
    }

    #[test]
    fn unet_skip_channel_arithmetic() {
        let spec = build_unet(UnetConfig::default()).unwrap();
        let shapes = spec.infer_shapes(&[3, 64, 64]).unwrap();
        let concat_channels: Vec<usize> = spec
            .layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| matches!(l, LayerDesc::ConcatSkip))
            .map(|(_, s)| s[0])
            .collect();
        // decoder levels 3..0: upsampled (16 << l) plus skip (16 << l)
        assert_eq!(concat_channels, vec![256, 128, 64, 32]);
        assert_eq!(shapes.last().unwrap(), &vec![3, 64, 64]);
        assert!(spec.check_input(&[3, 72, 64]).is_err());
    }

    #[test]
    fn feature_shape_for_64() {
        let spec = build_feature_net(3);
        assert_eq!(spec.output_shape(&[3, 64, 64]).unwrap(), vec![64, 8, 8]);
    }

    #[test]
    fn builders_validate() {
        assert!(build_generator(GeneratorConfig { base_channels: 6, z_dim: 100 }).is_err());
        assert!(build_generator(GeneratorConfig { base_channels: 8, z_dim: 0 }).is_err());
        assert!(build_critic(CriticConfig { base_channels: 4, dropout: 1.0 }).is_err());
        assert!(build_unet(UnetConfig { depth: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn generate_patches_contract() {
        let g = Network::init(build_generator(GeneratorConfig { base_channels: 8, z_dim: 10 }).unwrap(), 3).unwrap();
        assert!(generate_patches(&g, 0, 1).is_err());
        let p = generate_patches(&g, 5, 1).unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(p.source(), PatchSource::Generated);
        assert_eq!(p, generate_patches(&g, 5, 1).unwrap());
        assert_ne!(p, generate_patches(&g, 5, 2).unwrap());
    }
}
