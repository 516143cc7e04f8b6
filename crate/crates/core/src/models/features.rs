use std::path::Path;

use snowkit_tensor::{FeatureExtractor, Graph, Var};

use crate::error::Result;
use crate::models::builders::build_feature_net;
use crate::models::network::{ForwardCtx, Network};
use crate::models::weights::load_weights;

/// Frozen convolutional feature extractor for the perceptual loss. Weights
/// are registered as constants, so no gradient ever reaches them.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    net: Network,
}

impl FeatureNet {
    /// Random He-normal weights drawn once from `seed`.
    pub fn random(channels: usize, seed: u64) -> Result<Self> {
        Ok(Self { net: Network::init(build_feature_net(channels), seed)? })
    }

    /// Externally supplied weights in the weight-file format.
    pub fn load(channels: usize, path: &Path) -> Result<Self> {
        let spec = build_feature_net(channels);
        let weights = load_weights(path, &spec)?;
        Ok(Self { net: Network::from_weights(spec, &weights)? })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }
}

impl FeatureExtractor for FeatureNet {
    fn features(&self, g: &mut Graph, x: Var) -> snowkit_tensor::Result<Var> {
        // spec violations surface as tensor shape errors
        self.net.forward(g, x, &mut ForwardCtx::eval()).map(|o| o.output).map_err(|e| match e {
            crate::error::Error::Tensor(t) => t,
            other => snowkit_tensor::TensorError::InvalidArgument { op: "features", detail: other.to_string() },
        })
    }
}
