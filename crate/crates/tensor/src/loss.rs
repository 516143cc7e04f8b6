//! Training objectives.
//!
//! Slice versions evaluate a loss on plain numbers; the `*_node` versions
//! record the same computation on a [`Graph`] so it can be differentiated.

use crate::error::{shape_err, Result, TensorError};
use crate::graph::{Graph, Var};

/// Maps an image batch to feature maps for the perceptual loss.
pub trait FeatureExtractor {
    fn features(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

/// `Φ(x) = x`; reduces the perceptual loss to plain MSE.
pub struct IdentityFeatures;

impl FeatureExtractor for IdentityFeatures {
    fn features(&self, _g: &mut Graph, x: Var) -> Result<Var> {
        Ok(x)
    }
}

pub fn mse_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(shape_err("mse_loss", format!("{} vs {} elements", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(TensorError::EmptyBatch { op: "mse_loss" });
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

/// Critic objective: `(1/N) Σ (d_fake_i − d_real_i)`.
pub fn critic_loss(d_fake: &[f64], d_real: &[f64]) -> Result<f64> {
    if d_fake.len() != d_real.len() {
        return Err(shape_err(
            "critic_loss",
            format!("{} fake vs {} real scores", d_fake.len(), d_real.len()),
        ));
    }
    if d_fake.is_empty() {
        return Err(TensorError::EmptyBatch { op: "critic_loss" });
    }
    Ok(d_fake.iter().zip(d_real).map(|(f, r)| f - r).sum::<f64>() / d_fake.len() as f64)
}

/// Generator objective: `−(1/N) Σ d_fake_i`.
pub fn generator_loss(d_fake: &[f64]) -> Result<f64> {
    if d_fake.is_empty() {
        return Err(TensorError::EmptyBatch { op: "generator_loss" });
    }
    Ok(-(d_fake.iter().sum::<f64>() / d_fake.len() as f64))
}

pub fn mse_loss_node(g: &mut Graph, y: Var, y_hat: Var) -> Result<Var> {
    g.mse(y, y_hat)
}

pub fn critic_loss_node(g: &mut Graph, d_fake: Var, d_real: Var) -> Result<Var> {
    if g.value(d_fake).is_empty() {
        return Err(TensorError::EmptyBatch { op: "critic_loss" });
    }
    let diff = g.sub(d_fake, d_real)?;
    g.mean(diff, "critic_loss")
}

pub fn generator_loss_node(g: &mut Graph, d_fake: Var) -> Result<Var> {
    let mean = g.mean(d_fake, "generator_loss")?;
    Ok(g.scale(mean, -1.0))
}

/// MSE between the feature maps of `y` and `y_hat`. `y` should be a constant
/// node and the extractor's weights frozen, so gradients reach only `y_hat`.
pub fn perceptual_loss_node(g: &mut Graph, phi: &dyn FeatureExtractor, y: Var, y_hat: Var) -> Result<Var> {
    let fy = phi.features(g, y)?;
    let fy_hat = phi.features(g, y_hat)?;
    g.mse(fy, fy_hat)
}

/// Parts of `L = L_mse + γ L_p`.
#[derive(Clone, Copy, Debug)]
pub struct CombinedLoss {
    pub total: Var,
    pub mse: Var,
    /// Not computed when `γ = 0`.
    pub perceptual: Option<Var>,
}

pub fn combined_loss_node(
    g: &mut Graph,
    phi: &dyn FeatureExtractor,
    y: Var,
    y_hat: Var,
    gamma: f64,
) -> Result<CombinedLoss> {
    let mse = g.mse(y, y_hat)?;
    if gamma == 0.0 {
        return Ok(CombinedLoss { total: mse, mse, perceptual: None });
    }
    let perceptual = perceptual_loss_node(g, phi, y, y_hat)?;
    let weighted = g.scale(perceptual, gamma);
    let total = g.add(mse, weighted)?;
    Ok(CombinedLoss {
        total,
        mse,
        perceptual: Some(perceptual),
    })
}
