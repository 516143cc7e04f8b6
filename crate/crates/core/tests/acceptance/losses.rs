//! Exact values of the Wasserstein objectives and the combined loss.

use snowkit::models::FeatureNet;
use snowkit_tensor::loss::{combined_loss_node, critic_loss, critic_loss_node, generator_loss, generator_loss_node, mse_loss};
use snowkit_tensor::{Graph, Tensor};

use crate::{ensure, Outcome};

fn node_value(build: impl FnOnce(&mut Graph) -> snowkit_tensor::Result<snowkit_tensor::Var>) -> Result<f64, String> {
    let mut g = Graph::new();
    let v = build(&mut g).map_err(|e| e.to_string())?;
    Ok(g.value(v).data()[0])
}

fn column(values: &[f64]) -> Tensor {
    Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
}

pub fn run() -> Outcome {
    let c = critic_loss(&[2.0], &[5.0]).map_err(|e| e.to_string())?;
    ensure(c == -3.0, || format!("critic_loss([2],[5]) = {c}"))?;
    let gl = generator_loss(&[2.0, 4.0]).map_err(|e| e.to_string())?;
    ensure(gl == -3.0, || format!("generator_loss([2,4]) = {gl}"))?;
    let cn = node_value(|g| {
        let (f, r) = (g.constant(column(&[2.0])), g.constant(column(&[5.0])));
        critic_loss_node(g, f, r)
    })?;
    let gn = node_value(|g| {
        let f = g.constant(column(&[2.0, 4.0]));
        generator_loss_node(g, f)
    })?;
    ensure(cn == -3.0 && gn == -3.0, || format!("graph versions give {cn} and {gn}"))?;

    let phi = FeatureNet::random(3, 11).map_err(|e| e.to_string())?;
    let mut r = snowkit::rng::seeded(4);
    let y = Tensor::rand_uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut r);
    let y_hat = Tensor::rand_uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut r);
    let plain_mse = mse_loss(y.data(), y_hat.data()).map_err(|e| e.to_string())?;
    for gamma in [0.0, 0.25, 1.0, 3.0] {
        let mut g = Graph::new();
        let (yv, hv) = (g.constant(y.clone()), g.constant(y_hat.clone()));
        let parts = combined_loss_node(&mut g, &phi, yv, hv, gamma).map_err(|e| e.to_string())?;
        let total = g.value(parts.total).data()[0];
        let mse = g.value(parts.mse).data()[0];
        ensure(mse == plain_mse, || format!("mse part {mse} vs {plain_mse}"))?;
        match parts.perceptual {
            None => ensure(gamma == 0.0 && total == mse, || format!("gamma {gamma}: total {total}, mse {mse}"))?,
            Some(p) => {
                let p = g.value(p).data()[0];
                ensure(gamma != 0.0 && p > 0.0 && total == mse + gamma * p, || {
                    format!("gamma {gamma}: total {total} != {mse} + {gamma} * {p}")
                })?
            }
        }
    }
    Ok("critic -3, generator -3, combined = mse + gamma * perceptual for gamma in {0, 0.25, 1, 3}".into())
}
