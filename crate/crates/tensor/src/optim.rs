//! First-order optimizers behind a common [`Optimizer`] trait.
//!
//! [`OptimizerConfig`] is the serializable selector used by training configs;
//! [`OptimizerConfig::from_name`] resolves a name to its default hyper-parameters.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::graph::Gradients;
use crate::params::{ParamId, ParamKind, ParamStore};

pub trait Optimizer {
    fn name(&self) -> &'static str;

    /// Applies one update to every trainable parameter that has a gradient.
    fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()>;

    /// Number of completed steps.
    fn steps(&self) -> u64;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam(AdamConfig),
    Rmsprop(RmsPropConfig),
}

impl OptimizerConfig {
    pub const NAMES: [&'static str; 2] = ["adam", "rmsprop"];

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "adam" => Some(Self::Adam(AdamConfig::default())),
            "rmsprop" => Some(Self::Rmsprop(RmsPropConfig::default())),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Adam(_) => "adam",
            Self::Rmsprop(_) => "rmsprop",
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Self::Adam(c) => c.lr,
            Self::Rmsprop(c) => c.lr,
        }
    }

    pub fn build(&self) -> Box<dyn Optimizer> {
        match *self {
            Self::Adam(cfg) => Box::new(Adam::new(cfg)),
            Self::Rmsprop(cfg) => Box::new(RmsProp::new(cfg)),
        }
    }
}

/// One bias-corrected Adam update; `t` is the 1-based step number.
pub fn adam_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// One RMSprop update: `v ← ρv + (1−ρ)g²; θ ← θ − lr·g/(√v + ε)`.
pub fn rmsprop_update(theta: &mut [f64], grad: &[f64], v: &mut [f64], cfg: &RmsPropConfig) {
    for ((p, &g), v) in theta.iter_mut().zip(grad).zip(v.iter_mut()) {
        *v = cfg.rho * *v + (1.0 - cfg.rho) * g * g;
        *p -= cfg.lr * g / (v.sqrt() + cfg.eps);
    }
}

fn trainable_grads<'a>(
    store: &ParamStore,
    grads: &'a Gradients,
) -> Result<Vec<(ParamId, &'a [f64])>> {
    let mut out = Vec::new();
    for id in grads.param_ids() {
        if id.0 >= store.len() || store.entry(id).kind != ParamKind::Trainable {
            continue;
        }
        let Some(g) = grads.param(id) else { continue };
        if g.shape() != store.get(id).shape() {
            return Err(shape_err(
                "optimizer",
                format!("gradient {:?} for parameter {:?}", g.shape(), store.get(id).shape()),
            ));
        }
        out.push((id, g.data()));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

/// Per-parameter moment buffers, created lazily on first use.
#[derive(Clone, Debug, Default)]
struct Moments {
    slots: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Moments {
    fn get(&mut self, id: ParamId, len: usize) -> Result<&mut (Vec<f64>, Vec<f64>)> {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        let slot = self.slots[id.0].get_or_insert_with(|| (vec![0.0; len], vec![0.0; len]));
        if slot.0.len() != len {
            return Err(invalid("optimizer", "parameter changed size between steps"));
        }
        Ok(slot)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    moments: Moments,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, moments: Moments::default() }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let updates = trainable_grads(store, grads)?;
        self.t += 1;
        for (id, g) in updates {
            let (m, v) = self.moments.get(id, g.len())?;
            adam_update(store.get_mut(id).data_mut(), g, m, v, self.t, &self.cfg);
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.t
    }
}

#[derive(Clone, Debug)]
pub struct RmsProp {
    cfg: RmsPropConfig,
    t: u64,
    moments: Moments,
}

impl RmsProp {
    pub fn new(cfg: RmsPropConfig) -> Self {
        Self { cfg, t: 0, moments: Moments::default() }
    }
}

impl Optimizer for RmsProp {
    fn name(&self) -> &'static str {
        "rmsprop"
    }

    fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let updates = trainable_grads(store, grads)?;
        self.t += 1;
        for (id, g) in updates {
            let (_, v) = self.moments.get(id, g.len())?;
            rmsprop_update(store.get_mut(id).data_mut(), g, v, &self.cfg);
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.t
    }
}

/// Clamps every trainable element to `[-c, c]`.
pub fn clip_weights(store: &mut ParamStore, c: f64) -> Result<()> {
    if c.is_nan() || c <= 0.0 {
        return Err(invalid("clip_weights", format!("clip constant {c} must be positive")));
    }
    for id in store.trainable_ids() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = v.clamp(-c, c));
    }
    Ok(())
}
