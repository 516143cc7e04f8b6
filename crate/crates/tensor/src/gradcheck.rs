//! Central finite-difference gradient checking.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so gradients at the
    /// level of rounding noise are compared absolutely.
    pub floor: f64,
    /// How many times the step is divided by 4 when a stencil straddles a
    /// kink of a piecewise op.
    pub refinements: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, floor: 1e-6, refinements: 5 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst element, e.g. `input[0][17]` or `param 0.conv.weight[3]`.
    pub worst: String,
    pub checked: usize,
    /// Elements whose default stencil crossed a kink and were compared at a
    /// smaller step instead.
    pub refined: usize,
    /// Elements where every stencil crossed a kink; these are not compared.
    pub skipped: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: Option<(f64, usize)>, floor: f64, label: impl FnOnce() -> String) {
        let Some((numeric, refinements)) = numeric else {
            self.skipped += 1;
            return;
        };
        self.refined += usize::from(refinements > 0);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = label();
        }
    }
}

type LossFn<'a> = dyn FnMut(&mut Graph, &mut ParamStore, &[Var]) -> Result<Var> + 'a;

/// Loss value and branch signature of one evaluation.
fn loss_value(f: &mut LossFn<'_>, store: &mut ParamStore, inputs: &[Tensor]) -> Result<(f64, u64)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    let value = g
        .value(out)
        .item()
        .ok_or_else(|| invalid("grad_check", "loss is not a single element"))?;
    Ok((value, g.branch_signature()))
}

/// Central difference of `eval` around the current point, shrinking the step
/// while the stencil leaves the linear piece identified by `centre`.
/// Returns the estimate and the number of refinements, or `None` if every
/// stencil crossed a kink.
fn central_difference(
    cfg: &GradCheckConfig,
    centre: u64,
    mut eval: impl FnMut(f64) -> Result<(f64, u64)>,
) -> Result<Option<(f64, usize)>> {
    let mut h = cfg.step;
    for attempt in 0..=cfg.refinements {
        let (plus, sp) = eval(h)?;
        let (minus, sm) = eval(-h)?;
        if sp == centre && sm == centre {
            return Ok(Some(((plus - minus) / (2.0 * h), attempt)));
        }
        h /= 4.0;
    }
    Ok(None)
}

/// Compares analytic gradients against central differences for every input
/// element and every trainable parameter element, returning the worst
/// relative error.
///
/// ReLU, leaky ReLU and max pooling are piecewise, so a stencil may straddle
/// a kink even when the function is differentiable at the checked point.
/// Such stencils are detected from the branch signature and retried with a
/// smaller step; see [`GradCheckReport::refined`] and
/// [`GradCheckReport::skipped`].
///
/// `f` must build a single-element loss deterministically from the inputs and
/// the current contents of `store`; it is re-run twice per checked element.
pub fn grad_check<F>(store: &mut ParamStore, inputs: &[Tensor], cfg: GradCheckConfig, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &mut ParamStore, &[Var]) -> Result<Var>,
{
    let f: &mut LossFn<'_> = &mut f;

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    let centre = g.branch_signature();
    let grads = g.backward(out)?;
    let input_grads: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.wrt(v).cloned()).collect();
    let param_grads: Vec<(ParamId, Option<Tensor>)> = store
        .trainable_ids()
        .into_iter()
        .map(|id| (id, grads.param(id).cloned()))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0, refined: 0, skipped: 0 };

    let mut perturbed = inputs.to_vec();
    for (i, grad) in input_grads.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            let numeric = central_difference(&cfg, centre, |d| {
                perturbed[i].data_mut()[j] = orig + d;
                let r = loss_value(f, store, &perturbed);
                perturbed[i].data_mut()[j] = orig;
                r
            })?;
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[j]);
            report.record(analytic, numeric, cfg.floor, || format!("input[{i}][{j}]"));
        }
    }

    for (id, grad) in param_grads {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            let numeric = central_difference(&cfg, centre, |d| {
                store.get_mut(id).data_mut()[j] = orig + d;
                let r = loss_value(f, store, inputs);
                store.get_mut(id).data_mut()[j] = orig;
                r
            })?;
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[j]);
            report.record(analytic, numeric, cfg.floor, || format!("param {}[{j}]", store.entry(id).name));
        }
    }
    Ok(report)
}
