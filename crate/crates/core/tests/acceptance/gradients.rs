//! Finite-difference checks of every differentiable op and of each network
//! at tiny widths, plus the conv / transposed-conv adjoint identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use snowkit::models::{
    build_critic, build_generator, build_unet, CriticConfig, FeatureNet, ForwardCtx, GeneratorConfig, Mode, Network,
    UnetConfig,
};
use snowkit_tensor::loss;
use snowkit_tensor::{grad_check, Activation, GradCheckConfig, GradCheckReport, Graph, ParamKind, ParamStore, Tensor, Var};

use crate::{ensure, Outcome};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TOL: f64 = 1e-4;
const ADJOINT_TOL: f64 = 1e-10;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, &mut rng(seed))
}

/// Random values with magnitude at least 0.05, keeping kinks out of reach.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mag = uniform(shape, 0.05, 1.0, seed);
    let sign = uniform(shape, -1.0, 1.0, seed ^ 1);
    Tensor::new(shape.to_vec(), mag.data().iter().zip(sign.data()).map(|(m, s)| m * s.signum()).collect()).unwrap()
}

/// Scalar probe `mse(y, fixed random target)`.
fn project(g: &mut Graph, y: Var, seed: u64) -> snowkit_tensor::Result<Var> {
    let target = g.constant(uniform(g.value(y).shape(), -1.0, 1.0, seed ^ 0xabcd));
    g.mse(y, target)
}

type Check = Box<dyn Fn(u64) -> snowkit_tensor::Result<GradCheckReport>>;

fn check<F>(store: &mut ParamStore, inputs: &[Tensor], f: F) -> snowkit_tensor::Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &mut ParamStore, &[Var]) -> snowkit_tensor::Result<Var>,
{
    let report = grad_check(store, inputs, GradCheckConfig::default(), f)?;
    assert!(report.checked > 0, "nothing checked");
    Ok(report)
}

/// Fresh networks have all-zero biases, which puts units fed by dead ReLUs
/// exactly on a kink. Offsetting every parameter gives a generic point.
fn jitter(params: &ParamStore, seed: u64) -> ParamStore {
    let mut p = params.clone();
    for (i, id) in p.trainable_ids().into_iter().enumerate() {
        let t = p.get_mut(id);
        let offsets = uniform(t.shape(), -0.1, 0.1, seed * 1000 + i as u64);
        t.data_mut().iter_mut().zip(offsets.data()).for_each(|(v, o)| *v += o);
    }
    p
}

fn affine(seed: u64, w: &[usize], b: usize) -> (ParamStore, snowkit_tensor::ParamId, snowkit_tensor::ParamId) {
    let mut s = ParamStore::new();
    let wi = s.add("w", uniform(w, -0.5, 0.5, seed), ParamKind::Trainable);
    let bi = s.add("b", uniform(&[b], -0.5, 0.5, seed ^ 2), ParamKind::Trainable);
    (s, wi, bi)
}

struct Feat;

impl snowkit_tensor::FeatureExtractor for Feat {
    fn features(&self, g: &mut Graph, x: Var) -> snowkit_tensor::Result<Var> {
        let w = g.constant(uniform(&[4, 3, 3, 3], -0.5, 0.5, 77));
        let h = g.conv2d(x, w, None, 2, 1)?;
        Ok(g.activation(h, Activation::Tanh))
    }
}

fn op_checks() -> Vec<(&'static str, Check)> {
    let mut v: Vec<(&'static str, Check)> = vec![
        ("conv2d", Box::new(|s| {
            let (mut st, w, b) = affine(s, &[3, 2, 3, 3], 3);
            check(&mut st, &[uniform(&[2, 2, 7, 7], -1.0, 1.0, s + 10)], |g, p, x| {
                let (w, b) = (g.param(p, w), g.param(p, b));
                let y = g.conv2d(x[0], w, Some(b), 2, 1)?;
                project(g, y, s)
            })
        })),
        ("conv_transpose2d", Box::new(|s| {
            let (mut st, w, b) = affine(s, &[2, 3, 4, 4], 3);
            check(&mut st, &[uniform(&[2, 2, 3, 3], -1.0, 1.0, s + 20)], |g, p, x| {
                let (w, b) = (g.param(p, w), g.param(p, b));
                let y = g.conv_transpose2d(x[0], w, Some(b), 2, 1)?;
                project(g, y, s)
            })
        })),
        ("maxpool2d", Box::new(|s| {
            check(&mut ParamStore::new(), &[uniform(&[2, 2, 4, 6], -1.0, 1.0, s + 30)], |g, _, x| {
                let y = g.maxpool2d(x[0], 2)?;
                project(g, y, s)
            })
        })),
        ("avgpool2d", Box::new(|s| {
            check(&mut ParamStore::new(), &[uniform(&[2, 2, 4, 6], -1.0, 1.0, s + 40)], |g, _, x| {
                let y = g.avgpool2d(x[0], 2)?;
                project(g, y, s)
            })
        })),
        ("batchnorm train", Box::new(|s| {
            let (mut st, gm, bt) = affine(s, &[3], 3);
            check(&mut st, &[uniform(&[2, 3, 3, 3], -1.0, 2.0, s + 50)], |g, p, x| {
                let (gm, bt) = (g.param(p, gm), g.param(p, bt));
                let (y, _) = g.batchnorm2d_train(x[0], gm, bt, 1e-5)?;
                project(g, y, s)
            })
        })),
        ("batchnorm eval", Box::new(|s| {
            let (mut st, gm, bt) = affine(s, &[3], 3);
            check(&mut st, &[uniform(&[2, 3, 3, 3], -1.0, 2.0, s + 60)], |g, p, x| {
                let (gm, bt) = (g.param(p, gm), g.param(p, bt));
                let y = g.batchnorm2d_eval(x[0], gm, bt, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
                project(g, y, s)
            })
        })),
        ("dense", Box::new(|s| {
            let (mut st, w, b) = affine(s, &[5, 3], 3);
            check(&mut st, &[uniform(&[4, 5], -1.0, 1.0, s + 70)], |g, p, x| {
                let (w, b) = (g.param(p, w), g.param(p, b));
                let y = g.dense(x[0], w, b)?;
                project(g, y, s)
            })
        })),
        ("dropout, concat, reshape", Box::new(|s| {
            let inputs = [uniform(&[2, 2, 3, 3], -1.0, 1.0, s + 80), uniform(&[2, 1, 3, 3], -1.0, 1.0, s + 81)];
            check(&mut ParamStore::new(), &inputs, |g, _, x| {
                let d = g.dropout(x[0], 0.3, &mut rng(s))?;
                let c = g.concat_channels(d, x[1])?;
                let flat = g.reshape(c, &[2, 27])?;
                project(g, flat, s)
            })
        })),
        ("add, sub, scale", Box::new(|s| {
            let inputs = [uniform(&[4, 1], -1.0, 1.0, s + 90), uniform(&[4, 1], -1.0, 1.0, s + 91)];
            check(&mut ParamStore::new(), &inputs, |g, _, x| {
                let a = g.add(x[0], x[1])?;
                let d = g.sub(a, x[1])?;
                let sc = g.scale(d, -2.5);
                g.mse(sc, x[1])
            })
        })),
        ("critic loss", Box::new(|s| {
            let inputs = [uniform(&[4, 1], -1.0, 1.0, s + 100), uniform(&[4, 1], -1.0, 1.0, s + 101)];
            check(&mut ParamStore::new(), &inputs, |g, _, x| loss::critic_loss_node(g, x[0], x[1]))
        })),
        ("generator loss", Box::new(|s| {
            check(&mut ParamStore::new(), &[uniform(&[4, 1], -1.0, 1.0, s + 110)], |g, _, x| loss::generator_loss_node(g, x[0]))
        })),
        ("combined loss", Box::new(|s| {
            let y = uniform(&[1, 3, 7, 7], 0.0, 1.0, s + 120);
            check(&mut ParamStore::new(), &[uniform(&[1, 3, 7, 7], 0.0, 1.0, s + 121)], |g, _, x| {
                let t = g.constant(y.clone());
                Ok(loss::combined_loss_node(g, &Feat, t, x[0], 1.0)?.total)
            })
        })),
    ];
    for (name, kind) in [
        ("leaky relu", Activation::LEAKY_RELU),
        ("relu", Activation::Relu),
        ("tanh", Activation::Tanh),
        ("sigmoid", Activation::Sigmoid),
    ] {
        v.push((name, Box::new(move |s| {
            check(&mut ParamStore::new(), &[away_from_zero(&[3, 7], s + 130)], |g, _, x| {
                let y = g.activation(x[0], kind);
                project(g, y, s)
            })
        })));
    }
    v
}

/// Checks gradients of a whole network by evaluating it with the perturbed
/// parameter store.
fn network_check(
    net: &Network,
    inputs: &[Tensor],
    mode: Mode,
    seed: u64,
    head: impl Fn(&mut Graph, &[Var], u64) -> snowkit_tensor::Result<Var>,
) -> snowkit_tensor::Result<GradCheckReport> {
    let mut store = jitter(net.params(), seed);
    check(&mut store, inputs, |g, p, x| {
        let mut dropout_rng = rng(seed);
        let mut outs = Vec::new();
        for &xi in x {
            let mut ctx = ForwardCtx { mode, rng: Some(&mut dropout_rng), frozen: false };
            let out = net.forward_with(p, g, xi, &mut ctx).map_err(to_tensor_err)?;
            outs.push(out.output);
        }
        head(g, &outs, seed)
    })
}

fn to_tensor_err(e: snowkit::Error) -> snowkit_tensor::TensorError {
    snowkit_tensor::TensorError::InvalidArgument { op: "network", detail: e.to_string() }
}

fn network_checks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>, snowkit::Error> {
    let unet = Network::init(build_unet(UnetConfig { depth: 2, base_channels: 2, channels: 3 })?, seed)?;
    let phi = FeatureNet::random(3, seed + 1000)?;
    let target = uniform(&[2, 3, 8, 8], 0.0, 1.0, seed + 1);
    let e_unet = network_check(&unet, &[uniform(&[2, 3, 8, 8], 0.0, 1.0, seed)], Mode::Train, seed, |g, o, _| {
        let t = g.constant(target.clone());
        Ok(loss::combined_loss_node(g, &phi, t, o[0], 1.0)?.total)
    })?;

    let critic = Network::init(build_critic(CriticConfig { base_channels: 2, dropout: 0.3 })?, seed)?;
    let fake = uniform(&[2, 1, 32, 32], -1.0, 1.0, seed + 2);
    let real = uniform(&[2, 1, 32, 32], -1.0, 1.0, seed + 3);
    let e_critic = network_check(&critic, &[fake, real], Mode::Train, seed, |g, o, _| loss::critic_loss_node(g, o[0], o[1]))?;

    let generator = Network::init(build_generator(GeneratorConfig { base_channels: 4, z_dim: 3 })?, seed)?;
    let z = uniform(&[3, 3], -1.0, 1.0, seed + 4);
    let e_gen = network_check(&generator, &[z], Mode::Train, seed, |g, o, s| project(g, o[0], s))?;

    let feature = FeatureNet::random(3, seed)?.network().clone();
    let e_feat = network_check(&feature, &[uniform(&[1, 3, 8, 8], 0.0, 1.0, seed + 5)], Mode::Eval, seed, |g, o, s| {
        project(g, o[0], s)
    })?;
    Ok(vec![
        ("U-Net + combined loss", e_unet),
        ("critic + critic loss", e_critic),
        ("generator", e_gen),
        ("feature net", e_feat),
    ])
}

#[allow(clippy::too_many_arguments)]
fn adjoint_gap(seed: u64, n: usize, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, out: usize) -> f64 {
    let h = (out - 1) * stride + k - 2 * pad;
    let x = uniform(&[n, cin, h, h], -1.0, 1.0, seed);
    let y = uniform(&[n, cout, out, out], -1.0, 1.0, seed + 1);
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let w = g.constant(uniform(&[cout, cin, k, k], -1.0, 1.0, seed + 2));
    let cx = g.conv2d(xv, w, None, stride, pad).unwrap();
    let ty = g.conv_transpose2d(yv, w, None, stride, pad).unwrap();
    let lhs = g.value(cx).dot(&y);
    (lhs - x.dot(g.value(ty))).abs() / lhs.abs().max(1.0)
}

pub fn run() -> Outcome {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let (mut checked, mut refined, mut skipped) = (0, 0, 0);
    let mut record = |name: &str, r: GradCheckReport| {
        checked += r.checked;
        refined += r.refined;
        skipped += r.skipped;
        match worst.iter_mut().find(|(n, _)| n == name) {
            Some(w) => w.1 = w.1.max(r.max_rel_error),
            None => worst.push((name.to_string(), r.max_rel_error)),
        }
    };
    let ops = op_checks();
    for seed in SEEDS {
        for (name, f) in &ops {
            record(name, f(seed).map_err(|e| format!("{name}: {e}"))?);
        }
        for (name, r) in network_checks(seed).map_err(|e| e.to_string())? {
            record(name, r);
        }
    }
    ensure(skipped == 0, || format!("{skipped} elements sit on a kink and could not be checked"))?;
    let bad: Vec<String> = worst.iter().filter(|(_, e)| e.is_nan() || *e > TOL).map(|(n, e)| format!("{n} {e:.2e}")).collect();
    ensure(bad.is_empty(), || format!("relative error above {TOL:e}: {}", bad.join(", ")))?;

    let mut adjoint: f64 = 0.0;
    for seed in SEEDS {
        for &(n, cin, cout, k, stride, pad, out) in
            &[(2, 3, 4, 4, 2, 1, 4), (1, 2, 2, 3, 1, 1, 5), (1, 1, 3, 2, 2, 0, 3), (2, 4, 2, 3, 2, 1, 6)]
        {
            adjoint = adjoint.max(adjoint_gap(seed * 31, n, cin, cout, k, stride, pad, out));
        }
    }
    ensure(adjoint <= ADJOINT_TOL, || format!("adjoint gap {adjoint:e}"))?;

    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Ok(format!(
        "{} cases x {} seeds, {checked} elements ({refined} at a reduced step), worst relative error {max:.1e}, adjoint gap {adjoint:.1e}",
        worst.len(),
        SEEDS.len()
    ))
}
