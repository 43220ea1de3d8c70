//! Central finite-difference checks for every graph op and both goodness
//! functions, shared by the gradient tests and the acceptance run.

use bridge_pet::bridges::{BridgeKind, BridgeSpec};
use bridge_pet::latent_map::{goodness_pdf_graph, goodness_sde_graph, sde_noise, MapConfig, MapMethod, MapNet};
use bridge_pet::tensor::{Graph, OpKind, Tensor, Var};
use bridge_pet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradCheck {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.tol && self.trials >= TRIALS
    }
}

const H: f64 = 1e-5;
pub const TRIALS: usize = 20;

type Build<'a> = dyn Fn(&mut Graph, &[Tensor]) -> Result<(Var, Vec<Var>)> + 'a;

/// Worst relative error, over all inputs, between the analytic gradient and
/// central differences of the scalar root.
fn max_rel_error(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let (root, vars) = build(&mut g, inputs).unwrap();
    let grads = g.backward(root).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let (root, _) = build(&mut g, xs).unwrap();
        g.value(root).item()
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * H);
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.norm().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt()).max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries bounded away from zero, for ops with a kink or a pole there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let m: f64 = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces a matrix output to a scalar through fixed random weights, so every
/// output entry contributes a distinct amount.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::randn(g.value(y).shape(), 1.0, &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check_op(name: &str, make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, kind: OpKind, tol: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let inputs = make_inputs(&mut rng);
        let build = |g: &mut Graph, xs: &[Tensor]| -> Result<(Var, Vec<Var>)> {
            let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
            let y = g.apply(kind.clone(), &vars)?;
            let root = if g.value(y).numel() == 1 { y } else { weighted_sum(g, y, trial as u64)? };
            Ok((root, vars))
        };
        worst = worst.max(max_rel_error(&inputs, &build));
    }
    GradCheck {
        name: name.to_string(),
        trials: TRIALS,
        worst,
        tol,
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

/// One check per op kind, broadcasting and axis variants included.
pub fn op_checks() -> Vec<GradCheck> {
    let mut out = vec![check_op(
        "matmul",
        |r| {
            let (n, k, m) = dims(r);
            vec![randn(r, &[n, k]), randn(r, &[k, m])]
        },
        OpKind::MatMul,
        1e-4,
    )];
    for (name, kind) in [("add", OpKind::Add), ("sub", OpKind::Sub), ("mul", OpKind::ElementwiseMul)] {
        out.push(check_op(
            name,
            |r| {
                let (n, m, _) = dims(r);
                vec![randn(r, &[n, m]), randn(r, &[n, m])]
            },
            kind.clone(),
            1e-4,
        ));
        out.push(check_op(
            &format!("{name}-broadcast"),
            |r| {
                let (n, m, _) = dims(r);
                vec![randn(r, &[n + 1, m]), randn(r, &[1, m])]
            },
            kind,
            1e-4,
        ));
    }
    out.push(check_op("scalar_mul", |r| vec![randn(r, &[3, 2])], OpKind::ScalarMul(-1.7), 1e-4));
    for axis in [0, 1] {
        out.push(check_op(
            &format!("mean{axis}"),
            |r| {
                let (n, m, _) = dims(r);
                vec![randn(r, &[n, m])]
            },
            OpKind::MeanOverAxis(axis),
            1e-4,
        ));
    }
    out.push(check_op(
        "concat0",
        |r| {
            let (n, m, k) = dims(r);
            vec![randn(r, &[n, m]), randn(r, &[k, m]), randn(r, &[1, m])]
        },
        OpKind::Concat(0),
        1e-4,
    ));
    out.push(check_op(
        "concat1",
        |r| {
            let (n, m, k) = dims(r);
            vec![randn(r, &[n, m]), randn(r, &[n, k])]
        },
        OpKind::Concat(1),
        1e-4,
    ));
    out.push(check_op("slice_rows", |r| vec![randn(r, &[5, 3])], OpKind::SliceRows { start: 1, len: 3 }, 1e-4));
    out.push(check_op("slice_cols", |r| vec![randn(r, &[3, 5])], OpKind::SliceCols { start: 2, len: 2 }, 1e-4));
    // repeated indices must accumulate
    out.push(check_op("gather", |r| vec![randn(r, &[4, 3])], OpKind::GatherRows(vec![2, 0, 2, 3, 2]), 1e-4));
    out.push(check_op("transpose", |r| vec![randn(r, &[2, 5])], OpKind::Transpose, 1e-4));
    out.push(check_op(
        "softmax",
        |r| {
            let (n, m, _) = dims(r);
            vec![randn(r, &[n, m + 1])]
        },
        OpKind::Softmax,
        1e-4,
    ));
    out.push(check_op(
        "layer_norm",
        |r| {
            let (n, m, _) = dims(r);
            vec![randn(r, &[n, m + 2])]
        },
        OpKind::LayerNorm { eps: 1e-5 },
        1e-4,
    ));
    out.push(check_op("gelu", |r| vec![randn(r, &[3, 4])], OpKind::Gelu, 1e-4));
    out.push(check_op("relu", |r| vec![away_from_zero(r, &[3, 4])], OpKind::Relu, 1e-4));
    out.push(check_op("square", |r| vec![randn(r, &[3, 4])], OpKind::Square, 1e-4));
    out.push(check_op("sum", |r| vec![randn(r, &[3, 4])], OpKind::Sum, 1e-4));
    out.push(check_op("log", |r| vec![away_from_zero(r, &[3, 4]).map(f64::abs)], OpKind::Log, 1e-4));
    out.push(check_op(
        "cross_entropy",
        |r| vec![randn(r, &[3, 5])],
        OpKind::CrossEntropyWithLogits(vec![4, 0, 4]),
        1e-4,
    ));
    out
}

fn small_map(method: MapMethod, seed: u64) -> MapNet {
    let cfg = MapConfig {
        method,
        hidden_dim: 3,
        widths: [6, 5],
        latent_dim: 2,
    };
    let mut map = MapNet::init(cfg, seed).unwrap();
    // nonzero biases so the relu pattern is generic
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in map.tensors_mut() {
        if t.rows() == 1 {
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
    }
    map
}

/// Differentiates with respect to the map parameters and the knot matrix.
pub fn goodness_check(method: MapMethod, kind: BridgeKind) -> GradCheck {
    let tol = match method {
        MapMethod::Pdf => 1e-4,
        MapMethod::Sde => 1e-3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11 + kind as u64);
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let map = small_map(method, trial as u64);
        let knots = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let beta: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = BridgeSpec::new(kind, beta, 1.0, 0.8, 1.3).unwrap();
        let noise = sde_noise(8, 2, &mut rng);
        let mut inputs: Vec<Tensor> = map.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        inputs.push(knots);
        let build = |g: &mut Graph, xs: &[Tensor]| -> Result<(Var, Vec<Var>)> {
            let mut m = map.clone();
            for (slot, x) in m.tensors_mut().into_iter().zip(xs) {
                *slot = x.clone();
            }
            let vars = m.bind(g, true);
            let k = g.param(xs[6].clone());
            let root = match method {
                MapMethod::Pdf => goodness_pdf_graph(g, &vars, k, &spec)?,
                MapMethod::Sde => goodness_sde_graph(g, &vars, k, &spec, 8, &noise)?,
            };
            let mut all = vars.all();
            all.push(k);
            Ok((root, all))
        };
        worst = worst.max(max_rel_error(&inputs, &build));
    }
    GradCheck {
        name: format!("goodness_{method}_{kind:?}").to_lowercase(),
        trials: TRIALS,
        worst,
        tol,
    }
}

pub fn all_checks() -> Vec<GradCheck> {
    let mut out = op_checks();
    for method in [MapMethod::Pdf, MapMethod::Sde] {
        for kind in [BridgeKind::Brownian, BridgeKind::Ou] {
            out.push(goodness_check(method, kind));
        }
    }
    out
}
