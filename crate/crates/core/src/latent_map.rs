//! The learnable projection from hidden states to the latent bridge space,
//! PCA endpoints, and the two goodness measures of a latent trajectory.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneState, HiddenTrace, Linear, LinearVars, NoHooks};
use crate::bridges::{BridgeKind, BridgeSpec};
use crate::error::{Error, Result};
use crate::pipeline::TaskSample;
use crate::snapshot::Snapshot;
use crate::spline::basis_weights;
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMethod {
    Pdf,
    Sde,
}

impl MapMethod {
    pub fn name(self) -> &'static str {
        match self {
            MapMethod::Pdf => "pdf",
            MapMethod::Sde => "sde",
        }
    }
}

impl fmt::Display for MapMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pdf" => Ok(MapMethod::Pdf),
            "sde" => Ok(MapMethod::Sde),
            _ => Err(Error::InvalidConfig(format!("unknown map method {s:?}"))),
        }
    }
}

/// Per-token bridge tails: PCA of the output embeddings, rows rescaled to `eta`.
#[derive(Clone, Debug, PartialEq)]
pub struct EndpointTable {
    pub beta: Tensor,
    pub eta: f64,
}

impl EndpointTable {
    pub fn latent_dim(&self) -> usize {
        self.beta.cols()
    }

    pub fn row(&self, token: usize) -> Result<&[f64]> {
        if token >= self.beta.rows() {
            return Err(Error::OutOfVocabulary {
                id: token,
                vocab: self.beta.rows(),
            });
        }
        Ok(self.beta.row(token))
    }

    pub fn to_snapshot(&self) -> Snapshot {
        Snapshot::new("endpoints", serde_json::json!({ "eta": self.eta }), vec![("beta".into(), self.beta.clone())])
    }

    pub fn from_snapshot(snap: &Snapshot) -> Result<Self> {
        if snap.kind != "endpoints" || snap.tensors.len() != 1 {
            return Err(Error::Snapshot("not an endpoint table".into()));
        }
        let eta = snap.header["eta"]
            .as_f64()
            .ok_or_else(|| Error::Snapshot("endpoint header lacks eta".into()))?;
        Ok(EndpointTable {
            beta: snap.tensors[0].1.clone(),
            eta,
        })
    }
}

/// Projects the mean-centred rows of `embeddings` (`[|V|, d]`) onto the top
/// `r` principal directions and rescales every row to norm `eta`. Each
/// direction is signed so its largest-magnitude component is positive.
pub fn build_endpoints(embeddings: &Tensor, r: usize, eta: f64) -> Result<EndpointTable> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if r == 0 || r >= d {
        return Err(Error::InvalidConfig(format!("latent dim {r} must be in 1..{d}")));
    }
    if n <= r {
        return Err(Error::InvalidConfig(format!("need more than {r} embeddings, got {n}")));
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidConfig(format!("eta must be positive, got {eta}")));
    }
    let x = DMatrix::from_row_slice(n, d, embeddings.data());
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let tol = top.abs().max(f64::MIN_POSITIVE) * 1e-10;
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    if rank < r {
        return Err(Error::DegenerateCovariance { achieved: rank, requested: r });
    }
    let mut dirs = DMatrix::zeros(d, r);
    for (k, &i) in order.iter().take(r).enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let lead = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        if v[lead] < 0.0 {
            v = -v;
        }
        dirs.set_column(k, &v);
    }
    let proj = centred * dirs;
    let scale = embeddings.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut beta = Vec::with_capacity(n * r);
    for i in 0..n {
        let row: Vec<f64> = (0..r).map(|k| proj[(i, k)]).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * scale {
            beta.push(eta);
            beta.extend(std::iter::repeat_n(0.0, r - 1));
        } else {
            beta.extend(row.iter().map(|v| v / norm * eta));
        }
    }
    Ok(EndpointTable {
        beta: Tensor::new(vec![n, r], beta)?,
        eta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub method: MapMethod,
    /// Hidden width `d` of the backbone; the input is `2d` (`2d + 1` for SDE).
    pub hidden_dim: usize,
    pub widths: [usize; 2],
    pub latent_dim: usize,
}

impl MapConfig {
    pub fn input_dim(&self) -> usize {
        2 * self.hidden_dim + usize::from(self.method == MapMethod::Sde)
    }
}

/// Three affine layers with relu between them.
#[derive(Clone, Debug, PartialEq)]
pub struct MapNet {
    pub config: MapConfig,
    pub layers: [Linear; 3],
}

impl MapNet {
    pub fn init(config: MapConfig, seed: u64) -> Result<Self> {
        if config.hidden_dim == 0 || config.latent_dim == 0 || config.widths.contains(&0) {
            return Err(Error::InvalidConfig("map dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [config.input_dim(), config.widths[0], config.widths[1], config.latent_dim];
        let mut layer = |i: usize, gain: f64| Linear {
            weight: Tensor::randn(&[dims[i], dims[i + 1]], gain / (dims[i] as f64).sqrt(), &mut rng),
            bias: Tensor::zeros(&[1, dims[i + 1]]),
        };
        let layers = [layer(0, 2f64.sqrt()), layer(1, 2f64.sqrt()), layer(2, 1.0)];
        Ok(MapNet { config, layers })
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("layer{i}.weight"), &l.weight), (format!("layer{i}.bias"), &l.bias)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MapVars {
        let mut bind = |l: &Linear| LinearVars {
            weight: g.leaf(l.weight.clone(), trainable),
            bias: Some(g.leaf(l.bias.clone(), trainable)),
        };
        MapVars {
            layers: [bind(&self.layers[0]), bind(&self.layers[1]), bind(&self.layers[2])],
        }
    }

    /// Row-wise evaluation outside of any graph.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let y = vars.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn to_snapshot(&self, bridge: &BridgeSettings) -> Snapshot {
        let header = serde_json::json!({ "map": self.config, "bridge": bridge });
        Snapshot::new("map", header, self.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect())
    }

    pub fn from_snapshot(snap: &Snapshot) -> Result<(Self, BridgeSettings)> {
        if snap.kind != "map" {
            return Err(Error::Snapshot(format!("expected a map snapshot, found {}", snap.kind)));
        }
        let config: MapConfig = serde_json::from_value(snap.header["map"].clone())?;
        let bridge: BridgeSettings = serde_json::from_value(snap.header["bridge"].clone())?;
        let mut map = MapNet::init(config, 0)?;
        if snap.tensors.len() != 6 {
            return Err(Error::Snapshot(format!("expected 6 map tensors, found {}", snap.tensors.len())));
        }
        for (slot, (name, t)) in map.tensors_mut().into_iter().zip(&snap.tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Snapshot(format!("map tensor {name} has shape {:?}", t.shape())));
            }
            *slot = t.clone();
        }
        Ok((map, bridge))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MapVars {
    pub layers: [LinearVars; 3],
}

impl MapVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = crate::backbone::linear(g, x, &self.layers[0])?;
        h = g.relu(h);
        h = crate::backbone::linear(g, h, &self.layers[1])?;
        h = g.relu(h);
        crate::backbone::linear(g, h, &self.layers[2])
    }

    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [Some(l.weight), l.bias]).flatten().collect()
    }
}

/// Bridge family used for the targets; the horizon is always 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeSettings {
    pub kind: BridgeKind,
    pub q: f64,
    pub sigma: f64,
}

impl Default for BridgeSettings {
    fn default() -> Self {
        BridgeSettings {
            kind: BridgeKind::Brownian,
            q: 1.0,
            sigma: 1.0,
        }
    }
}

impl BridgeSettings {
    pub fn spec(&self, beta: &[f64]) -> Result<BridgeSpec> {
        BridgeSpec::new(self.kind, beta.to_vec(), 1.0, self.q, self.sigma)
    }
}

/// Normalized layer times `(i + 1) / (L + 2)` for `i = 0..=L`.
pub fn layer_times(num_points: usize) -> Vec<f64> {
    (0..num_points).map(|i| (i + 1) as f64 / (num_points + 1) as f64).collect()
}

/// A trace living on a graph, so running costs can reach upstream parameters.
#[derive(Clone, Debug)]
pub struct TraceVars {
    pub h_out: Vec<Var>,
    pub h_ctx: Vec<Var>,
}

impl TraceVars {
    pub fn constant(g: &mut Graph, trace: &HiddenTrace) -> Self {
        let mut rows = |vs: &[Vec<f64>]| vs.iter().map(|v| g.constant(Tensor::row_vector(v))).collect();
        TraceVars {
            h_out: rows(&trace.h_out),
            h_ctx: rows(&trace.h_ctx),
        }
    }

    /// `[L + 1, 2d]` matrix whose rows are `[h_o^(i), h_ctx^(i)]`.
    pub fn knots(&self, g: &mut Graph) -> Result<Var> {
        if self.h_out.len() != self.h_ctx.len() || self.h_out.is_empty() {
            return Err(Error::shape(
                "trace_knots",
                format!("{} output states, {} context states", self.h_out.len(), self.h_ctx.len()),
            ));
        }
        let rows = self
            .h_out
            .iter()
            .zip(&self.h_ctx)
            .map(|(&o, &c)| g.concat(&[o, c], 1))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&rows, 0)
    }
}

fn check_map_input(map: &MapNet, knots: &Tensor, method: MapMethod) -> Result<()> {
    if map.config.method != method {
        return Err(Error::InvalidConfig(format!("map was built for {}, not {method}", map.config.method)));
    }
    if knots.cols() != 2 * map.config.hidden_dim {
        return Err(Error::shape(
            "latent_map",
            format!("trace width {} does not match map input {}", knots.cols(), 2 * map.config.hidden_dim),
        ));
    }
    Ok(())
}

/// Latent points `(t_i, g(h_o^(i), h_ctx^(i)))` for the discrete method.
pub fn project_discrete(map: &MapNet, trace: &HiddenTrace) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut g = Graph::new();
    let tv = TraceVars::constant(&mut g, trace);
    let knots = tv.knots(&mut g)?;
    check_map_input(map, g.value(knots), MapMethod::Pdf)?;
    let vars = map.bind(&mut g, false);
    let u = vars.forward(&mut g, knots)?;
    let u = g.value(u);
    Ok(layer_times(u.rows())
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, u.row(i).to_vec()))
        .collect())
}

fn require_unit_horizon(spec: &BridgeSpec) -> Result<()> {
    if spec.horizon != 1.0 {
        return Err(Error::InvalidBridge(format!("goodness needs horizon 1, got {}", spec.horizon)));
    }
    Ok(())
}

/// Sum over layers of the bridge transition log-density of the latent points.
pub fn goodness_pdf_graph(g: &mut Graph, map: &MapVars, knots: Var, spec: &BridgeSpec) -> Result<Var> {
    require_unit_horizon(spec)?;
    let u = map.forward(g, knots)?;
    let (n, r) = (g.value(u).rows(), g.value(u).cols());
    if r != spec.dim() {
        return Err(Error::shape("goodness_pdf", format!("latent dim {r} vs endpoint dim {}", spec.dim())));
    }
    let mut target = Vec::with_capacity(n * r);
    let mut weight = Vec::with_capacity(n * r);
    let mut constant = 0.0;
    for t in layer_times(n) {
        let (m, v) = spec.marginal(t)?;
        target.extend(spec.beta.iter().map(|b| m * b));
        weight.extend(std::iter::repeat_n(-0.5 / v, r));
        constant -= 0.5 * r as f64 * (2.0 * std::f64::consts::PI * v).ln();
    }
    let target = g.constant(Tensor::new(vec![n, r], target)?);
    let weight = g.constant(Tensor::new(vec![n, r], weight)?);
    let diff = g.sub(u, target)?;
    let sq = g.square(diff);
    let weighted = g.mul(sq, weight)?;
    let quad = g.sum(weighted);
    let constant = g.constant(Tensor::scalar(constant));
    g.add(quad, constant)
}

pub fn goodness_pdf(map: &MapNet, trace: &HiddenTrace, spec: &BridgeSpec) -> Result<f64> {
    let mut g = Graph::new();
    let tv = TraceVars::constant(&mut g, trace);
    let knots = tv.knots(&mut g)?;
    check_map_input(map, g.value(knots), MapMethod::Pdf)?;
    let vars = map.bind(&mut g, false);
    let out = goodness_pdf_graph(&mut g, &vars, knots, spec)?;
    Ok(g.value(out).item())
}

/// Standard normal increments for one simulated latent path: `n_steps - 1`
/// rows of dimension `r`.
pub fn sde_noise<R: Rng + ?Sized>(n_steps: usize, r: usize, rng: &mut R) -> Tensor {
    let rows = n_steps.saturating_sub(1);
    let data = (0..rows * r).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, r], data).expect("noise shape")
}

/// Girsanov KL estimate between the map-driven SDE and the bridge along one
/// simulated path. The map sees spline-interpolated trace states at layer
/// coordinate `(L + 2) t - 1` plus `t` itself. The path is integrated on
/// `t_k = k / n` and the cost accumulates for `t_k <= 1 - 1/n`.
///
/// The drift never depends on the path, so the path is a fixed linear map of
/// the drift rows and the whole estimate is a quadratic in the map output.
pub fn goodness_sde_graph(
    g: &mut Graph,
    map: &MapVars,
    knots: Var,
    spec: &BridgeSpec,
    n_steps: usize,
    noise: &Tensor,
) -> Result<Var> {
    require_unit_horizon(spec)?;
    if n_steps < 4 {
        return Err(Error::InvalidConfig(format!("goodness_sde needs at least 4 steps, got {n_steps}")));
    }
    let r = spec.dim();
    if noise.shape() != [n_steps - 1, r] {
        return Err(Error::shape("goodness_sde", format!("noise {:?} for {n_steps} steps of dim {r}", noise.shape())));
    }
    let points = g.value(knots).rows();
    let positions: Vec<f64> = (0..points).map(|i| i as f64).collect();
    let dt = 1.0 / n_steps as f64;
    let times: Vec<f64> = (0..n_steps).map(|k| k as f64 * dt).collect();

    let mut interp = Vec::with_capacity(n_steps * points);
    for &t in &times {
        interp.extend(basis_weights(&positions, (points + 1) as f64 * t - 1.0)?);
    }
    let interp = g.constant(Tensor::new(vec![n_steps, points], interp)?);
    let states = g.matmul(interp, knots)?;
    let clock = g.constant(Tensor::new(vec![n_steps, 1], times.clone())?);
    let input = g.concat(&[states, clock], 1)?;
    let drift = map.forward(g, input)?;
    if g.value(drift).cols() != r {
        return Err(Error::shape("goodness_sde", format!("map output {} vs endpoint dim {r}", g.value(drift).cols())));
    }

    // u_k = (G_k - a_k Z_k - b_k beta) / sigma with Z_k = sum_{j<k} (G_j dt + sigma sqrt(dt) xi_j)
    let sigma = spec.diffusion();
    let rows = n_steps - 1;
    let mut mix = vec![0.0; rows * n_steps];
    let mut offset = vec![0.0; rows * r];
    let mut noise_sum = vec![0.0; r];
    for k in 0..rows {
        let (a, b) = spec.drift_coefs(times[k])?;
        mix[k * n_steps + k] = 1.0;
        for j in 0..k {
            mix[k * n_steps + j] = -a * dt;
        }
        for c in 0..r {
            offset[k * r + c] = a * sigma * dt.sqrt() * noise_sum[c] + b * spec.beta[c];
        }
        for (c, s) in noise_sum.iter_mut().enumerate() {
            *s += noise.at(k, c);
        }
    }
    let mix = g.constant(Tensor::new(vec![rows, n_steps], mix)?);
    let offset = g.constant(Tensor::new(vec![rows, r], offset)?);
    let mixed = g.matmul(mix, drift)?;
    let resid = g.sub(mixed, offset)?;
    let sq = g.square(resid);
    let total = g.sum(sq);
    Ok(g.scalar_mul(total, 0.5 * dt / (sigma * sigma)))
}

pub fn goodness_sde<R: Rng + ?Sized>(
    map: &MapNet,
    trace: &HiddenTrace,
    spec: &BridgeSpec,
    n_steps: usize,
    rng: &mut R,
) -> Result<f64> {
    let noise = sde_noise(n_steps, spec.dim(), rng);
    let mut g = Graph::new();
    let tv = TraceVars::constant(&mut g, trace);
    let knots = tv.knots(&mut g)?;
    check_map_input(map, g.value(knots), MapMethod::Sde)?;
    let vars = map.bind(&mut g, false);
    let out = goodness_sde_graph(&mut g, &vars, knots, spec, n_steps, &noise)?;
    Ok(g.value(out).item())
}

/// Step-by-step version of the same estimate for an arbitrary drift
/// `f(t, z)`, driven by the same noise rows.
pub fn sde_kl_reference<F>(spec: &BridgeSpec, n_steps: usize, noise: &Tensor, mut drift: F) -> Result<f64>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    let dt = 1.0 / n_steps as f64;
    let sigma = spec.diffusion();
    let mut z = vec![0.0; spec.dim()];
    let mut kl = 0.0;
    for k in 0..n_steps - 1 {
        let t = k as f64 * dt;
        let f = drift(t, &z);
        let mu = spec.drift(t, &z)?;
        kl += 0.5 * dt * f.iter().zip(&mu).map(|(a, b)| ((a - b) / sigma).powi(2)).sum::<f64>();
        for (c, zc) in z.iter_mut().enumerate() {
            *zc += f[c] * dt + sigma * dt.sqrt() * noise.at(k, c);
        }
    }
    Ok(kl)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitMapConfig {
    pub method: MapMethod,
    pub bridge: BridgeSettings,
    pub widths: [usize; 2],
    pub latent_dim: usize,
    pub eta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub warmup_ratio: f64,
    pub sde_steps: usize,
    pub seed: u64,
}

impl Default for FitMapConfig {
    fn default() -> Self {
        FitMapConfig {
            method: MapMethod::Pdf,
            bridge: BridgeSettings::default(),
            widths: [64, 32],
            latent_dim: 8,
            eta: 1.0,
            steps: 400,
            batch_size: 32,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            warmup_ratio: 0.01,
            sde_steps: 16,
            seed: 0,
        }
    }
}

/// Linear warmup to `lr` over `warmup_ratio * total` steps, then constant.
pub fn warmup_lr(lr: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warm = (warmup_ratio * total as f64).ceil() as usize;
    if warm == 0 || step >= warm {
        lr
    } else {
        lr * (step + 1) as f64 / warm as f64
    }
}

/// A frozen-backbone sample reduced to what the map sees.
#[derive(Clone, Debug)]
pub struct MapExample {
    pub trace: HiddenTrace,
    pub target: usize,
}

pub fn collect_examples(backbone: &BackboneState, samples: &[TaskSample]) -> Result<Vec<MapExample>> {
    samples
        .iter()
        .map(|s| {
            let (tokens, o) = s.model_input()?;
            let (_, trace) = backbone.predict(&tokens, o, &NoHooks)?;
            Ok(MapExample {
                trace,
                target: s.label_word,
            })
        })
        .collect()
}

/// Per-example objective to minimize: negated log-goodness or the KL.
fn objective(
    g: &mut Graph,
    vars: &MapVars,
    ex: &MapExample,
    endpoints: &EndpointTable,
    cfg: &FitMapConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let tv = TraceVars::constant(g, &ex.trace);
    let knots = tv.knots(g)?;
    let spec = cfg.bridge.spec(endpoints.row(ex.target)?)?;
    match cfg.method {
        MapMethod::Pdf => {
            let good = goodness_pdf_graph(g, vars, knots, &spec)?;
            Ok(g.scalar_mul(good, -1.0))
        }
        MapMethod::Sde => {
            let noise = sde_noise(cfg.sde_steps, spec.dim(), rng);
            goodness_sde_graph(g, vars, knots, &spec, cfg.sde_steps, &noise)
        }
    }
}

/// Mean objective (lower is better) of `map` over `examples`.
pub fn mean_objective(map: &MapNet, examples: &[MapExample], endpoints: &EndpointTable, cfg: &FitMapConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let vars = map.bind(&mut g, false);
        let v = objective(&mut g, &vars, ex, endpoints, cfg, &mut rng)?;
        total += g.value(v).item();
    }
    Ok(total / examples.len().max(1) as f64)
}

pub struct FitReport {
    pub map: MapNet,
    /// Batch objective per step.
    pub losses: Vec<f64>,
}

/// Trains the map with Adam on precomputed frozen-backbone traces.
pub fn fit_map_on_examples(examples: &[MapExample], hidden_dim: usize, endpoints: &EndpointTable, cfg: &FitMapConfig) -> Result<FitReport> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to fit the map on".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let map_cfg = MapConfig {
        method: cfg.method,
        hidden_dim,
        widths: cfg.widths,
        latent_dim: endpoints.latent_dim(),
    };
    let mut map = MapNet::init(map_cfg, cfg.seed)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_7062);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let vars = map.bind(&mut g, true);
        let mut parts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let ex = &examples[batch_rng.random_range(0..examples.len())];
            parts.push(objective(&mut g, &vars, ex, endpoints, cfg, &mut noise_rng)?);
        }
        let stacked = g.concat(&parts, 0)?;
        let loss = g.mean(stacked);
        losses.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        let mut grads = grads.collect(&vars.all())?;
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let refs: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
        let lr = warmup_lr(cfg.learning_rate, step, cfg.steps, cfg.warmup_ratio);
        adam.step_with_lr(&mut map.tensors_mut(), &refs, lr)?;
    }
    Ok(FitReport { map, losses })
}

/// Builds endpoints from the tied output embeddings, traces `corpus` through
/// the frozen backbone and fits the map.
pub fn fit_map(backbone: &BackboneState, corpus: &[TaskSample], cfg: &FitMapConfig) -> Result<(FitReport, EndpointTable)> {
    let endpoints = build_endpoints(&backbone.token_embedding, cfg.latent_dim, cfg.eta)?;
    let examples = collect_examples(backbone, corpus)?;
    let report = fit_map_on_examples(&examples, backbone.config.hidden_dim, &endpoints, cfg)?;
    Ok((report, endpoints))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_trace(layers: usize, d: usize, seed: u64) -> HiddenTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = || (0..=layers).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        HiddenTrace {
            h_out: rows(),
            h_ctx: rows(),
        }
    }

    fn toy_map(method: MapMethod, d: usize, r: usize, seed: u64) -> MapNet {
        MapNet::init(
            MapConfig {
                method,
                hidden_dim: d,
                widths: [6, 5],
                latent_dim: r,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn symmetric_pca_example() {
        let emb = Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 2.0, 0.0, -2.0, 0.0]).unwrap();
        let table = build_endpoints(&emb, 1, 1.0).unwrap();
        assert_eq!(table.beta.data(), &[1.0, -1.0, 1.0, -1.0]);
        let table = build_endpoints(&emb, 1, 2.5).unwrap();
        assert_eq!(table.beta.data(), &[2.5, -2.5, 2.5, -2.5]);
    }

    #[test]
    fn endpoint_errors_and_duplicates() {
        let emb = Tensor::new(vec![4, 3], vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 2.0, 0.0, 0.0, -2.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            build_endpoints(&emb, 2, 1.0),
            Err(Error::DegenerateCovariance { achieved: 1, requested: 2 })
        ));
        assert!(build_endpoints(&emb, 3, 1.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut emb = Tensor::randn(&[10, 6], 1.0, &mut rng);
        let copy = emb.row(2).to_vec();
        emb.data_mut()[5 * 6..6 * 6].copy_from_slice(&copy);
        let table = build_endpoints(&emb, 3, 1.0).unwrap();
        assert_eq!(table.row(2).unwrap(), table.row(5).unwrap());
        for i in 0..10 {
            let n: f64 = table.row(i).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_times_match_normalized_index() {
        let t = layer_times(5);
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0, 4.0 / 6.0, 5.0 / 6.0];
        for (a, b) in t.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_final_layer_projects_to_origin() {
        let mut map = toy_map(MapMethod::Pdf, 3, 2, 1);
        map.layers[2].weight = Tensor::zeros(map.layers[2].weight.shape());
        let path = project_discrete(&map, &toy_trace(4, 3, 2)).unwrap();
        assert_eq!(path.len(), 5);
        assert!(path.iter().all(|(_, u)| u.iter().all(|&v| v == 0.0)));
        assert!(project_discrete(&map, &toy_trace(4, 4, 2)).is_err());
    }

    #[test]
    fn pdf_degenerate_value() {
        let mut map = toy_map(MapMethod::Pdf, 3, 2, 1);
        map.layers[2].weight = Tensor::zeros(map.layers[2].weight.shape());
        let spec = BridgeSpec::brownian(vec![0.0, 0.0], 1.0).unwrap();
        let got = goodness_pdf(&map, &toy_trace(4, 3, 2), &spec).unwrap();
        let want: f64 = layer_times(5)
            .iter()
            .map(|t| -(2.0 / 2.0) * (2.0 * std::f64::consts::PI * t * (1.0 - t)).ln())
            .sum();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn pdf_is_maximized_on_the_mean_curve() {
        let beta = vec![0.6, -0.8];
        let spec = BridgeSpec::brownian(beta.clone(), 1.0).unwrap();
        let times = layer_times(5);
        let mut best = f64::NEG_INFINITY;
        let mut value = Tensor::zeros(&[5, 2]);
        // gradient ascent on free latent points converges to the mean curve
        for _ in 0..400 {
            let mut g2 = Graph::new();
            let u2 = g2.param(value.clone());
            let target: Vec<f64> = times.iter().flat_map(|t| beta.iter().map(move |b| t * b)).collect();
            let weight: Vec<f64> = times.iter().flat_map(|t| [-0.5 / (t * (1.0 - t)); 2]).collect();
            let tgt = g2.constant(Tensor::new(vec![5, 2], target).unwrap());
            let w = g2.constant(Tensor::new(vec![5, 2], weight).unwrap());
            let diff = g2.sub(u2, tgt).unwrap();
            let sq = g2.square(diff);
            let wsq = g2.mul(sq, w).unwrap();
            let obj = g2.sum(wsq);
            best = g2.value(obj).item();
            let grad = g2.backward(obj).unwrap().get(u2).unwrap().clone();
            let step: Vec<f64> = value.data().iter().zip(grad.data()).map(|(v, gr)| v + 0.05 * gr).collect();
            value = Tensor::new(vec![5, 2], step).unwrap();
        }
        assert!(best.abs() < 1e-10);
        for (i, t) in times.iter().enumerate() {
            for j in 0..2 {
                assert!((value.at(i, j) - t * beta[j]).abs() < 1e-6);
            }
        }
        let on_curve: f64 = times
            .iter()
            .map(|&t| spec.transition_logpdf(t, &beta.iter().map(|b| t * b).collect::<Vec<_>>()).unwrap())
            .sum();
        let mut map = toy_map(MapMethod::Pdf, 3, 2, 0);
        map.layers[2].weight = Tensor::zeros(map.layers[2].weight.shape());
        let off_curve = goodness_pdf(&map, &toy_trace(4, 3, 9), &spec).unwrap();
        assert!(on_curve > off_curve);
    }

    #[test]
    fn batched_sde_matches_stepwise_reference() {
        let (d, r, n) = (3, 2, 12);
        let map = toy_map(MapMethod::Sde, d, r, 5);
        let trace = toy_trace(4, d, 6);
        for spec in [
            BridgeSpec::brownian(vec![0.6, -0.8], 1.0).unwrap(),
            BridgeSpec::ou(vec![0.6, -0.8], 1.0, 1.5, 0.7).unwrap(),
        ] {
            let noise = sde_noise(n, r, &mut ChaCha8Rng::seed_from_u64(3));
            let mut g = Graph::new();
            let tv = TraceVars::constant(&mut g, &trace);
            let knots = tv.knots(&mut g).unwrap();
            let vars = map.bind(&mut g, false);
            let kl = goodness_sde_graph(&mut g, &vars, knots, &spec, n, &noise).unwrap();
            let batched = g.value(kl).item();

            let rows: Vec<Vec<f64>> = trace.h_out.iter().zip(&trace.h_ctx).map(|(o, c)| [o.clone(), c.clone()].concat()).collect();
            let positions: Vec<f64> = (0..rows.len()).map(|i| i as f64).collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let spline = crate::spline::CubicSpline::fit_rows(&positions, &refs).unwrap();
            let reference = sde_kl_reference(&spec, n, &noise, |t, _z| {
                let mut x = spline.eval(6.0 * t - 1.0);
                x.push(t);
                map.apply(&Tensor::row_vector(&x)).unwrap().data().to_vec()
            })
            .unwrap();
            assert!((batched - reference).abs() <= 1e-10 * reference.abs().max(1.0), "{batched} vs {reference}");
        }
    }

    #[test]
    fn sde_reference_oracles() {
        let spec = BridgeSpec::brownian(vec![1.0, -0.5], 1.0).unwrap();
        let n = 50;
        let noise = sde_noise(n, 2, &mut ChaCha8Rng::seed_from_u64(8));
        let exact = sde_kl_reference(&spec, n, &noise, |t, z| spec.drift(t, z).unwrap()).unwrap();
        assert!(exact < 1e-6);
        let offset = |c: f64| {
            sde_kl_reference(&spec, n, &noise, |t, z| spec.drift(t, z).unwrap().iter().map(|v| v + c).collect()).unwrap()
        };
        let (one, two) = (offset(0.3), offset(0.6));
        assert!(one > 0.0);
        assert!((two / one - 4.0).abs() < 1e-9);
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(warmup_lr(1.0, 0, 100, 0.0), 1.0);
        assert!((warmup_lr(1.0, 0, 100, 0.1) - 0.1).abs() < 1e-15);
        assert_eq!(warmup_lr(1.0, 9, 100, 0.1), 1.0);
        assert_eq!(warmup_lr(1.0, 50, 100, 0.1), 1.0);
    }

    #[test]
    fn snapshots_round_trip() {
        let map = toy_map(MapMethod::Sde, 3, 2, 2);
        let settings = BridgeSettings {
            kind: BridgeKind::Ou,
            q: 2.0,
            sigma: 0.5,
        };
        let (back, s) = MapNet::from_snapshot(&map.to_snapshot(&settings)).unwrap();
        assert_eq!(back, map);
        assert_eq!(s, settings);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = build_endpoints(&Tensor::randn(&[10, 4], 1.0, &mut rng), 2, 1.0).unwrap();
        assert_eq!(EndpointTable::from_snapshot(&table.to_snapshot()).unwrap(), table);
    }
}
