//! Python bindings. The compiled library is importable as `bridge_pet`.

use std::path::PathBuf;

use bridge_pet::analysis;
use bridge_pet::backbone::{pretrain_mlm, BackboneState, ModelConfig, NoHooks, PretrainConfig};
use bridge_pet::bridges::{sample_path, BridgeKind, BridgeSpec};
use bridge_pet::cli;
use bridge_pet::data::{LanguageConfig, SyntheticLanguage, TaskConfig, TopicTask};
use bridge_pet::latent_map::{EndpointTable, MapNet};
use bridge_pet::pets::{PetConfig, PetKind, PetParams};
use bridge_pet::pipeline::{evaluate, train_pet, Metric, RegMethod, Regularizer, TaskSample, TrainConfig};
use bridge_pet::snapshot::Snapshot;
use bridge_pet::spline::CubicSpline;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: bridge_pet::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = bridge_pet::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn samples(rows: Vec<(Vec<usize>, usize)>) -> Vec<TaskSample> {
    rows.into_iter().map(|(t, w)| TaskSample::new(t, w)).collect()
}

/// Frozen toy transformer.
#[pyclass(module = "bridge_pet", frozen)]
struct Backbone {
    state: BackboneState,
}

#[pymethods]
impl Backbone {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Backbone {
            state: cli::load_backbone(&path).map_err(err)?,
        })
    }

    /// Masked-token pretraining on the default synthetic language.
    #[staticmethod]
    #[pyo3(signature = (steps=300, seed=0, corpus_size=2000))]
    fn pretrain(py: Python<'_>, steps: usize, seed: u64, corpus_size: usize) -> PyResult<Self> {
        let state = py
            .detach(|| {
                let lang = SyntheticLanguage::new(LanguageConfig::default())?;
                let corpus = lang.corpus(corpus_size, seed);
                let hyper = PretrainConfig {
                    steps,
                    seed,
                    ..PretrainConfig::default()
                };
                pretrain_mlm(ModelConfig::default(), &corpus, &hyper)
            })
            .map_err(err)?;
        Ok(Backbone { state })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cli::save_backbone(&self.state, &path).map_err(err)
    }

    fn checksum(&self) -> u64 {
        self.state.checksum()
    }

    fn num_parameters(&self) -> usize {
        self.state.num_parameters()
    }

    /// Logits at `mask_position` and the per-layer `(h_out, h_ctx)` trace.
    fn predict(&self, tokens: Vec<usize>, mask_position: usize) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (logits, trace) = self.state.predict(&tokens, mask_position, &NoHooks).map_err(err)?;
        Ok((logits, trace.h_out, trace.h_ctx))
    }
}

/// Trained PET parameters bound to the backbone they were trained on.
#[pyclass(module = "bridge_pet", frozen)]
struct Pet {
    params: PetParams,
}

#[pymethods]
impl Pet {
    #[staticmethod]
    fn load(backbone: &Backbone, path: PathBuf) -> PyResult<Self> {
        let snap = Snapshot::load(&path).map_err(err)?;
        Ok(Pet {
            params: PetParams::from_snapshot(&backbone.state, &snap).map_err(err)?,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.params.config.kind.name()
    }

    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.params.to_snapshot().save(&path).map_err(err)
    }
}

/// Synthetic topic-classification samples as `(tokens, label_word)` pairs,
/// plus the two label words.
#[pyfunction]
#[pyo3(signature = (n, seed=0))]
fn topic_task(n: usize, seed: u64) -> PyResult<(Vec<(Vec<usize>, usize)>, Vec<usize>)> {
    let lang = SyntheticLanguage::new(LanguageConfig::default()).map_err(err)?;
    let task = TopicTask::new(lang, TaskConfig::default()).map_err(err)?;
    let rows = task.dataset(n, seed).into_iter().map(|s| (s.tokens, s.label_word)).collect();
    Ok((rows, task.label_words().to_vec()))
}

/// Trains a PET; `map_path` (with `endpoints.snp` beside it) enables the
/// bridge running cost. Returns the best checkpoint and its dev metric.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (backbone, kind, train, dev, label_words, alpha=0.0, method="none", map_path=None, steps=1000, seed=0))]
fn train(
    py: Python<'_>,
    backbone: &Backbone,
    kind: &str,
    train: Vec<(Vec<usize>, usize)>,
    dev: Vec<(Vec<usize>, usize)>,
    label_words: Vec<usize>,
    alpha: f64,
    method: &str,
    map_path: Option<PathBuf>,
    steps: usize,
    seed: u64,
) -> PyResult<(Pet, f64, usize)> {
    let kind: PetKind = parse(kind)?;
    let method: RegMethod = parse(method)?;
    let reg = match &map_path {
        Some(p) => {
            let (map, bridge) = MapNet::from_snapshot(&Snapshot::load(p).map_err(err)?).map_err(err)?;
            let endpoints = EndpointTable::from_snapshot(&Snapshot::load(&p.with_file_name("endpoints.snp")).map_err(err)?).map_err(err)?;
            Some((Regularizer { map, endpoints }, bridge))
        }
        None => None,
    };
    let mut cfg = TrainConfig {
        alpha,
        method,
        max_steps: steps,
        seed,
        ..TrainConfig::default()
    };
    if let Some((_, b)) = &reg {
        cfg.bridge_kind = b.kind;
        cfg.ou_q = b.q;
        cfg.ou_sigma = b.sigma;
    }
    let (train, dev) = (samples(train), samples(dev));
    let out = py
        .detach(|| {
            train_pet(
                &backbone.state,
                &PetConfig::with_kind(kind),
                reg.as_ref().map(|r| &r.0),
                &train,
                &dev,
                &label_words,
                &cfg,
            )
        })
        .map_err(err)?;
    Ok((Pet { params: out.pet }, out.best_dev, out.best_step))
}

#[pyfunction]
#[pyo3(signature = (backbone, data, label_words, pet=None, metric="accuracy"))]
fn evaluate_metric(
    backbone: &Backbone,
    data: Vec<(Vec<usize>, usize)>,
    label_words: Vec<usize>,
    pet: Option<&Pet>,
    metric: &str,
) -> PyResult<f64> {
    let metric: Metric = parse(metric)?;
    evaluate(&backbone.state, pet.map(|p| &p.params), &samples(data), &label_words, metric).map_err(err)
}

/// Euler–Maruyama bridge paths as `(times, values)` per path, pinned at both ends.
#[pyfunction]
#[pyo3(signature = (beta, steps=100, paths=1, kind="brownian", q=1.0, sigma=1.0, seed=0))]
fn sample_bridge(
    beta: Vec<f64>,
    steps: usize,
    paths: usize,
    kind: &str,
    q: f64,
    sigma: f64,
    seed: u64,
) -> PyResult<Vec<(Vec<f64>, Vec<Vec<f64>>)>> {
    let kind: BridgeKind = parse(kind)?;
    let spec = BridgeSpec::new(kind, beta, 1.0, q, sigma).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..paths)
        .map(|_| sample_path(&spec, steps, &mut rng).map(|p| (p.times, p.values)).map_err(err))
        .collect()
}

#[pyfunction]
#[pyo3(signature = (t, x, beta, kind="brownian", q=1.0, sigma=1.0))]
fn transition_logpdf(t: f64, x: Vec<f64>, beta: Vec<f64>, kind: &str, q: f64, sigma: f64) -> PyResult<f64> {
    let spec = BridgeSpec::new(parse(kind)?, beta, 1.0, q, sigma).map_err(err)?;
    spec.transition_logpdf(t, &x).map_err(err)
}

#[pyfunction]
fn spline_eval(positions: Vec<f64>, values: Vec<Vec<f64>>, t: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let rows: Vec<&[f64]> = values.iter().map(Vec::as_slice).collect();
    let s = CubicSpline::fit_rows(&positions, &rows).map_err(err)?;
    Ok(t.into_iter().map(|x| s.eval(x)).collect())
}

/// `(coefficient, p_value)`.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let c = analysis::pearson(&x, &y).map_err(err)?;
    Ok((c.coefficient, c.p_value))
}

/// `(coefficient, p_value)` of tau-b.
#[pyfunction]
fn kendall_tau_b(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let c = analysis::kendall_tau_b(&x, &y).map_err(err)?;
    Ok((c.coefficient, c.p_value))
}

#[pyfunction]
fn centroid_distance(states_by_label: std::collections::BTreeMap<usize, Vec<Vec<f64>>>) -> PyResult<f64> {
    analysis::centroid_distance(&states_by_label).map_err(err)
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("bridge-pet".to_string()).chain(args).collect();
    py.detach(|| cli::run(argv))
}

#[pymodule]
#[pyo3(name = "bridge_pet")]
fn bridge_pet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Backbone>()?;
    m.add_class::<Pet>()?;
    m.add_function(wrap_pyfunction!(topic_task, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_metric, m)?)?;
    m.add_function(wrap_pyfunction!(sample_bridge, m)?)?;
    m.add_function(wrap_pyfunction!(transition_logpdf, m)?)?;
    m.add_function(wrap_pyfunction!(spline_eval, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau_b, m)?)?;
    m.add_function(wrap_pyfunction!(centroid_distance, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
