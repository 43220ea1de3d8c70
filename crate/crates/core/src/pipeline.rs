//! Second-stage training: PETs on the frozen backbone under terminal
//! cross-entropy plus an optional bridge running cost, with few-shot splits
//! and evaluation metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, BackboneState, MASK_TOKEN};
use crate::bridges::BridgeKind;
use crate::error::{Error, Result};
use crate::latent_map::{
    goodness_pdf_graph, goodness_sde_graph, sde_noise, warmup_lr, BridgeSettings, EndpointTable, MapMethod, MapNet,
    TraceVars,
};
use crate::pets::{PetConfig, PetParams};
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Graph, Tensor, Var};

/// One labelled example. Without `mask_position` a `[MASK]` is appended and
/// predicted; otherwise the token at that position is replaced by `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub tokens: Vec<usize>,
    pub label_word: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_position: Option<usize>,
}

impl TaskSample {
    pub fn new(tokens: Vec<usize>, label_word: usize) -> Self {
        TaskSample {
            tokens,
            label_word,
            mask_position: None,
        }
    }

    /// Backbone input and the output position.
    pub fn model_input(&self) -> Result<(Vec<usize>, usize)> {
        let mut tokens = self.tokens.clone();
        match self.mask_position {
            None => {
                tokens.push(MASK_TOKEN);
                Ok((tokens, self.tokens.len()))
            }
            Some(p) if p < tokens.len() => {
                tokens[p] = MASK_TOKEN;
                Ok((tokens, p))
            }
            Some(p) => Err(Error::InvalidMaskPosition {
                position: p,
                len: tokens.len(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMethod {
    None,
    Pdf,
    Sde,
}

impl RegMethod {
    pub fn map_method(self) -> Option<MapMethod> {
        match self {
            RegMethod::None => None,
            RegMethod::Pdf => Some(MapMethod::Pdf),
            RegMethod::Sde => Some(MapMethod::Sde),
        }
    }
}

impl fmt::Display for RegMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegMethod::None => "none",
            RegMethod::Pdf => "pdf",
            RegMethod::Sde => "sde",
        })
    }
}

impl FromStr for RegMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(RegMethod::None),
            "pdf" => Ok(RegMethod::Pdf),
            "sde" => Ok(RegMethod::Sde),
            _ => Err(Error::InvalidConfig(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1,
    Matthews,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Matthews => "matthews",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            "f1" => Ok(Metric::F1),
            "matthews" | "mcc" => Ok(Metric::Matthews),
            _ => Err(Error::InvalidConfig(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub method: RegMethod,
    pub bridge_kind: BridgeKind,
    pub ou_q: f64,
    pub ou_sigma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub warmup_ratio: f64,
    pub sde_steps: usize,
    pub metric: Metric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.0,
            method: RegMethod::None,
            bridge_kind: BridgeKind::Brownian,
            ou_q: 1.0,
            ou_sigma: 1.0,
            learning_rate: 1e-2,
            batch_size: 2,
            max_steps: 1000,
            eval_every: 50,
            seed: 0,
            grad_clip: 1.0,
            warmup_ratio: 0.0,
            sde_steps: 16,
            metric: Metric::Accuracy,
        }
    }
}

impl TrainConfig {
    /// `alpha = 0` switches the running cost off entirely.
    pub fn effective_method(&self) -> RegMethod {
        if self.alpha == 0.0 {
            RegMethod::None
        } else {
            self.method
        }
    }

    pub fn bridge(&self) -> BridgeSettings {
        BridgeSettings {
            kind: self.bridge_kind,
            q: self.ou_q,
            sigma: self.ou_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub k: usize,
    pub n_seeds: usize,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        FewShotSpec { k: 16, n_seeds: 5 }
    }
}

/// A fitted map with its endpoints: everything the running cost needs.
#[derive(Clone, Debug)]
pub struct Regularizer {
    pub map: MapNet,
    pub endpoints: EndpointTable,
}

pub struct LossParts {
    pub total: Var,
    pub terminal: Var,
    pub running: Option<Var>,
}

/// `CE(logits, y) + alpha * running_cost` for one sample. The running cost is
/// the negated log-goodness (PDF) or the KL estimate (SDE).
pub fn total_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    logits: Var,
    label_word: usize,
    trace: &TraceVars,
    reg: Option<&Regularizer>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossParts> {
    let terminal = g.cross_entropy(logits, &[label_word])?;
    let Some(method) = cfg.effective_method().map_method() else {
        return Ok(LossParts {
            total: terminal,
            terminal,
            running: None,
        });
    };
    let reg = reg.ok_or(Error::MissingMap(method.name()))?;
    if reg.map.config.method != method {
        return Err(Error::InvalidConfig(format!(
            "map was fitted with {}, training asks for {method}",
            reg.map.config.method
        )));
    }
    let spec = cfg.bridge().spec(reg.endpoints.row(label_word)?)?;
    let map = reg.map.bind(g, false);
    let knots = trace.knots(g)?;
    let running = match method {
        MapMethod::Pdf => {
            let good = goodness_pdf_graph(g, &map, knots, &spec)?;
            g.scalar_mul(good, -1.0)
        }
        MapMethod::Sde => {
            let noise = sde_noise(cfg.sde_steps, spec.dim(), rng);
            goodness_sde_graph(g, &map, knots, &spec, cfg.sde_steps, &noise)?
        }
    };
    let scaled = g.scalar_mul(running, cfg.alpha);
    let total = g.add(terminal, scaled)?;
    Ok(LossParts {
        total,
        terminal,
        running: Some(running),
    })
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub train_loss: f64,
    pub terminal_loss: f64,
    pub running_cost: f64,
    pub dev_metric: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,train_loss,terminal_loss,running_cost,dev_metric";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        let dev = self.dev_metric.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.step, self.train_loss, self.terminal_loss, self.running_cost, dev)
    }
}

pub fn metrics_csv(history: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in history {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-on-dev checkpoint.
    pub pet: PetParams,
    pub best_dev: f64,
    pub best_step: usize,
    pub history: Vec<MetricRow>,
}

/// Trains only the PET parameters; the backbone and the map stay frozen.
/// Dev evaluation runs every `eval_every` steps and after the last step, and
/// the first checkpoint reaching the best dev metric is returned.
#[allow(clippy::too_many_arguments)]
pub fn train_pet(
    backbone: &BackboneState,
    pet_cfg: &PetConfig,
    reg: Option<&Regularizer>,
    train_set: &[TaskSample],
    dev_set: &[TaskSample],
    label_words: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Data("train and dev sets must be non-empty".into()));
    }
    if let (Some(m), None) = (cfg.effective_method().map_method(), reg) {
        return Err(Error::MissingMap(m.name()));
    }
    let mut pet = PetParams::init(backbone, pet_cfg, cfg.seed)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_7463);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let max_len = backbone.config.max_seq_len;
    let inputs: Vec<(Vec<usize>, usize)> = train_set.iter().map(TaskSample::model_input).collect::<Result<_>>()?;

    let mut best: Option<(f64, usize, PetParams)> = None;
    let mut history = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let mut g = Graph::new();
        let mut vars = backbone.bind(&mut g, false, true);
        let bound = pet.bind(&mut g, true, max_len);
        bound.install(&mut vars)?;
        let mut totals = Vec::with_capacity(cfg.batch_size);
        let (mut terminal_sum, mut running_sum) = (0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let i = batch_rng.random_range(0..train_set.len());
            let (tokens, o) = &inputs[i];
            let out = backbone.forward(&mut g, &vars, tokens, *o, &bound)?;
            let trace = TraceVars {
                h_out: out.h_out.clone(),
                h_ctx: out.h_ctx.clone(),
            };
            let parts = total_loss(&mut g, out.logits, train_set[i].label_word, &trace, reg, cfg, &mut noise_rng)?;
            terminal_sum += g.value(parts.terminal).item();
            running_sum += parts.running.map_or(0.0, |r| g.value(r).item());
            totals.push(parts.total);
        }
        let stacked = g.concat(&totals, 0)?;
        let loss = g.mean(stacked);
        let train_loss = g.value(loss).item();
        let grads = g.backward(loss)?;
        let mut grads = grads.collect(&bound.vars())?;
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let refs: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
        let lr = warmup_lr(cfg.learning_rate, step, cfg.max_steps, cfg.warmup_ratio);
        adam.step_with_lr(&mut pet.tensors_mut(), &refs, lr)?;

        let step_no = step + 1;
        let dev_metric = if step_no % cfg.eval_every == 0 || step_no == cfg.max_steps {
            let m = evaluate(backbone, Some(&pet), dev_set, label_words, cfg.metric)?;
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                best = Some((m, step_no, pet.clone()));
            }
            Some(m)
        } else {
            None
        };
        let n = cfg.batch_size as f64;
        history.push(MetricRow {
            step: step_no,
            train_loss,
            terminal_loss: terminal_sum / n,
            running_cost: running_sum / n,
            dev_metric,
        });
    }
    let (best_dev, best_step, pet) = match best {
        Some(b) => b,
        None => (evaluate(backbone, Some(&pet), dev_set, label_words, cfg.metric)?, 0, pet),
    };
    Ok(TrainOutcome {
        pet,
        best_dev,
        best_step,
        history,
    })
}

/// Logits at the output position; the running cost is never evaluated here.
pub fn predict_logits(backbone: &BackboneState, pet: Option<&PetParams>, sample: &TaskSample) -> Result<Vec<f64>> {
    let (tokens, o) = sample.model_input()?;
    let mut g = Graph::new();
    let mut vars = backbone.bind(&mut g, false, true);
    let out = match pet {
        Some(p) => {
            let bound = p.bind(&mut g, false, backbone.config.max_seq_len);
            bound.install(&mut vars)?;
            backbone.forward(&mut g, &vars, &tokens, o, &bound)?
        }
        None => backbone.forward(&mut g, &vars, &tokens, o, &crate::backbone::NoHooks)?,
    };
    Ok(g.value(out.logits).data().to_vec())
}

/// Index into `label_words` of the highest-scoring label word.
pub fn predict_label(logits: &[f64], label_words: &[usize]) -> usize {
    let scores: Vec<f64> = label_words.iter().map(|&w| logits[w]).collect();
    argmax(&scores)
}

pub fn evaluate(
    backbone: &BackboneState,
    pet: Option<&PetParams>,
    dataset: &[TaskSample],
    label_words: &[usize],
    metric: Metric,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    if metric != Metric::Accuracy && label_words.len() != 2 {
        return Err(Error::MetricLabels {
            metric: metric.name(),
            classes: label_words.len(),
        });
    }
    let mut pred = Vec::with_capacity(dataset.len());
    let mut gold = Vec::with_capacity(dataset.len());
    for s in dataset {
        let g = label_words
            .iter()
            .position(|&w| w == s.label_word)
            .ok_or_else(|| Error::Data(format!("label word {} is not among {label_words:?}", s.label_word)))?;
        gold.push(g);
        pred.push(predict_label(&predict_logits(backbone, pet, s)?, label_words));
    }
    Ok(match metric {
        Metric::Accuracy => accuracy(&pred, &gold),
        Metric::F1 => f1_binary(&pred, &gold),
        Metric::Matthews => matthews(&pred, &gold),
    })
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / gold.len().max(1) as f64
}

/// `(tp, fp, fn, tn)` with class 1 positive.
pub fn confusion(pred: &[usize], gold: &[usize]) -> (f64, f64, f64, f64) {
    let mut c = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p == 1, g == 1) {
            (true, true) => c.0 += 1.0,
            (true, false) => c.1 += 1.0,
            (false, true) => c.2 += 1.0,
            (false, false) => c.3 += 1.0,
        }
    }
    c
}

pub fn f1_binary(pred: &[usize], gold: &[usize]) -> f64 {
    let (tp, fp, fn_, _) = confusion(pred, gold);
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

/// Zero whenever any factor of the denominator vanishes.
pub fn matthews(pred: &[usize], gold: &[usize]) -> f64 {
    let (tp, fp, fn_, tn) = confusion(pred, gold);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0.0) {
        return 0.0;
    }
    (tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt()
}

/// Per class (ascending label word) draw `2k` examples without replacement;
/// the first `k` go to train and the next `k` to dev.
pub fn fewshot_split(dataset: &[TaskSample], k: usize, seed: u64) -> Result<(Vec<TaskSample>, Vec<TaskSample>)> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        by_class.entry(s.label_word).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (&label, idx) in &by_class {
        if idx.len() < 2 * k {
            return Err(Error::InsufficientClass {
                label,
                have: idx.len(),
                need: 2 * k,
            });
        }
        let picked: Vec<usize> = idx.choose_multiple(&mut rng, 2 * k).copied().collect();
        train.extend(picked[..k].iter().map(|&i| dataset[i].clone()));
        dev.extend(picked[k..].iter().map(|&i| dataset[i].clone()));
    }
    Ok((train, dev))
}

/// Sorted distinct label words of a dataset.
pub fn label_words_of(dataset: &[TaskSample]) -> Vec<usize> {
    let mut words: Vec<usize> = dataset.iter().map(|s| s.label_word).collect();
    words.sort_unstable();
    words.dedup();
    words
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_hand_values() {
        // TP=2, FP=1, FN=1, TN=2
        let pred = [1, 1, 1, 0, 0, 0];
        let gold = [1, 1, 0, 1, 0, 0];
        assert!((f1_binary(&pred, &gold) - 2.0 / 3.0).abs() < 1e-15);
        assert!((matthews(&pred, &gold) - 1.0 / 3.0).abs() < 1e-15);
        assert!((accuracy(&pred, &gold) - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(accuracy(&gold, &gold), 1.0);
        assert_eq!(f1_binary(&gold, &gold), 1.0);
        assert_eq!(matthews(&gold, &gold), 1.0);
        assert_eq!(matthews(&[1, 1, 1, 1], &[1, 1, 0, 0]), 0.0);
    }

    #[test]
    fn model_input_variants() {
        let s = TaskSample::new(vec![4, 5, 6], 9);
        assert_eq!(s.model_input().unwrap(), (vec![4, 5, 6, MASK_TOKEN], 3));
        let s = TaskSample {
            mask_position: Some(1),
            ..s
        };
        assert_eq!(s.model_input().unwrap(), (vec![4, MASK_TOKEN, 6], 1));
        let s = TaskSample {
            mask_position: Some(3),
            ..s
        };
        assert!(s.model_input().is_err());
    }

    fn pool(per_class: usize) -> Vec<TaskSample> {
        (0..2 * per_class).map(|i| TaskSample::new(vec![2 + i % 7, i % 5 + 2], 10 + i % 2)).collect()
    }

    #[test]
    fn fewshot_sizes_and_disjointness() {
        let data: Vec<TaskSample> = (0..100)
            .map(|i| TaskSample::new(vec![i + 2], 10 + i % 2))
            .collect();
        let (train, dev) = fewshot_split(&data, 16, 3).unwrap();
        assert_eq!((train.len(), dev.len()), (32, 32));
        for w in [10, 11] {
            assert_eq!(train.iter().filter(|s| s.label_word == w).count(), 16);
            assert_eq!(dev.iter().filter(|s| s.label_word == w).count(), 16);
        }
        assert!(train.iter().all(|t| !dev.contains(t)));

        let tiny = vec![TaskSample::new(vec![2], 5), TaskSample::new(vec![3], 5)];
        let (a, b) = fewshot_split(&tiny, 1, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert_ne!(a[0], b[0]);

        let err = fewshot_split(&pool(3), 4, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientClass { label: 10, have: 3, need: 8 }));
    }

    #[test]
    fn alpha_zero_disables_the_method() {
        let cfg = TrainConfig {
            method: RegMethod::Pdf,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_method(), RegMethod::None);
        let cfg = TrainConfig { alpha: 0.1, ..cfg };
        assert_eq!(cfg.effective_method(), RegMethod::Pdf);
        assert!(TrainConfig { alpha: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![
            MetricRow { step: 1, train_loss: 0.5, terminal_loss: 0.5, running_cost: 0.0, dev_metric: None },
            MetricRow { step: 2, train_loss: 0.25, terminal_loss: 0.2, running_cost: 0.5, dev_metric: Some(0.75) },
        ];
        assert_eq!(metrics_csv(&rows), format!("{METRICS_HEADER}\n1,0.5,0.5,0,\n2,0.25,0.2,0.5,0.75\n"));
    }
}
