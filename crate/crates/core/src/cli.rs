//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 on usage or configuration errors, 2 on data errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    bridge_distance, centroid_distance, kendall_tau_b, pearson, svg_line_chart, Correlation, ProbeRecord, RunRecord,
    PROBE_FILE, SUMMARY_FILE,
};
use crate::backbone::{masked_accuracy, pretrain_mlm, BackboneState, ModelConfig, PretrainConfig};
use crate::bridges::{sample_path, BridgeKind, BridgeSpec};
use crate::data::{
    masked_samples, read_jsonl, validate_samples, write_jsonl, LanguageConfig, SyntheticLanguage, TaskConfig, TopicTask,
};
use crate::error::{Error, Result};
use crate::latent_map::{fit_map, BridgeSettings, EndpointTable, FitMapConfig, MapMethod, MapNet};
use crate::pets::{PetConfig, PetKind, PetParams};
use crate::pipeline::{
    evaluate, fewshot_split, metrics_csv, train_pet, Metric, RegMethod, Regularizer, TaskSample,
    TrainConfig,
};
use crate::snapshot::Snapshot;

/// Dataset sizes for the synthetic generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub corpus_size: usize,
    pub heldout_size: usize,
    pub map_samples: usize,
    pub task_pool: usize,
    pub eval_size: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus_size: 4000,
            heldout_size: 500,
            map_samples: 1500,
            task_pool: 1000,
            eval_size: 400,
            k: 16,
            seed: 7,
        }
    }
}

/// Everything `--config` may set; unspecified fields keep their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub language: LanguageConfig,
    pub task: TaskConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub map: FitMapConfig,
    pub pet: PetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))
            }
        }
    }

    fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.pretrain.seed = s;
            self.map.seed = s;
            self.train.seed = s;
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "bridge-pet", version, about = "Bridge-regularized parameter-efficient tuning on a toy frozen transformer")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic datasets as JSONL.
    Generate(GenerateArgs),
    /// Pretrain the backbone on the synthetic corpus (or --corpus).
    Pretrain(PretrainArgs),
    /// Fit the latent map on the frozen backbone.
    FitMap(FitMapArgs),
    /// Train one PET with an optional bridge running cost.
    TrainPet(TrainPetArgs),
    /// Evaluate a backbone with an optional PET on a dataset.
    Eval(EvalArgs),
    /// Few-shot runs over several seeds.
    Fewshot(FewshotArgs),
    /// Sample bridge paths as CSV.
    SampleBridge(SampleBridgeArgs),
    /// Centroid distances, bridge distances and correlations over run directories.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// corpus, masked or task
    #[arg(long, default_value = "task")]
    what: String,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// JSONL file of token arrays; defaults to the synthetic language.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct FitMapArgs {
    #[arg(long)]
    backbone: PathBuf,
    /// JSONL task samples; defaults to masked samples from the synthetic language.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    method: Option<MapMethod>,
    #[arg(long)]
    bridge: Option<BridgeKind>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct PetArgs {
    #[arg(long)]
    backbone: PathBuf,
    /// Map snapshot; endpoints default to endpoints.snp next to it.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    endpoints: Option<PathBuf>,
    #[arg(long)]
    pet: Option<PetKind>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    method: Option<RegMethod>,
    #[arg(long)]
    bridge: Option<BridgeKind>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    metric: Option<Metric>,
}

#[derive(Args, Debug)]
struct TrainPetArgs {
    #[command(flatten)]
    common: PetArgs,
    /// Train/dev JSONL; without them a few-shot split of the synthetic task is used.
    #[arg(long, requires = "dev")]
    train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    dev: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    pet: Option<PathBuf>,
    /// JSONL samples; defaults to a synthetic task evaluation set.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "accuracy")]
    metric: Metric,
}

#[derive(Args, Debug)]
struct FewshotArgs {
    #[command(flatten)]
    common: PetArgs,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
}

#[derive(Args, Debug)]
struct SampleBridgeArgs {
    #[arg(long, default_value = "brownian")]
    bridge: BridgeKind,
    /// Endpoint, comma separated for several dimensions.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    beta: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    paths: usize,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1.0)]
    q: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Layer whose output-position states form the clusters; defaults to the last.
    #[arg(long)]
    layer: Option<usize>,
    /// PDF map for bridge distances; endpoints default to endpoints.snp next to it.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    endpoints: Option<PathBuf>,
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed);
    let out = cli.out.clone();
    match cli.command {
        Command::Generate(a) => generate(&cfg, a, out),
        Command::Pretrain(a) => pretrain(&mut cfg, a, out),
        Command::FitMap(a) => fit_map_cmd(&mut cfg, a, out),
        Command::TrainPet(a) => train_pet_cmd(&mut cfg, a, out),
        Command::Eval(a) => eval_cmd(&cfg, a, out),
        Command::Fewshot(a) => fewshot_cmd(&mut cfg, a, out, cli.seed.unwrap_or(0)),
        Command::SampleBridge(a) => sample_bridge(a, out, cli.seed.unwrap_or(0)),
        Command::Analyze(a) => analyze(a, out),
    }
}

fn out_dir(out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn language(cfg: &RunConfig) -> Result<SyntheticLanguage> {
    let lang = LanguageConfig {
        vocab_size: cfg.model.vocab_size,
        ..cfg.language.clone()
    };
    SyntheticLanguage::new(lang)
}

fn task(cfg: &RunConfig) -> Result<TopicTask> {
    TopicTask::new(language(cfg)?, cfg.task.clone())
}

fn generate(cfg: &RunConfig, a: GenerateArgs, out: Option<PathBuf>) -> Result<()> {
    let dir = out_dir(out)?;
    let seed = cfg.data.seed;
    match a.what.as_str() {
        "corpus" => {
            let corpus = language(cfg)?.corpus(a.n.unwrap_or(cfg.data.corpus_size), seed);
            write_jsonl(&dir.join("corpus.jsonl"), &corpus)
        }
        "masked" => {
            let corpus = language(cfg)?.corpus(a.n.unwrap_or(cfg.data.map_samples), seed ^ 0x6d61);
            write_jsonl(&dir.join("masked.jsonl"), &masked_samples(&corpus, seed))
        }
        "task" => {
            let t = task(cfg)?;
            write_jsonl(&dir.join("task.jsonl"), &t.dataset(a.n.unwrap_or(cfg.data.task_pool), seed))
        }
        other => Err(Error::InvalidConfig(format!("unknown dataset {other:?}; use corpus, masked or task"))),
    }
}

#[derive(Serialize, Deserialize)]
struct BackboneHeader {
    model: ModelConfig,
}

pub fn save_backbone(state: &BackboneState, path: &Path) -> Result<()> {
    let header = serde_json::to_value(BackboneHeader {
        model: state.config.clone(),
    })?;
    let tensors = state.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    Snapshot::new("backbone", header, tensors).save(path)
}

pub fn load_backbone(path: &Path) -> Result<BackboneState> {
    let snap = Snapshot::load_kind(path, "backbone")?;
    let header: BackboneHeader = snap.header_as()?;
    BackboneState::from_tensors(header.model, snap.tensors)
}

fn pretrain(cfg: &mut RunConfig, a: PretrainArgs, out: Option<PathBuf>) -> Result<()> {
    let dir = out_dir(out)?;
    if let Some(s) = a.steps {
        cfg.pretrain.steps = s;
    }
    let lang = language(cfg)?;
    let corpus: Vec<Vec<usize>> = match &a.corpus {
        Some(p) => read_jsonl(p)?,
        None => lang.corpus(cfg.data.corpus_size, cfg.data.seed),
    };
    if let Some((i, _)) = corpus
        .iter()
        .enumerate()
        .find(|(_, s)| s.is_empty() || s.len() > cfg.model.max_seq_len || s.iter().any(|&t| t >= cfg.model.vocab_size))
    {
        return Err(Error::Data(format!("corpus sequence {i} is empty, too long or out of vocabulary")));
    }
    let state = pretrain_mlm(cfg.model.clone(), &corpus, &cfg.pretrain)?;
    save_backbone(&state, &dir.join("backbone.snp"))?;
    let heldout = lang.corpus(cfg.data.heldout_size, cfg.data.seed ^ 0x0eba1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    let acc = masked_accuracy(&state, &heldout, &mut rng)?;
    let report = serde_json::json!({
        "model": cfg.model,
        "pretrain": cfg.pretrain,
        "heldout_masked_accuracy": acc,
        "chance": 1.0 / cfg.model.vocab_size as f64,
        "checksum": format!("{:016x}", state.checksum()),
    });
    write_json(&dir.join("pretrain.json"), &report)?;
    println!("held-out masked accuracy {acc:.4} (chance {:.4})", 1.0 / cfg.model.vocab_size as f64);
    Ok(())
}

fn fit_map_cmd(cfg: &mut RunConfig, a: FitMapArgs, out: Option<PathBuf>) -> Result<()> {
    let dir = out_dir(out)?;
    let backbone = load_backbone(&a.backbone)?;
    if let Some(m) = a.method {
        cfg.map.method = m;
    }
    if let Some(b) = a.bridge {
        cfg.map.bridge.kind = b;
    }
    if let Some(s) = a.steps {
        cfg.map.steps = s;
    }
    let samples: Vec<TaskSample> = match &a.data {
        Some(p) => read_jsonl(p)?,
        None => {
            let corpus = language(cfg)?.corpus(cfg.data.map_samples, cfg.data.seed ^ 0x6d61);
            masked_samples(&corpus, cfg.data.seed)
        }
    };
    validate_samples(&samples, backbone.config.vocab_size, backbone.config.max_seq_len)?;
    let (report, endpoints) = fit_map(&backbone, &samples, &cfg.map)?;
    report.map.to_snapshot(&cfg.map.bridge).save(&dir.join("map.snp"))?;
    endpoints.to_snapshot().save(&dir.join("endpoints.snp"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(dir.join("fit_metrics.csv"), csv)?;
    write_json(&dir.join("fit_config.json"), &cfg.map)?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        println!("{} map objective {first:.4} -> {last:.4}", cfg.map.method);
    }
    Ok(())
}

fn load_regularizer(map: Option<&Path>, endpoints: Option<&Path>) -> Result<Option<(Regularizer, BridgeSettings)>> {
    let Some(map_path) = map else { return Ok(None) };
    let (map, bridge) = MapNet::from_snapshot(&Snapshot::load(map_path)?)?;
    let ep_path = match endpoints {
        Some(p) => p.to_path_buf(),
        None => map_path.with_file_name("endpoints.snp"),
    };
    let endpoints = EndpointTable::from_snapshot(&Snapshot::load(&ep_path)?)?;
    Ok(Some((Regularizer { map, endpoints }, bridge)))
}

struct PetSetup {
    backbone: BackboneState,
    reg: Option<Regularizer>,
}

fn pet_setup(cfg: &mut RunConfig, a: &PetArgs) -> Result<PetSetup> {
    let backbone = load_backbone(&a.backbone)?;
    if let Some(k) = a.pet {
        cfg.pet.kind = k;
    }
    if let Some(al) = a.alpha {
        cfg.train.alpha = al;
    }
    if let Some(s) = a.steps {
        cfg.train.max_steps = s;
    }
    if let Some(m) = a.metric {
        cfg.train.metric = m;
    }
    let reg = load_regularizer(a.map.as_deref(), a.endpoints.as_deref())?;
    match (a.method, &reg) {
        (Some(m), _) => cfg.train.method = m,
        (None, Some((r, _))) => {
            cfg.train.method = match r.map.config.method {
                MapMethod::Pdf => RegMethod::Pdf,
                MapMethod::Sde => RegMethod::Sde,
            }
        }
        (None, None) => {}
    }
    match (a.bridge, &reg) {
        (Some(b), _) => cfg.train.bridge_kind = b,
        (None, Some((_, settings))) => {
            cfg.train.bridge_kind = settings.kind;
            cfg.train.ou_q = settings.q;
            cfg.train.ou_sigma = settings.sigma;
        }
        (None, None) => {}
    }
    Ok(PetSetup {
        backbone,
        reg: reg.map(|(r, _)| r),
    })
}

/// Trains one run and writes its directory.
fn write_run(
    cfg: &RunConfig,
    setup: &PetSetup,
    train: &[TaskSample],
    dev: &[TaskSample],
    label_words: &[usize],
    dir: &Path,
) -> Result<f64> {
    fs::create_dir_all(dir)?;
    let bb = &setup.backbone;
    validate_samples(train, bb.config.vocab_size, bb.config.max_seq_len)?;
    validate_samples(dev, bb.config.vocab_size, bb.config.max_seq_len)?;
    let outcome = train_pet(bb, &cfg.pet, setup.reg.as_ref(), train, dev, label_words, &cfg.train)?;
    write_json(&dir.join("config.json"), cfg)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.history))?;
    outcome.pet.to_snapshot().save(&dir.join("pet.snp"))?;
    let probes = dev
        .iter()
        .map(|s| {
            let (tokens, o) = s.model_input()?;
            let mut g = crate::tensor::Graph::new();
            let mut vars = bb.bind(&mut g, false, true);
            let bound = outcome.pet.bind(&mut g, false, bb.config.max_seq_len);
            bound.install(&mut vars)?;
            let fwd = bb.forward(&mut g, &vars, &tokens, o, &bound)?;
            Ok(ProbeRecord {
                label_word: s.label_word,
                trace: fwd.trace(&g),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&dir.join(PROBE_FILE), &probes)?;
    let summary = serde_json::json!({
        "best_dev": outcome.best_dev,
        "best_step": outcome.best_step,
        "metric": cfg.train.metric,
        "label_words": label_words,
        "backbone_checksum": format!("{:016x}", bb.checksum()),
        "trainable_parameters": outcome.pet.num_parameters(),
    });
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(outcome.best_dev)
}

fn label_words_for(data: &[TaskSample]) -> Result<Vec<usize>> {
    let words = crate::pipeline::label_words_of(data);
    if words.len() < 2 {
        return Err(Error::Data(format!("need at least two label words, found {words:?}")));
    }
    Ok(words)
}

fn train_pet_cmd(cfg: &mut RunConfig, a: TrainPetArgs, out: Option<PathBuf>) -> Result<()> {
    let dir = out_dir(out)?;
    let setup = pet_setup(cfg, &a.common)?;
    if let Some(k) = a.k {
        cfg.data.k = k;
    }
    let (train, dev) = match (&a.train, &a.dev) {
        (Some(t), Some(d)) => (read_jsonl(t)?, read_jsonl(d)?),
        _ => {
            let pool = task(cfg)?.dataset(cfg.data.task_pool, cfg.data.seed);
            fewshot_split(&pool, cfg.data.k, cfg.train.seed)?
        }
    };
    let mut words = label_words_for(&train)?;
    words.extend(crate::pipeline::label_words_of(&dev));
    words.sort_unstable();
    words.dedup();
    let best = write_run(cfg, &setup, &train, &dev, &words, &dir)?;
    println!("best dev {} {best:.4}", cfg.train.metric.name());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, a: EvalArgs, out: Option<PathBuf>) -> Result<()> {
    let backbone = load_backbone(&a.backbone)?;
    let pet = match &a.pet {
        Some(p) => Some(PetParams::from_snapshot(&backbone, &Snapshot::load(p)?)?),
        None => None,
    };
    let data: Vec<TaskSample> = match &a.data {
        Some(p) => read_jsonl(p)?,
        None => task(cfg)?.dataset(cfg.data.eval_size, cfg.data.seed ^ 0xe7a1),
    };
    validate_samples(&data, backbone.config.vocab_size, backbone.config.max_seq_len)?;
    let words = label_words_for(&data)?;
    let value = evaluate(&backbone, pet.as_ref(), &data, &words, a.metric)?;
    println!("{} {value}", a.metric.name());
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("eval.json"), &serde_json::json!({ "metric": a.metric, "value": value, "n": data.len() }))?;
    }
    Ok(())
}

fn fewshot_cmd(cfg: &mut RunConfig, a: FewshotArgs, out: Option<PathBuf>, base_seed: u64) -> Result<()> {
    let dir = out_dir(out)?;
    let setup = pet_setup(cfg, &a.common)?;
    if let Some(k) = a.k {
        cfg.data.k = k;
    }
    if a.seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be positive".into()));
    }
    let t = task(cfg)?;
    let pool = t.dataset(cfg.data.task_pool, cfg.data.seed);
    let test = t.dataset(cfg.data.eval_size, cfg.data.seed ^ 0xe7a1);
    let words = t.label_words().to_vec();
    let mut csv = String::from("seed,dev_metric,test_metric\n");
    let (mut dev_sum, mut test_sum) = (0.0, 0.0);
    for s in 0..a.seeds as u64 {
        let seed = base_seed + s;
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;
        let (train, dev) = fewshot_split(&pool, cfg.data.k, seed)?;
        let run_dir = dir.join(format!("seed-{seed}"));
        let dev_metric = write_run(&run_cfg, &setup, &train, &dev, &words, &run_dir)?;
        let pet = PetParams::from_snapshot(&setup.backbone, &Snapshot::load(&run_dir.join("pet.snp"))?)?;
        let test_metric = evaluate(&setup.backbone, Some(&pet), &test, &words, cfg.train.metric)?;
        csv.push_str(&format!("{seed},{dev_metric},{test_metric}\n"));
        dev_sum += dev_metric;
        test_sum += test_metric;
    }
    let n = a.seeds as f64;
    csv.push_str(&format!("mean,{},{}\n", dev_sum / n, test_sum / n));
    fs::write(dir.join("fewshot.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn sample_bridge(a: SampleBridgeArgs, out: Option<PathBuf>, seed: u64) -> Result<()> {
    let spec = BridgeSpec::new(a.bridge, a.beta.clone(), a.horizon, a.q, a.sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    if a.steps < 2 || a.paths == 0 {
        return Err(Error::InvalidConfig("--steps must be at least 2 and --paths positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = if spec.dim() == 1 {
        String::from("path,t,value\n")
    } else {
        let cols: Vec<String> = (0..spec.dim()).map(|j| format!("value_{j}")).collect();
        format!("path,t,{}\n", cols.join(","))
    };
    for p in 0..a.paths {
        let path = sample_path(&spec, a.steps, &mut rng)?;
        // the pinned start is implied; one row per step after it
        for (t, x) in path.times.iter().zip(&path.values).skip(1) {
            let vals: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            csv.push_str(&format!("{p},{t},{}\n", vals.join(",")));
        }
    }
    match out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("bridge_paths.csv"), csv)?;
        }
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn fmt_corr(name: &str, c: &Result<Correlation>) -> String {
    match c {
        Ok(c) => format!("{name},{},{}\n", c.coefficient, c.p_value),
        Err(e) => format!("{name},nan,nan # {e}\n"),
    }
}

fn analyze(a: AnalyzeArgs, out: Option<PathBuf>) -> Result<()> {
    let dir = out_dir(out)?;
    let runs = a.runs.iter().map(|d| RunRecord::load(d)).collect::<Result<Vec<_>>>()?;
    let reg = load_regularizer(a.map.as_deref(), a.endpoints.as_deref())?;
    if let Some((r, _)) = &reg {
        if r.map.config.method != MapMethod::Pdf {
            return Err(Error::InvalidConfig("bridge distances need a map fitted with the pdf method".into()));
        }
    }
    let mut csv = String::from("run,alpha,centroid_distance,dev_metric");
    if reg.is_some() {
        csv.push_str(",bridge_distance_sum,bridge_distance_mean");
    }
    csv.push('\n');
    let (mut alphas, mut dists, mut bridge_means) = (Vec::new(), Vec::new(), Vec::new());
    for run in &runs {
        let layers = run.probes.first().map(|p| p.trace.h_out.len()).unwrap_or(0);
        if layers == 0 {
            return Err(Error::Data(format!("{}: no probe traces", run.dir.display())));
        }
        let layer = a.layer.unwrap_or(layers - 1);
        let dist = centroid_distance(&run.states_by_label(layer)?)?;
        csv.push_str(&format!("{},{},{dist},{}", run.run_id, run.alpha, run.final_dev_metric));
        if let Some((r, settings)) = &reg {
            let (mut sum, mut mean) = (0.0, 0.0);
            for p in &run.probes {
                let spec = settings.spec(r.endpoints.row(p.label_word)?)?;
                let d = bridge_distance(&p.trace, &r.map, &spec)?;
                sum += d.sum;
                mean += d.per_layer_mean;
            }
            let n = run.probes.len() as f64;
            csv.push_str(&format!(",{},{}", sum / n, mean / n));
            bridge_means.push(sum / n);
        }
        csv.push('\n');
        alphas.push(run.alpha);
        dists.push(dist);
    }
    fs::write(dir.join("analysis.csv"), &csv)?;
    let mut corr = String::from("statistic,coefficient,p_value\n");
    corr.push_str(&fmt_corr("pearson_alpha_centroid", &pearson(&alphas, &dists)));
    corr.push_str(&fmt_corr("kendall_alpha_centroid", &kendall_tau_b(&alphas, &dists)));
    if !bridge_means.is_empty() {
        let dev: Vec<f64> = runs.iter().map(|r| r.final_dev_metric).collect();
        corr.push_str(&fmt_corr("kendall_bridge_distance_dev", &kendall_tau_b(&bridge_means, &dev)));
    }
    fs::write(dir.join("correlations.csv"), &corr)?;
    let mut points: Vec<(f64, f64)> = alphas.iter().copied().zip(dists.iter().copied()).collect();
    points.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    let svg = svg_line_chart("centroid distance vs alpha", "alpha", "centroid distance", &[("runs".into(), points)]);
    fs::write(dir.join("centroid_vs_alpha.svg"), svg)?;
    print!("{csv}{corr}");
    Ok(())
}
