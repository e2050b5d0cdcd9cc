//! One function per subcommand. Each resolves its layered config, reads its
//! inputs, writes its artifacts under `--out` and hands back the run record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use synicl::context::Strategy;
use synicl::ctxopt::{best_of_budget_random, error_reduction, run_ga, GaConfig, Problem, TraceRecord};
use synicl::dataset::{ingest_csv, make_fewshot_split, make_optimization_split, Dataset, SplitBundle, SplitMode};
use synicl::inverse::{rank_curve, CandidatePool, DrugEmbeddingBank, QuerySet, RankConfig};
use synicl::metrics::MetricsReport;
use synicl::model::checkpoint::Checkpoint;
use synicl::model::grad::Objective;
use synicl::model::{Model, ModelConfig};
use synicl::synthgen::{sample_dataset, sample_world_with, WorldSpec};
use synicl::train::{evaluate_items, train as fit, EvalConfig, EvalResult, TrainConfig};
use synicl::{Error, Result, Scalar};

use crate::config::{peek, resolve, user_layers};
use crate::manifest::Run;
use crate::Common;

/// What `main` needs to write the manifest.
pub struct Done {
    pub run: Run,
    pub config_json: Vec<u8>,
    pub seed: u64,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config types serialize to JSON")
}

fn flag<T: Serialize>(out: &mut Vec<(&'static str, Value)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, to_value(v)));
    }
}

fn user(common: &Common, mut flags: Vec<(&'static str, Value)>, seed_key: &'static str) -> Result<Value> {
    flag(&mut flags, seed_key, &common.seed);
    user_layers(common.config.as_deref(), flags, &common.sets)
}

/// Persist the resolved config as `config.json`.
fn begin<C: Serialize>(mut run: Run, cfg: &C, seed: u64) -> Result<Done> {
    let mut config_json = serde_json::to_vec_pretty(cfg)?;
    config_json.push(b'\n');
    run.write_bytes("config.json", &config_json)?;
    Ok(Done { run, config_json, seed })
}

fn required_path(user: &Value, key: &str) -> Result<PathBuf> {
    match peek(user, key) {
        Some(Value::String(s)) => Ok(PathBuf::from(s)),
        Some(other) => Err(Error::Config(format!("`{key}` must be a path, got {other}"))),
        None => Err(Error::Config(format!("missing `{key}` (set it in the config or with --{key})"))),
    }
}

fn load_data(run: &mut Run, path: &Path, threshold: f64) -> Result<Dataset> {
    run.input(path)?;
    ingest_csv(path, threshold)
}

fn load_split(run: &mut Run, path: &Path, data: &Dataset) -> Result<SplitBundle> {
    run.input(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split = SplitBundle::from_json(&text)?;
    split.validate(data)?;
    Ok(split)
}

fn load_bank(run: &mut Run, path: &Path, data: &Dataset) -> Result<DrugEmbeddingBank> {
    run.input(path)?;
    DrugEmbeddingBank::read_csv(path, &data.vocab)
}

/// A checkpoint rebuilt in the precision it was saved in.
enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn load_model(run: &mut Run, path: &Path, data: &Dataset) -> Result<AnyModel> {
    run.input(path)?;
    let ck = Checkpoint::load(path)?;
    match ck.dtype.as_str() {
        "f32" => Ok(AnyModel::F32(ck.to_model(Some(&data.vocab))?)),
        "f64" => Ok(AnyModel::F64(ck.to_model(Some(&data.vocab))?)),
        other => Err(Error::Input(format!("checkpoint dtype `{other}` is not f32 or f64"))),
    }
}

macro_rules! with_model {
    ($m:expr, $model:ident => $body:expr) => {
        match $m {
            AnyModel::F32($model) => $body,
            AnyModel::F64($model) => $body,
        }
    };
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of tuples to sample.
    #[arg(long)]
    tuples: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthConfig {
    world: WorldSpec,
    tuples: usize,
    seed: u64,
}

pub fn synth(a: &SynthArgs) -> Result<Done> {
    let mut flags = Vec::new();
    flag(&mut flags, "tuples", &a.tuples);
    let defaults = json!({"world": WorldSpec::desk(), "tuples": 4000, "seed": 0});
    let cfg: SynthConfig = resolve(defaults, user(&a.common, flags, "seed")?)?;
    let mut done = begin(Run::new(&a.common.out)?, &cfg, cfg.seed)?;
    let world = sample_world_with(&cfg.world, cfg.seed)?;
    let data = sample_dataset(&world, cfg.tuples, cfg.seed)?;
    let run = &mut done.run;
    data.write_csv(&run.produced("data.csv"))?;
    let mut world_json = world.to_json()?.into_bytes();
    world_json.push(b'\n');
    run.write_bytes("world.json", &world_json)?;
    DrugEmbeddingBank::from_world(&world)?.write_csv(&run.produced("bank.csv"), &data.vocab)?;
    eprintln!(
        "sampled {} tuples over {} drugs and {} cells",
        data.tuples.len(),
        data.vocab.num_drugs(),
        data.vocab.num_cells()
    );
    Ok(done)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Exactly `n` context-bank tuples per held-out entity.
    Fewshot,
    /// Context bank, validation and test for context optimization.
    Optimization,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    regime: Option<Regime>,
    /// `unknown-drug` or `unknown-cell`.
    #[arg(long)]
    mode: Option<String>,
    /// Number of held-out entities.
    #[arg(long)]
    m: Option<usize>,
    /// Context-bank tuples per held-out entity (few-shot regime).
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitConfig {
    data: PathBuf,
    regime: Regime,
    mode: SplitMode,
    m: usize,
    n: usize,
    #[serde(default = "default_threshold")]
    label_threshold: f64,
    seed: u64,
}

pub fn split(a: &SplitArgs) -> Result<Done> {
    let mut flags = Vec::new();
    flag(&mut flags, "data", &a.data);
    flag(&mut flags, "regime", &a.regime);
    flag(&mut flags, "mode", &a.mode);
    flag(&mut flags, "m", &a.m);
    flag(&mut flags, "n", &a.n);
    let defaults = json!({
        "regime": Regime::Fewshot, "mode": SplitMode::UnknownDrug,
        "m": 10, "n": 20, "label_threshold": 0.5, "seed": 0,
    });
    let cfg: SplitConfig = resolve(defaults, user(&a.common, flags, "seed")?)?;
    let mut done = begin(Run::new(&a.common.out)?, &cfg, cfg.seed)?;
    let data = load_data(&mut done.run, &cfg.data, cfg.label_threshold)?;
    let split = match cfg.regime {
        Regime::Fewshot => make_fewshot_split(&data, cfg.m, cfg.n, cfg.mode, cfg.seed)?,
        Regime::Optimization => make_optimization_split(&data, cfg.m, cfg.mode, cfg.seed)?,
    };
    let mut bytes = split.to_json()?.into_bytes();
    bytes.push(b'\n');
    done.run.write_bytes("split.json", &bytes)?;
    eprintln!(
        "held out {} entities: train {}, context bank {}, validation {}, test {}",
        split.held_out.len(),
        split.train.len(),
        split.context_bank.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(done)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 64 wide, 4 layers; trains in minutes on a laptop.
    Desk,
    /// Full-size unknown-drug recipe.
    FullDrug,
    /// Full-size unknown-cell recipe.
    FullCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Dtype {
    F32,
    F64,
}

/// Model size; the vocabulary sizes come from the dataset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Shape {
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    max_ctx_examples: usize,
    retrieval_dim: usize,
}

impl Shape {
    fn of(c: &ModelConfig) -> Self {
        Shape {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            max_ctx_examples: c.max_ctx_examples,
            retrieval_dim: c.retrieval_dim,
        }
    }

    fn config(&self, data: &Dataset) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_ctx_examples: self.max_ctx_examples,
            num_drugs: data.vocab.num_drugs(),
            num_cells: data.vocab.num_cells(),
            retrieval_dim: self.retrieval_dim,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    /// Drug embedding bank CSV (retrieval objective).
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// `synergy` or `retrieval`.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    dtype: Option<Dtype>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRunConfig {
    data: PathBuf,
    split: PathBuf,
    #[serde(default)]
    bank: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    label_threshold: f64,
    preset: Preset,
    dtype: Dtype,
    model: Shape,
    train: TrainConfig,
}

pub fn train(a: &TrainArgs) -> Result<Done> {
    let mut flags = Vec::new();
    flag(&mut flags, "data", &a.data);
    flag(&mut flags, "split", &a.split);
    flag(&mut flags, "bank", &a.bank);
    flag(&mut flags, "preset", &a.preset);
    flag(&mut flags, "train.objective", &a.objective);
    flag(&mut flags, "train.epochs", &a.epochs);
    flag(&mut flags, "dtype", &a.dtype);
    let user = user(&a.common, flags, "train.seed")?;

    // Defaults depend on the preset, the split's mode and the bank width.
    let mut run = Run::new(&a.common.out)?;
    let threshold = peek(&user, "label_threshold").and_then(Value::as_f64).unwrap_or(0.5);
    let data = load_data(&mut run, &required_path(&user, "data")?, threshold)?;
    let split = load_split(&mut run, &required_path(&user, "split")?, &data)?;
    let bank = match peek(&user, "bank") {
        Some(Value::String(p)) => Some(load_bank(&mut run, Path::new(p), &data)?),
        _ => None,
    };
    let preset: Preset = match peek(&user, "preset") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?,
        None => Preset::Desk,
    };
    let rdim = bank.as_ref().map_or(4, DrugEmbeddingBank::dim);
    let (shape, tc) = match preset {
        Preset::Desk => (ModelConfig::desk(&data.vocab, rdim), TrainConfig::desk(split.mode, 0)),
        Preset::FullDrug => (ModelConfig::full_drug(&data.vocab), TrainConfig::full_drug(0)),
        Preset::FullCell => (ModelConfig::full_cell(&data.vocab), TrainConfig::full_cell(0)),
    };
    let defaults = json!({
        "label_threshold": 0.5, "preset": preset, "dtype": Dtype::F32,
        "model": Shape::of(&shape), "train": tc,
    });
    let cfg: TrainRunConfig = resolve(defaults, user)?;
    if let Some(b) = &bank {
        if cfg.train.objective == Objective::Retrieval && b.dim() != cfg.model.retrieval_dim {
            return Err(Error::Config(format!(
                "model.retrieval_dim {} does not match the bank width {}",
                cfg.model.retrieval_dim,
                b.dim()
            )));
        }
    }
    let mut done = begin(run, &cfg, cfg.train.seed)?;
    let mc = cfg.model.config(&data);
    let history = match cfg.dtype {
        Dtype::F32 => fit_and_save::<f32>(&mut done.run, mc, &data, &split, &cfg.train, bank.as_ref())?,
        Dtype::F64 => fit_and_save::<f64>(&mut done.run, mc, &data, &split, &cfg.train, bank.as_ref())?,
    };
    done.run.write_jsonl("history.jsonl", &history)?;
    Ok(done)
}

fn fit_and_save<T: Scalar>(
    run: &mut Run,
    mc: ModelConfig,
    data: &Dataset,
    split: &SplitBundle,
    tc: &TrainConfig,
    bank: Option<&DrugEmbeddingBank>,
) -> Result<Vec<synicl::train::HistoryRecord>> {
    let mut model = Model::<T>::init(mc, tc.seed)?;
    let history = fit(&mut model, data, split, tc, bank, |h| {
        eprintln!("epoch {:>3}  step {:>6}  loss {:.5}  lr {:.2e}", h.epoch, h.step, h.loss, h.lr);
    })?;
    Checkpoint::from_model(&model, &data.vocab, tc.seed).save(&run.produced("checkpoint.json"))?;
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ItemSet {
    Test,
    Validation,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Context examples per query; 0 is zero-shot.
    #[arg(long)]
    n_ctx: Option<usize>,
    /// `random`, `graph` or `unknown-first`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long, value_enum)]
    items: Option<ItemSet>,
    /// Fixed per-entity contexts written by `optimize`.
    #[arg(long)]
    context_file: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRunConfig {
    data: PathBuf,
    split: PathBuf,
    checkpoint: PathBuf,
    #[serde(default = "default_threshold")]
    label_threshold: f64,
    /// Defaults to the checkpoint's maximum context size.
    #[serde(default)]
    n_ctx: Option<usize>,
    strategy: Strategy,
    items: ItemSet,
    #[serde(default)]
    context_file: Option<PathBuf>,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    items: ItemSet,
    n_ctx: usize,
    /// Selection strategy, or `None` for fixed contexts from a file.
    strategy: Option<Strategy>,
    #[serde(flatten)]
    result: EvalResult,
}

pub fn eval(a: &EvalArgs) -> Result<Done> {
    let mut flags = Vec::new();
    flag(&mut flags, "data", &a.data);
    flag(&mut flags, "split", &a.split);
    flag(&mut flags, "checkpoint", &a.checkpoint);
    flag(&mut flags, "n_ctx", &a.n_ctx);
    flag(&mut flags, "strategy", &a.strategy);
    flag(&mut flags, "items", &a.items);
    flag(&mut flags, "context_file", &a.context_file);
    let defaults = json!({
        "label_threshold": 0.5, "strategy": Strategy::UnknownFirst,
        "items": ItemSet::Test, "seed": 0,
    });
    let cfg: EvalRunConfig = resolve(defaults, user(&a.common, flags, "seed")?)?;
    let mut done = begin(Run::new(&a.common.out)?, &cfg, cfg.seed)?;
    let run = &mut done.run;
    let data = load_data(run, &cfg.data, cfg.label_threshold)?;
    let split = load_split(run, &cfg.split, &data)?;
    let model = load_model(run, &cfg.checkpoint, &data)?;
    let items = match cfg.items {
        ItemSet::Test => &split.test,
        ItemSet::Validation => &split.validation,
    };
    let output = match &cfg.context_file {
        Some(path) => {
            run.input(path)?;
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let contexts: BTreeMap<String, Vec<usize>> =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let n = contexts.values().next().map_or(0, Vec::len);
            let result = with_model!(&model, m => {
                let problem = Problem::new(m, &data, &split, n)?;
                problem.evaluate(&problem.import(&contexts)?, items)?
            });
            EvalOutput {
                items: cfg.items,
                n_ctx: n,
                strategy: None,
                result,
            }
        }
        None => {
            let max = with_model!(&model, m => m.config.max_ctx_examples);
            let n_ctx = cfg.n_ctx.unwrap_or(max);
            check_n_ctx(n_ctx, max)?;
            let ec = EvalConfig {
                strategy: cfg.strategy,
                n_ctx,
                seed: cfg.seed,
            };
            let result = with_model!(&model, m => evaluate_items(m, &data, &split, items, &ec)?);
            EvalOutput {
                items: cfg.items,
                n_ctx,
                strategy: Some(cfg.strategy),
                result,
            }
        }
    };
    eprintln!("{}", summary(&output.result.report));
    run.write_json("eval.json", &output)?;
    Ok(done)
}

fn check_n_ctx(n: usize, max: usize) -> Result<()> {
    if n > max {
        return Err(Error::Config(format!("n_ctx {n} exceeds the model maximum {max}")));
    }
    Ok(())
}

fn summary(r: &MetricsReport) -> String {
    let fmt = |x: Option<f64>| x.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
    format!("{} items: ROC-AUC {}, PR-AUC {}", r.support, fmt(r.roc_auc), fmt(r.pr_auc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ga,
    ErrorReduction,
    Random,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Context examples per held-out entity.
    #[arg(long)]
    n_ctx: Option<usize>,
    /// Sampled contexts for `random` and `error-reduction`.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizeRunConfig {
    data: PathBuf,
    split: PathBuf,
    checkpoint: PathBuf,
    #[serde(default = "default_threshold")]
    label_threshold: f64,
    method: Method,
    n_ctx: usize,
    ga: GaConfig,
    budget: usize,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct OptimizeOutput {
    method: Method,
    n_ctx: usize,
    evaluations: usize,
    validation_roc_auc: f64,
    test: MetricsReport,
}

pub fn optimize(a: &OptimizeArgs) -> Result<Done> {
    let mut flags = Vec::new();
    flag(&mut flags, "data", &a.data);
    flag(&mut flags, "split", &a.split);
    flag(&mut flags, "checkpoint", &a.checkpoint);
    flag(&mut flags, "method", &a.method);
    flag(&mut flags, "n_ctx", &a.n_ctx);
    flag(&mut flags, "budget", &a.budget);
    let defaults = json!({
        "label_threshold": 0.5, "method": Method::Ga, "n_ctx": 20,
        "ga": GaConfig::default(), "budget": 200, "seed": 0,
    });
    let cfg: OptimizeRunConfig = resolve(defaults, user(&a.common, flags, "seed")?)?;
    cfg.ga.validate()?;
    if cfg.budget == 0 {
        return Err(Error::Config("budget must be >= 1".into()));
    }
    let mut done = begin(Run::new(&a.common.out)?, &cfg, cfg.seed)?;
    let run = &mut done.run;
    let data = load_data(run, &cfg.data, cfg.label_threshold)?;
    let split = load_split(run, &cfg.split, &data)?;
    let model = load_model(run, &cfg.checkpoint, &data)?;
    let (contexts, trace, output) = with_model!(&model, m => {
        let problem = Problem::new(m, &data, &split, cfg.n_ctx)?;
        let (best, fitness, evaluations, trace) = match cfg.method {
            Method::Ga => {
                let r = run_ga(&problem, &cfg.ga, cfg.seed)?;
                (r.best, r.best_fitness, r.evaluations, Some(r.trace))
            }
            Method::Random => {
                let r = best_of_budget_random(&problem, cfg.budget, cfg.seed)?;
                let mut best_so_far = f64::NEG_INFINITY;
                let trace: Vec<TraceRecord> = r
                    .fitness
                    .iter()
                    .enumerate()
                    .map(|(k, &f)| {
                        best_so_far = best_so_far.max(f);
                        TraceRecord { evaluation: k, generation: 0, fitness: f, best_so_far }
                    })
                    .collect();
                (r.best, r.max_fitness, r.evaluations, Some(trace))
            }
            Method::ErrorReduction => {
                let r = error_reduction(&problem, cfg.budget, cfg.seed)?;
                let f = problem.fitness(&r.chromosome)?;
                (r.chromosome, f, r.evaluations, None)
            }
        };
        let test = problem.evaluate(&best, &split.test)?.report;
        let output = OptimizeOutput {
            method: cfg.method,
            n_ctx: cfg.n_ctx,
            evaluations,
            validation_roc_auc: fitness,
            test,
        };
        (problem.export(&best), trace, output)
    });
    eprintln!(
        "{} evaluations, validation ROC-AUC {:.4}; test {}",
        output.evaluations,
        output.validation_roc_auc,
        summary(&output.test)
    );
    run.write_json("contexts.json", &contexts)?;
    if let Some(trace) = trace {
        run.write_jsonl("trace.jsonl", &trace)?;
    }
    run.write_json("optimize.json", &output)?;
    Ok(done)
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Largest context size on the curve.
    #[arg(long)]
    n_ctx_max: Option<usize>,
    /// `held-out` or `seen`.
    #[arg(long)]
    queries: Option<String>,
    /// `all`, `held-out` or `seen`.
    #[arg(long)]
    pool: Option<String>,
    #[arg(long)]
    max_queries: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RankRunConfig {
    data: PathBuf,
    split: PathBuf,
    checkpoint: PathBuf,
    bank: PathBuf,
    #[serde(default = "default_threshold")]
    label_threshold: f64,
    rank: RankConfig,
}

pub fn rank(a: &RankArgs) -> Result<Done> {
    let mut flags = Vec::new();
    flag(&mut flags, "data", &a.data);
    flag(&mut flags, "split", &a.split);
    flag(&mut flags, "checkpoint", &a.checkpoint);
    flag(&mut flags, "bank", &a.bank);
    flag(&mut flags, "rank.n_ctx_max", &a.n_ctx_max);
    flag(&mut flags, "rank.queries", &a.queries);
    flag(&mut flags, "rank.pool", &a.pool);
    flag(&mut flags, "rank.max_queries", &a.max_queries);
    let defaults = json!({
        "label_threshold": 0.5,
        "rank": RankConfig {
            n_ctx_max: 20,
            strategy: Strategy::UnknownFirst,
            pool: CandidatePool::All,
            queries: QuerySet::HeldOut,
            max_queries: None,
            seed: 0,
        },
    });
    let cfg: RankRunConfig = resolve(defaults, user(&a.common, flags, "rank.seed")?)?;
    let mut done = begin(Run::new(&a.common.out)?, &cfg, cfg.rank.seed)?;
    let run = &mut done.run;
    let data = load_data(run, &cfg.data, cfg.label_threshold)?;
    let split = load_split(run, &cfg.split, &data)?;
    let bank = load_bank(run, &cfg.bank, &data)?;
    let model = load_model(run, &cfg.checkpoint, &data)?;
    let curve = with_model!(&model, m => rank_curve(m, &data, &split, &bank, &cfg.rank)?);
    if let (Some(first), Some(last)) = (curve.mean_rank.first(), curve.mean_rank.last()) {
        eprintln!(
            "{} queries: mean rank {first:.2} with no context, {last:.2} with {}",
            curve.per_query.len(),
            cfg.rank.n_ctx_max
        );
    }
    run.write_json("rank.json", &curve)?;
    Ok(done)
}
