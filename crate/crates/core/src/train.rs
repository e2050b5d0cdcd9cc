//! Training loop over prefix-averaged prompts, and few-/zero-shot
//! evaluation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{
    interpolate_strategy, mask_and_assemble, select_context, training_mask_choice, ContextGraph, Masking, PromptSequence,
    Query, Strategy,
};
use crate::dataset::{Dataset, Entity, SplitBundle, SplitMode, SynergyTuple};
use crate::error::{Error, Result};
use crate::inverse::DrugEmbeddingBank;
use crate::metrics::MetricsReport;
use crate::model::grad::{gradient, Objective, Sample};
use crate::model::loss::sigmoid;
use crate::model::Model;
use crate::optim::{AdamConfig, AdamW, Schedule};
use crate::rng;
use crate::scalar::Scalar;
use crate::synthgen::LatentWorld;

/// How training contexts are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextPolicy {
    Random,
    Graph,
    UnknownFirst,
    /// Per minibatch: random with probability `max(0.25, 1 - e/E)`,
    /// otherwise unknown-first.
    Interpolate,
}

impl ContextPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "interpolate" => Ok(ContextPolicy::Interpolate),
            other => match Strategy::parse(other) {
                Some(Strategy::Random) => Ok(ContextPolicy::Random),
                Some(Strategy::Graph) => Ok(ContextPolicy::Graph),
                Some(Strategy::UnknownFirst) => Ok(ContextPolicy::UnknownFirst),
                None => Err(Error::Config(format!("unknown context strategy {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    Steps(usize),
    /// Fraction of the total number of optimizer steps.
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: Warmup,
    pub strategy: ContextPolicy,
    pub n_ctx: usize,
    pub mode: SplitMode,
    pub seed: u64,
    pub objective: Objective,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

fn default_weight_decay() -> f64 {
    0.0
}

fn default_clip() -> f64 {
    1.0
}

impl TrainConfig {
    /// Desk-scale synergy training used by the acceptance suite.
    pub fn desk(mode: SplitMode, seed: u64) -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 32,
            lr: 1e-3,
            warmup: Warmup::Fraction(0.05),
            strategy: ContextPolicy::UnknownFirst,
            n_ctx: 20,
            mode,
            seed,
            objective: Objective::Synergy,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }

    /// Full-scale unknown-drug recipe: 40 epochs, batch 64, lr 2e-5,
    /// 10,000 warmup steps.
    pub fn full_drug(seed: u64) -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr: 2e-5,
            warmup: Warmup::Steps(10_000),
            strategy: ContextPolicy::UnknownFirst,
            n_ctx: 20,
            mode: SplitMode::UnknownDrug,
            seed,
            objective: Objective::Synergy,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }

    /// Full-scale unknown-cell recipe: 30 epochs, batch 128, warmup over 5%
    /// of the steps.
    pub fn full_cell(seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            warmup: Warmup::Fraction(0.05),
            n_ctx: 10,
            mode: SplitMode::UnknownCell,
            ..Self::full_drug(seed)
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size.max(1))
    }

    pub fn schedule(&self, n_train: usize) -> Result<Schedule> {
        let total = self.epochs * self.steps_per_epoch(n_train);
        let warmup = match self.warmup {
            Warmup::Steps(s) => s,
            Warmup::Fraction(f) => {
                if !(0.0..1.0).contains(&f) {
                    return Err(Error::Config(format!("warmup fraction {f} outside [0, 1)")));
                }
                (f * total as f64).round() as usize
            }
        };
        if total > 0 && warmup >= total {
            return Err(Error::Config(format!(
                "warmup of {warmup} steps must be shorter than the {total} total steps"
            )));
        }
        Ok(Schedule { warmup, total })
    }

    pub fn validate<T: Scalar>(&self, model: &Model<T>, split: &SplitBundle) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.n_ctx > model.config.max_ctx_examples {
            return Err(Error::Config(format!(
                "n_ctx {} exceeds the model maximum {}",
                self.n_ctx, model.config.max_ctx_examples
            )));
        }
        if split.mode != self.mode {
            return Err(Error::Config(format!(
                "split mode {:?} does not match training mode {:?}",
                split.mode, self.mode
            )));
        }
        if self.objective == Objective::Retrieval {
            if self.mode != SplitMode::UnknownDrug {
                return Err(Error::Config("retrieval training requires unknown-drug mode".into()));
            }
            if self.batch_size < 2 {
                return Err(Error::Config(
                    "retrieval training needs batch_size >= 2 (the contrastive loss of one row is 0)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One JSON-lines history record, written after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

/// Prompt for one training query. The masked entity is drawn fresh for
/// every appearance of the tuple.
#[allow(clippy::too_many_arguments)]
pub fn training_sample<T: Scalar>(
    graph: &ContextGraph,
    node: usize,
    mode: SplitMode,
    n_ctx: usize,
    strategy: Strategy,
    bank: Option<&DrugEmbeddingBank>,
    rdim: usize,
    rng: &mut rng::StreamRng,
) -> Result<Sample<T>> {
    let query = graph.node(node);
    let h = training_mask_choice(query, mode, rng);
    let picks = select_context(
        graph,
        Query {
            tuple: query,
            node: Some(node),
            unknown: h,
        },
        n_ctx,
        strategy,
        rng,
    );
    let ctx: Vec<&SynergyTuple> = picks.iter().map(|&i| graph.node(i)).collect();
    let prompt = mask_and_assemble(&ctx, query, &Masking::single(h));
    let labels: Vec<bool> = ctx.iter().map(|t| t.label).chain([query.label]).collect();
    let targets = match bank {
        None => None,
        Some(bank) => Some(retrieval_targets(&prompt, h, bank, rdim)?),
    };
    Ok(Sample {
        prompt,
        labels,
        targets,
    })
}

/// Target per example: the hidden drug's bank vector where the example
/// carries an `UNKNOWN` token, the zero vector elsewhere.
pub fn retrieval_targets<T: Scalar>(
    prompt: &PromptSequence,
    h: Entity,
    bank: &DrugEmbeddingBank,
    rdim: usize,
) -> Result<Vec<Vec<T>>> {
    let Entity::Drug(d) = h else {
        return Err(Error::Config("retrieval targets need a hidden drug".into()));
    };
    if bank.dim() != rdim {
        return Err(Error::Config(format!(
            "bank dimension {} differs from retrieval_dim {rdim}",
            bank.dim()
        )));
    }
    let v: Vec<T> = bank.primary(d)?.iter().map(|&x| T::lit(x)).collect();
    Ok((0..=prompt.n_ctx)
        .map(|j| {
            if prompt.unknown_position(j).is_some() {
                v.clone()
            } else {
                vec![T::zero(); rdim]
            }
        })
        .collect())
}

/// Train `model` in place on the split's training tuples. `on_epoch` sees
/// every history record as it is produced.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    split: &SplitBundle,
    cfg: &TrainConfig,
    bank: Option<&DrugEmbeddingBank>,
    mut on_epoch: impl FnMut(&HistoryRecord),
) -> Result<Vec<HistoryRecord>> {
    cfg.validate(model, split)?;
    if split.train.is_empty() {
        return Err(Error::Config("split has no training tuples".into()));
    }
    let bank = match cfg.objective {
        Objective::Synergy => None,
        Objective::Retrieval => Some(bank.ok_or_else(|| Error::Config("retrieval training needs an embedding bank".into()))?),
    };
    let graph = ContextGraph::build(data.gather(&split.train));
    let schedule = cfg.schedule(graph.len())?;
    let mut opt = AdamW::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
        model.num_params(),
    );
    let rdim = model.config.retrieval_dim;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..graph.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, "train.order", &[epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let strategy = match cfg.strategy {
                ContextPolicy::Random => Strategy::Random,
                ContextPolicy::Graph => Strategy::Graph,
                ContextPolicy::UnknownFirst => Strategy::UnknownFirst,
                ContextPolicy::Interpolate => interpolate_strategy(
                    epoch,
                    cfg.epochs,
                    &mut rng::substream(cfg.seed, "train.interpolate", &[step as u64]),
                ),
            };
            let batch: Vec<Sample<T>> = chunk
                .iter()
                .map(|&node| {
                    let mut r = rng::substream(cfg.seed, "train.prompt", &[epoch as u64, node as u64]);
                    training_sample(&graph, node, cfg.mode, cfg.n_ctx, strategy, bank, rdim, &mut r)
                })
                .collect::<Result<_>>()?;
            debug_assert!(
                batch.iter().all(|s| split.held_out.iter().all(|&e| !s.prompt.contains_entity(e))),
                "held-out entity in a training prompt"
            );
            let mut g = gradient(model, &batch, cfg.objective)?;
            let loss = g.loss.as_f64();
            if !loss.is_finite() || g.grads.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { epoch, step, loss });
            }
            lr = cfg.lr * schedule.factor(step);
            opt.step(&mut model.params, &mut g.grads, lr);
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch, step, loss });
            }
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let rec = HistoryRecord {
            epoch,
            step,
            loss: loss_sum / batches as f64,
            lr,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// Anything that maps a (masked) prompt to a synergy probability.
pub trait Predictor: Sync {
    /// `query` is the unmasked tuple the prompt asks about; model
    /// predictors only look at `prompt`.
    fn predict(&self, query: &SynergyTuple, prompt: &PromptSequence) -> Result<f64>;
}

impl<T: Scalar> Predictor for Model<T> {
    fn predict(&self, _query: &SynergyTuple, prompt: &PromptSequence) -> Result<f64> {
        let out = self.forward(prompt)?;
        Ok(sigmoid(out.logits[prompt.n_ctx].as_f64()))
    }
}

/// Ground-truth predictor for synthetic worlds: ignores the prompt and
/// scores the query with the generating function.
#[derive(Debug, Clone)]
pub struct WorldOracle<'a>(pub &'a LatentWorld);

impl Predictor for WorldOracle<'_> {
    fn predict(&self, q: &SynergyTuple, _prompt: &PromptSequence) -> Result<f64> {
        Ok(sigmoid(self.0.score(q.drug_a, q.drug_b, q.cell) - self.0.threshold))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub strategy: Strategy,
    pub n_ctx: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub report: MetricsReport,
    /// Dataset indices of the evaluated tuples, in evaluation order.
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Masked prompt for a held-out tuple: `h` becomes `UNKNOWN`, every other
/// held-out entity `UNKNOWN2`.
pub fn heldout_prompt(context: &[&SynergyTuple], query: &SynergyTuple, h: Entity, split: &SplitBundle) -> PromptSequence {
    let prompt = mask_and_assemble(context, query, &Masking::with_held_out(h, &split.held_out));
    debug_assert!(split.held_out.iter().all(|&e| !prompt.contains_entity(e)));
    prompt
}

/// Few-shot (or, with `n_ctx = 0`, zero-shot) evaluation of `items`, with
/// contexts drawn from the split's context bank.
pub fn evaluate_items<P: Predictor>(
    predictor: &P,
    data: &Dataset,
    split: &SplitBundle,
    items: &[usize],
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    let graph = ContextGraph::build(data.gather(&split.context_bank));
    let scores: Vec<f64> = items
        .par_iter()
        .map(|&i| {
            let q = &data.tuples[i];
            let h = split
                .designated(q)
                .ok_or_else(|| Error::Contract(format!("tuple {i} mentions no held-out entity")))?;
            let mut r = rng::substream(cfg.seed, "eval.context", &[i as u64]);
            let picks = select_context(
                &graph,
                Query {
                    tuple: q,
                    node: None,
                    unknown: h,
                },
                cfg.n_ctx,
                cfg.strategy,
                &mut r,
            );
            let ctx: Vec<&SynergyTuple> = picks.iter().map(|&j| graph.node(j)).collect();
            predictor.predict(q, &heldout_prompt(&ctx, q, h, split))
        })
        .collect::<Result<_>>()?;
    finish(data, items, scores)
}

pub fn evaluate<P: Predictor>(predictor: &P, data: &Dataset, split: &SplitBundle, cfg: &EvalConfig) -> Result<EvalResult> {
    evaluate_items(predictor, data, split, &split.test, cfg)
}

pub(crate) fn finish(data: &Dataset, items: &[usize], scores: Vec<f64>) -> Result<EvalResult> {
    let labels: Vec<bool> = items.iter().map(|&i| data.tuples[i].label).collect();
    let groups: Vec<Option<String>> = items.iter().map(|&i| data.tuples[i].group.clone()).collect();
    let report = MetricsReport::compute(&scores, &labels, Some(&groups))?;
    Ok(EvalResult {
        report,
        items: items.to_vec(),
        scores,
    })
}
