//! Context optimization: choose, per held-out entity, the fixed set of
//! context examples that maximizes validation ROC-AUC of a frozen model.

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::PromptSequence;
use crate::dataset::{Dataset, Entity, SplitBundle, SynergyTuple};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::model::loss::sigmoid;
use crate::model::Model;
use crate::rng::{self, StreamRng};
use crate::scalar::Scalar;
use crate::train::{finish, heldout_prompt, EvalResult};

/// `n` context slots per held-out entity, flattened block after block in
/// the order of [`Problem::entities`]. Genes are positions in the split's
/// context bank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chromosome {
    pub n: usize,
    pub genes: Vec<usize>,
}

impl Chromosome {
    pub fn block(&self, b: usize) -> &[usize] {
        &self.genes[b * self.n..(b + 1) * self.n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub epochs: usize,
    pub parents: usize,
    /// Per-gene probability of replacement by a random valid gene.
    pub mutation_rate: f64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 8,
            epochs: 50,
            parents: 4,
            mutation_rate: 0.10,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parents < 2 || self.population < self.parents {
            return Err(Error::Config(format!(
                "need population >= parents >= 2 (population {}, parents {})",
                self.population, self.parents
            )));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::Config(format!("mutation_rate {} outside [0, 1]", self.mutation_rate)));
        }
        Ok(())
    }
}

/// A frozen model plus the split it is optimized on.
pub struct Problem<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub data: &'a Dataset,
    pub split: &'a SplitBundle,
    pub n: usize,
    /// Held-out entities in ascending order, one block each.
    pub entities: Vec<Entity>,
    /// Bank positions whose tuple contains the block's entity.
    pub candidates: Vec<Vec<usize>>,
}

impl<'a, T: Scalar> Problem<'a, T> {
    pub fn new(model: &'a Model<T>, data: &'a Dataset, split: &'a SplitBundle, n: usize) -> Result<Self> {
        if split.validation.is_empty() {
            return Err(Error::Contract("context optimization needs a validation set".into()));
        }
        if n == 0 || n > model.config.max_ctx_examples {
            return Err(Error::Config(format!(
                "n_ctx {n} must be in 1..={}",
                model.config.max_ctx_examples
            )));
        }
        let entities: Vec<Entity> = split.held_out.iter().copied().collect();
        let mut candidates = Vec::with_capacity(entities.len());
        for &h in &entities {
            let c: Vec<usize> = split
                .context_bank
                .iter()
                .enumerate()
                .filter(|(_, &i)| data.tuples[i].mentions(h))
                .map(|(p, _)| p)
                .collect();
            if c.len() < n {
                return Err(Error::Config(format!(
                    "held-out {} has {} context-bank tuples, fewer than n_ctx = {n}",
                    data.vocab.entity_name(h),
                    c.len()
                )));
            }
            candidates.push(c);
        }
        Ok(Problem {
            model,
            data,
            split,
            n,
            entities,
            candidates,
        })
    }

    pub fn num_genes(&self) -> usize {
        self.n * self.entities.len()
    }

    /// `n` distinct bank tuples containing `h`, per block.
    pub fn random_chromosome(&self, rng: &mut StreamRng) -> Chromosome {
        let genes = self
            .candidates
            .iter()
            .flat_map(|c| c.choose_multiple(rng, self.n).copied().collect::<Vec<_>>())
            .collect();
        Chromosome { n: self.n, genes }
    }

    pub fn is_valid(&self, c: &Chromosome) -> bool {
        c.n == self.n
            && c.genes.len() == self.num_genes()
            && (0..self.entities.len()).all(|b| {
                let block = c.block(b);
                block.iter().enumerate().all(|(k, g)| self.candidates[b].contains(g) && !block[..k].contains(g))
            })
    }

    /// Replace duplicate or foreign genes with fresh valid ones.
    pub fn repair(&self, c: &mut Chromosome, rng: &mut StreamRng) {
        for b in 0..self.entities.len() {
            let range = b * self.n..(b + 1) * self.n;
            for k in range.clone() {
                let g = c.genes[k];
                let dup = c.genes[range.start..k].contains(&g);
                if dup || !self.candidates[b].contains(&g) {
                    let block = &c.genes[range.clone()];
                    let free: Vec<usize> = self.candidates[b].iter().copied().filter(|x| !block.contains(x)).collect();
                    c.genes[k] = *free.choose(rng).expect("block has at least n candidates");
                }
            }
        }
    }

    fn block_of(&self, h: Entity) -> usize {
        self.entities.binary_search(&h).expect("held-out entity")
    }

    /// Synergy probability for every item, each prompted with its block's
    /// genes as the full context. Items sharing a block share the encoded
    /// context prefix.
    pub fn predictions(&self, c: &Chromosome, items: &[usize]) -> Result<Vec<f64>> {
        if !self.is_valid(c) {
            return Err(Error::Contract("invalid chromosome".into()));
        }
        let mut by_block: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (pos, &i) in items.iter().enumerate() {
            let h = self
                .split
                .designated(&self.data.tuples[i])
                .ok_or_else(|| Error::Contract(format!("tuple {i} mentions no held-out entity")))?;
            by_block.entry(self.block_of(h)).or_default().push(pos);
        }
        let blocks: Vec<(usize, Vec<usize>)> = by_block.into_iter().collect();
        let per_block: Vec<Vec<(usize, f64)>> = blocks
            .par_iter()
            .map(|(b, positions)| {
                let h = self.entities[*b];
                let ctx: Vec<&SynergyTuple> = c
                    .block(*b)
                    .iter()
                    .map(|&g| &self.data.tuples[self.split.context_bank[g]])
                    .collect();
                let prompts: Vec<PromptSequence> = positions
                    .iter()
                    .map(|&p| heldout_prompt(&ctx, &self.data.tuples[items[p]], h, self.split))
                    .collect();
                let ctx_len = 4 * self.n;
                let mut state = self.model.encode_prefix(&prompts[0].tokens[..ctx_len])?;
                positions
                    .iter()
                    .zip(&prompts)
                    .map(|(&p, prompt)| {
                        debug_assert_eq!(prompt.tokens[..ctx_len], prompts[0].tokens[..ctx_len]);
                        let (logit, _) = self.model.query_readout(&mut state, &prompt.tokens[ctx_len..])?;
                        Ok((p, sigmoid(logit.as_f64())))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let mut out = vec![0.0; items.len()];
        for (p, s) in per_block.into_iter().flatten() {
            out[p] = s;
        }
        Ok(out)
    }

    /// Validation ROC-AUC.
    pub fn fitness(&self, c: &Chromosome) -> Result<f64> {
        self.auc(c, &self.split.validation)
    }

    pub fn auc(&self, c: &Chromosome, items: &[usize]) -> Result<f64> {
        let scores = self.predictions(c, items)?;
        let labels: Vec<bool> = items.iter().map(|&i| self.data.tuples[i].label).collect();
        roc_auc(&scores, &labels)
    }

    /// Full metrics report on `items` (usually the test set).
    pub fn evaluate(&self, c: &Chromosome, items: &[usize]) -> Result<EvalResult> {
        finish(self.data, items, self.predictions(c, items)?)
    }

    /// Context per entity as `name -> bank positions`.
    pub fn export(&self, c: &Chromosome) -> BTreeMap<String, Vec<usize>> {
        self.entities
            .iter()
            .enumerate()
            .map(|(b, &h)| (self.data.vocab.entity_name(h), c.block(b).to_vec()))
            .collect()
    }

    /// Inverse of [`Problem::export`]; every held-out entity must be present.
    pub fn import(&self, contexts: &BTreeMap<String, Vec<usize>>) -> Result<Chromosome> {
        let mut genes = Vec::with_capacity(self.num_genes());
        for &h in &self.entities {
            let name = self.data.vocab.entity_name(h);
            let block = contexts
                .get(&name)
                .ok_or_else(|| Error::Config(format!("context file has no entry for held-out {name}")))?;
            if block.len() != self.n {
                return Err(Error::Config(format!(
                    "context for {name} has {} examples, expected {}",
                    block.len(),
                    self.n
                )));
            }
            genes.extend_from_slice(block);
        }
        if let Some(extra) = contexts.keys().find(|k| !self.entities.iter().any(|&h| self.data.vocab.entity_name(h) == **k)) {
            return Err(Error::Config(format!("context file names {extra}, which is not held out")));
        }
        let c = Chromosome { n: self.n, genes };
        if !self.is_valid(&c) {
            return Err(Error::Config(
                "context file holds positions outside the entity's bank tuples or repeats one".into(),
            ));
        }
        Ok(c)
    }
}

/// One fitness evaluation in the order it happened.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub evaluation: usize,
    pub generation: usize,
    pub fitness: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub best: Chromosome,
    pub best_fitness: f64,
    pub initial_best: f64,
    /// Distinct chromosomes evaluated; the budget for the baselines.
    pub evaluations: usize,
    pub trace: Vec<TraceRecord>,
}

struct Evaluator<'p, 'a, T: Scalar> {
    problem: &'p Problem<'a, T>,
    cache: HashMap<Chromosome, f64>,
    trace: Vec<TraceRecord>,
    best: Option<(Chromosome, f64)>,
}

impl<T: Scalar> Evaluator<'_, '_, T> {
    /// Fitness of every chromosome; new ones are evaluated in parallel and
    /// logged in input order.
    fn fitness_all(&mut self, pop: &[Chromosome], generation: usize) -> Result<Vec<f64>> {
        let mut fresh: Vec<&Chromosome> = Vec::new();
        for c in pop {
            if !self.cache.contains_key(c) && !fresh.contains(&c) {
                fresh.push(c);
            }
        }
        let values: Vec<f64> = fresh.par_iter().map(|c| self.problem.fitness(c)).collect::<Result<_>>()?;
        for (c, f) in fresh.into_iter().zip(values) {
            if self.best.as_ref().is_none_or(|(_, b)| f > *b) {
                self.best = Some((c.clone(), f));
            }
            self.trace.push(TraceRecord {
                evaluation: self.trace.len(),
                generation,
                fitness: f,
                best_so_far: self.best.as_ref().expect("set").1,
            });
            self.cache.insert(c.clone(), f);
        }
        Ok(pop.iter().map(|c| self.cache[c]).collect())
    }
}

/// Steady-state genetic algorithm with elitism: each generation keeps the
/// `parents` fittest chromosomes and refills the population with children
/// of single-point crossover plus per-gene mutation.
pub fn run_ga<T: Scalar>(problem: &Problem<'_, T>, cfg: &GaConfig, seed: u64) -> Result<GaResult> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "ctxopt.ga");
    let pop: Vec<Chromosome> = (0..cfg.population).map(|_| problem.random_chromosome(&mut r)).collect();
    run_ga_from(problem, cfg, pop, &mut r)
}

/// [`run_ga`] from a given initial population.
pub fn run_ga_from<T: Scalar>(
    problem: &Problem<'_, T>,
    cfg: &GaConfig,
    mut pop: Vec<Chromosome>,
    r: &mut StreamRng,
) -> Result<GaResult> {
    cfg.validate()?;
    if pop.len() != cfg.population || !pop.iter().all(|c| problem.is_valid(c)) {
        return Err(Error::Contract("initial population must hold `population` valid chromosomes".into()));
    }
    let mut ev = Evaluator {
        problem,
        cache: HashMap::new(),
        trace: Vec::new(),
        best: None,
    };
    let mut fit = ev.fitness_all(&pop, 0)?;
    let initial_best = fit.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let len = problem.num_genes();
    for generation in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[b].total_cmp(&fit[a]).then(a.cmp(&b)));
        let elites: Vec<Chromosome> = order[..cfg.parents].iter().map(|&i| pop[i].clone()).collect();
        let mut next = elites.clone();
        while next.len() < cfg.population {
            let p1 = elites.choose(r).expect("parents >= 2");
            let p2 = elites.choose(r).expect("parents >= 2");
            let cut = if len > 1 { r.random_range(1..len) } else { 0 };
            let mut genes = p1.genes[..cut].to_vec();
            genes.extend_from_slice(&p2.genes[cut..]);
            let mut child = Chromosome { n: problem.n, genes };
            for k in 0..len {
                if cfg.mutation_rate > 0.0 && r.random::<f64>() < cfg.mutation_rate {
                    let b = k / problem.n;
                    child.genes[k] = *problem.candidates[b].choose(r).expect("non-empty");
                }
            }
            problem.repair(&mut child, r);
            next.push(child);
        }
        pop = next;
        fit = ev.fitness_all(&pop, generation)?;
    }
    let (best, best_fitness) = ev.best.expect("at least one evaluation");
    Ok(GaResult {
        best,
        best_fitness,
        initial_best,
        evaluations: ev.trace.len(),
        trace: ev.trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSearch {
    pub best: Chromosome,
    pub max_fitness: f64,
    pub mean_fitness: f64,
    pub evaluations: usize,
    /// Fitness of every sample, in sampling order.
    pub fitness: Vec<f64>,
    /// Every sampled chromosome, in sampling order.
    pub samples: Vec<Chromosome>,
}

/// `budget` random unknown-first contexts; the best by validation fitness
/// wins (first one on ties).
pub fn best_of_budget_random<T: Scalar>(problem: &Problem<'_, T>, budget: usize, seed: u64) -> Result<RandomSearch> {
    if budget == 0 {
        return Err(Error::Config("budget must be >= 1".into()));
    }
    let mut r = rng::stream(seed, "ctxopt.random");
    let samples: Vec<Chromosome> = (0..budget).map(|_| problem.random_chromosome(&mut r)).collect();
    let fitness: Vec<f64> = samples.par_iter().map(|c| problem.fitness(c)).collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &f) in fitness.iter().enumerate() {
        if f > fitness[best] {
            best = i;
        }
    }
    Ok(RandomSearch {
        best: samples[best].clone(),
        max_fitness: fitness[best],
        mean_fitness: fitness.iter().sum::<f64>() / budget as f64,
        evaluations: budget,
        fitness,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReduction {
    pub chromosome: Chromosome,
    /// Mean absolute validation error per bank position that was sampled.
    pub mean_error: BTreeMap<usize, f64>,
    pub evaluations: usize,
}

/// Error-reduction baseline. Each round draws a random unknown-first
/// context per entity, predicts every validation query with it, and charges
/// each query's absolute error to every example of its context. The `n`
/// examples with lowest mean error form each block; ties go to the lower
/// bank position, and examples never sampled are not candidates.
pub fn error_reduction<T: Scalar>(problem: &Problem<'_, T>, budget: usize, seed: u64) -> Result<ErrorReduction> {
    if budget == 0 {
        return Err(Error::Config("budget must be >= 1".into()));
    }
    let val = &problem.split.validation;
    let mut r = rng::stream(seed, "ctxopt.error-reduction");
    let samples: Vec<Chromosome> = (0..budget).map(|_| problem.random_chromosome(&mut r)).collect();
    let preds: Vec<Vec<f64>> = samples.par_iter().map(|c| problem.predictions(c, val)).collect::<Result<_>>()?;
    let blocks: Vec<usize> = val
        .iter()
        .map(|&i| problem.block_of(problem.split.designated(&problem.data.tuples[i]).expect("validated")))
        .collect();
    let mut sums: BTreeMap<usize, (f64, u64)> = BTreeMap::new();
    for (c, p) in samples.iter().zip(&preds) {
        for (q, &i) in val.iter().enumerate() {
            let y = if problem.data.tuples[i].label { 1.0 } else { 0.0 };
            let err = (p[q] - y).abs();
            for &g in c.block(blocks[q]) {
                let e = sums.entry(g).or_insert((0.0, 0));
                e.0 += err;
                e.1 += 1;
            }
        }
    }
    let mean_error: BTreeMap<usize, f64> = sums.into_iter().map(|(g, (s, k))| (g, s / k as f64)).collect();
    let mut genes = Vec::with_capacity(problem.num_genes());
    for (b, cands) in problem.candidates.iter().enumerate() {
        let mut scored: Vec<(usize, f64)> = cands.iter().filter_map(|g| mean_error.get(g).map(|&e| (*g, e))).collect();
        if scored.len() < problem.n {
            return Err(Error::Config(format!(
                "error reduction sampled only {} examples for {}; raise the budget",
                scored.len(),
                problem.data.vocab.entity_name(problem.entities[b])
            )));
        }
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        genes.extend(scored[..problem.n].iter().map(|&(g, _)| g));
    }
    Ok(ErrorReduction {
        chromosome: Chromosome { n: problem.n, genes },
        mean_error,
        evaluations: budget,
    })
}

/// Mean test ROC-AUC over `samples`: the random-context reference point.
pub fn mean_test_auc<T: Scalar>(problem: &Problem<'_, T>, samples: &[Chromosome]) -> Result<f64> {
    let aucs: Vec<f64> = samples
        .par_iter()
        .map(|c| problem.auc(c, &problem.split.test))
        .collect::<Result<_>>()?;
    Ok(aucs.iter().sum::<f64>() / aucs.len().max(1) as f64)
}
