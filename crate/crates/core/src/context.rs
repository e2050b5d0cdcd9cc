//! Context graph, context-selection strategies, masking and prompt assembly.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CellId, DrugId, Entity, SplitMode, SynergyTuple, Token};

/// Graph over a tuple pool: one node per tuple, drug edges between tuples
/// sharing a drug and cell edges between tuples sharing the cell line.
#[derive(Debug, Clone)]
pub struct ContextGraph {
    nodes: Vec<SynergyTuple>,
    drug_adj: Vec<Vec<u32>>,
    cell_adj: Vec<Vec<u32>>,
    drug_index: HashMap<DrugId, Vec<u32>>,
    cell_index: HashMap<CellId, Vec<u32>>,
}

impl ContextGraph {
    pub fn build(pool: Vec<SynergyTuple>) -> Self {
        let mut drug_index: HashMap<DrugId, Vec<u32>> = HashMap::new();
        let mut cell_index: HashMap<CellId, Vec<u32>> = HashMap::new();
        for (i, t) in pool.iter().enumerate() {
            drug_index.entry(t.drug_a).or_default().push(i as u32);
            if t.drug_b != t.drug_a {
                drug_index.entry(t.drug_b).or_default().push(i as u32);
            }
            cell_index.entry(t.cell).or_default().push(i as u32);
        }
        let mut drug_adj = Vec::with_capacity(pool.len());
        let mut cell_adj = Vec::with_capacity(pool.len());
        for (i, t) in pool.iter().enumerate() {
            let mut d: Vec<u32> = drug_index[&t.drug_a]
                .iter()
                .chain(&drug_index[&t.drug_b])
                .copied()
                .filter(|&j| j as usize != i)
                .collect();
            d.sort_unstable();
            d.dedup();
            drug_adj.push(d);
            cell_adj.push(
                cell_index[&t.cell]
                    .iter()
                    .copied()
                    .filter(|&j| j as usize != i)
                    .collect(),
            );
        }
        ContextGraph {
            nodes: pool,
            drug_adj,
            cell_adj,
            drug_index,
            cell_index,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &SynergyTuple {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[SynergyTuple] {
        &self.nodes
    }

    pub fn drug_neighbors(&self, i: usize) -> &[u32] {
        &self.drug_adj[i]
    }

    pub fn cell_neighbors(&self, i: usize) -> &[u32] {
        &self.cell_adj[i]
    }

    /// Nodes containing `e`, ascending.
    pub fn nodes_with(&self, e: Entity) -> &[u32] {
        let list = match e {
            Entity::Drug(d) => self.drug_index.get(&d),
            Entity::Cell(c) => self.cell_index.get(&c),
        };
        list.map_or(&[], Vec::as_slice)
    }

    /// Nodes sharing any entity with `t` (the query need not be in the pool).
    fn adjacent_to(&self, t: &SynergyTuple) -> Vec<u32> {
        let mut v: Vec<u32> = self
            .nodes_with(Entity::Drug(t.drug_a))
            .iter()
            .chain(self.nodes_with(Entity::Drug(t.drug_b)))
            .chain(self.nodes_with(Entity::Cell(t.cell)))
            .copied()
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Graph,
    UnknownFirst,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(Strategy::Random),
            "graph" => Some(Strategy::Graph),
            "unknown-first" | "uf" => Some(Strategy::UnknownFirst),
            _ => None,
        }
    }
}

/// The tuple a context is selected for.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub tuple: &'a SynergyTuple,
    /// Node index when the query itself belongs to the pool; it is never
    /// selected into its own context.
    pub node: Option<usize>,
    /// The entity treated as unknown for this query.
    pub unknown: Entity,
}

/// Pick up to `n_ctx` distinct pool tuples for `query`.
///
/// Tiers fall back hierarchically (unknown-first -> graph -> random) and are
/// emitted random tier first, unknown-first tier last; within a tier the
/// order is uniformly random. Returns node indices.
pub fn select_context<R: Rng + ?Sized>(
    graph: &ContextGraph,
    query: Query<'_>,
    n_ctx: usize,
    strategy: Strategy,
    rng: &mut R,
) -> Vec<usize> {
    let available = graph.len() - usize::from(query.node.is_some_and(|q| q < graph.len()));
    let want = n_ctx.min(available);
    let mut chosen: HashSet<u32> = HashSet::with_capacity(want);
    let excluded = query.node.map(|q| q as u32);
    let eligible = |j: &u32, chosen: &HashSet<u32>| Some(*j) != excluded && !chosen.contains(j);

    let mut tiers: Vec<Vec<u32>> = Vec::with_capacity(3);
    if strategy == Strategy::UnknownFirst {
        let pool: Vec<u32> = graph
            .nodes_with(query.unknown)
            .iter()
            .copied()
            .filter(|j| eligible(j, &chosen))
            .collect();
        let picks = sample_from(&pool, want, rng);
        chosen.extend(&picks);
        tiers.push(picks);
    }
    if matches!(strategy, Strategy::UnknownFirst | Strategy::Graph) && chosen.len() < want {
        let pool: Vec<u32> = graph
            .adjacent_to(query.tuple)
            .into_iter()
            .filter(|j| eligible(j, &chosen))
            .collect();
        let picks = sample_from(&pool, want - chosen.len(), rng);
        chosen.extend(&picks);
        tiers.push(picks);
    }
    if chosen.len() < want {
        let remaining = want - chosen.len();
        let free = available - chosen.len();
        let picks = if free <= 2 * remaining + 8 {
            let pool: Vec<u32> = (0..graph.len() as u32).filter(|j| eligible(j, &chosen)).collect();
            sample_from(&pool, remaining, rng)
        } else {
            let mut picks = Vec::with_capacity(remaining);
            let mut local: HashSet<u32> = HashSet::with_capacity(remaining);
            while picks.len() < remaining {
                let j = rng.random_range(0..graph.len() as u32);
                if eligible(&j, &chosen) && local.insert(j) {
                    picks.push(j);
                }
            }
            picks
        };
        tiers.push(picks);
    }
    tiers.reverse();
    tiers.into_iter().flatten().map(|j| j as usize).collect()
}

fn sample_from<R: Rng + ?Sized>(pool: &[u32], k: usize, rng: &mut R) -> Vec<u32> {
    let mut picks: Vec<u32> = pool.choose_multiple(rng, k.min(pool.len())).copied().collect();
    picks.shuffle(rng);
    picks
}

/// Which slot of an example a token occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    DrugA,
    DrugB,
    Cell,
    Label,
}

/// Entities that must not appear verbatim in a prompt.
#[derive(Debug, Clone, Default)]
pub struct Masking {
    /// Rendered as `UNKNOWN`.
    pub primary: Option<Entity>,
    /// Every other masked entity; rendered as `UNKNOWN2`.
    pub others: BTreeSet<Entity>,
}

impl Masking {
    pub fn single(h: Entity) -> Self {
        Masking {
            primary: Some(h),
            others: BTreeSet::new(),
        }
    }

    /// `h` as the primary unknown and the rest of `held_out` as secondary.
    pub fn with_held_out(h: Entity, held_out: &BTreeSet<Entity>) -> Self {
        let mut others = held_out.clone();
        others.remove(&h);
        Masking {
            primary: Some(h),
            others,
        }
    }

    fn render(&self, e: Entity) -> Option<Token> {
        if self.primary == Some(e) {
            Some(Token::Unknown)
        } else if self.others.contains(&e) {
            Some(Token::Unknown2)
        } else {
            None
        }
    }
}

/// Flattened prompt `[d1 d2 c y]* d1_q d2_q c_q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub tokens: Vec<(Slot, Token)>,
    /// Number of context examples.
    pub n_ctx: usize,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Cell-slot positions, one per context example plus the query.
    pub fn query_positions(&self) -> Vec<usize> {
        (0..=self.n_ctx).map(|j| 4 * j + 2).collect()
    }

    /// Position of the first `UNKNOWN` token inside example `j`, if any.
    pub fn unknown_position(&self, j: usize) -> Option<usize> {
        (4 * j..4 * j + 3).find(|&p| self.tokens[p].1 == Token::Unknown)
    }

    /// Retrieval readout position of example `j`: its `UNKNOWN` token, or
    /// its cell slot when the example carries none.
    pub fn readout_position(&self, j: usize) -> usize {
        self.unknown_position(j).unwrap_or(4 * j + 2)
    }

    /// The prompt truncated to its first `i` context examples, re-using the
    /// same query.
    pub fn prefix(&self, i: usize) -> PromptSequence {
        let i = i.min(self.n_ctx);
        let mut tokens = self.tokens[..4 * i].to_vec();
        tokens.extend_from_slice(&self.tokens[4 * self.n_ctx..]);
        PromptSequence { tokens, n_ctx: i }
    }

    pub fn contains_entity(&self, e: Entity) -> bool {
        self.tokens.iter().any(|(_, t)| match (t, e) {
            (Token::Drug(d), Entity::Drug(x)) => *d == x,
            (Token::Cell(c), Entity::Cell(x)) => *c == x,
            _ => false,
        })
    }
}

fn render_tuple(t: &SynergyTuple, masking: &Masking, out: &mut Vec<(Slot, Token)>) {
    let drug = |d: DrugId| masking.render(Entity::Drug(d)).unwrap_or(Token::Drug(d));
    out.push((Slot::DrugA, drug(t.drug_a)));
    out.push((Slot::DrugB, drug(t.drug_b)));
    let cell = masking.render(Entity::Cell(t.cell)).unwrap_or(Token::Cell(t.cell));
    out.push((Slot::Cell, cell));
}

/// Flatten `context` and `query` into a prompt, masking every occurrence of
/// masked entities in both.
pub fn mask_and_assemble(context: &[&SynergyTuple], query: &SynergyTuple, masking: &Masking) -> PromptSequence {
    let mut tokens = Vec::with_capacity(4 * context.len() + 3);
    for t in context {
        render_tuple(t, masking, &mut tokens);
        tokens.push((Slot::Label, Token::Label(t.label)));
    }
    render_tuple(query, masking, &mut tokens);
    PromptSequence {
        tokens,
        n_ctx: context.len(),
    }
}

/// Artificial unknown for a training tuple: either drug with probability
/// one half in unknown-drug mode, always the cell in unknown-cell mode.
pub fn training_mask_choice<R: Rng + ?Sized>(x: &SynergyTuple, mode: SplitMode, rng: &mut R) -> Entity {
    match mode {
        SplitMode::UnknownCell => Entity::Cell(x.cell),
        SplitMode::UnknownDrug => {
            if rng.random::<bool>() {
                Entity::Drug(x.drug_a)
            } else {
                Entity::Drug(x.drug_b)
            }
        }
    }
}

/// Probability of the random strategy at epoch `e` of `total`:
/// `max(0.25, 1 - e/total)`.
pub fn interpolate_random_probability(epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    (1.0 - epoch as f64 / total as f64).max(0.25)
}

/// Per-minibatch draw between random and unknown-first.
pub fn interpolate_strategy<R: Rng + ?Sized>(epoch: usize, total: usize, rng: &mut R) -> Strategy {
    if rng.random::<f64>() < interpolate_random_probability(epoch, total) {
        Strategy::Random
    } else {
        Strategy::UnknownFirst
    }
}
