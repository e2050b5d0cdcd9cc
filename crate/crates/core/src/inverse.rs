//! Inverse design by retrieval: predict the hidden drug's embedding from its
//! synergy context and rank candidate drugs by cosine similarity.

use std::path::Path;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{mask_and_assemble, select_context, ContextGraph, Masking, PromptSequence, Query, Strategy};
use crate::dataset::{Dataset, DrugId, Entity, EntityVocab, SplitBundle, SplitMode, SynergyTuple};
use crate::error::{Error, Result};
use crate::metrics::mean_rank;
use crate::model::grad::Objective;
use crate::model::Model;
use crate::rng;
use crate::scalar::Scalar;
use crate::synthgen::LatentWorld;
use crate::train::{heldout_prompt, train, HistoryRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankSource {
    File,
    SyntheticLatent,
}

/// Unit-norm target vectors per drug. A drug may carry several rows
/// (augmented representations); a prediction then scores by its best row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrugEmbeddingBank {
    pub source: BankSource,
    dim: usize,
    rows: Vec<Vec<Vec<f64>>>,
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

impl DrugEmbeddingBank {
    /// `rows[d]` holds the vectors of drug `d`; each is L2-normalized.
    pub fn from_rows(rows: Vec<Vec<Vec<f64>>>, source: BankSource) -> Result<Self> {
        let dim = rows
            .iter()
            .flatten()
            .map(Vec::len)
            .next()
            .ok_or_else(|| Error::Config("embedding bank is empty".into()))?;
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        let mut out = Vec::with_capacity(rows.len());
        for (d, vs) in rows.into_iter().enumerate() {
            if vs.is_empty() {
                return Err(Error::Config(format!("drug #{d} has no embedding")));
            }
            let mut norm_rows = Vec::with_capacity(vs.len());
            for v in vs {
                if v.len() != dim {
                    return Err(Error::Config(format!("drug #{d}: embedding of length {} (expected {dim})", v.len())));
                }
                norm_rows.push(normalized(&v).ok_or_else(|| Error::Config(format!("drug #{d}: zero or non-finite embedding")))?);
            }
            out.push(norm_rows);
        }
        Ok(DrugEmbeddingBank {
            source,
            dim,
            rows: out,
        })
    }

    /// The generating drug vectors of a synthetic world.
    pub fn from_world(world: &LatentWorld) -> Result<Self> {
        Self::from_rows(
            world.drug_vecs.iter().map(|v| vec![v.clone()]).collect(),
            BankSource::SyntheticLatent,
        )
    }

    /// Read `drug,dim_0,...,dim_{D-1}`; repeated drug names add rows. Every
    /// drug of `vocab` must appear; unknown names are rejected.
    pub fn read_csv(path: &Path, vocab: &EntityVocab) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let headers = reader
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        if headers.get(0) != Some("drug") || headers.len() < 2 {
            return Err(Error::Parse {
                line: 1,
                message: "expected header `drug,dim_0,...`".into(),
            });
        }
        let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); vocab.num_drugs()];
        for (i, rec) in reader.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            let name = rec.get(0).unwrap_or_default();
            let id = vocab.drug_id(name).ok_or_else(|| Error::Value {
                line,
                message: format!("drug `{name}` is not in the dataset vocabulary"),
            })?;
            let v: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| Error::Value {
                        line,
                        message: format!("`{f}` is not a number"),
                    })
                })
                .collect::<Result<_>>()?;
            if v.len() != headers.len() - 1 {
                return Err(Error::Parse {
                    line,
                    message: format!("{} values for {} dimensions", v.len(), headers.len() - 1),
                });
            }
            rows[id.0 as usize].push(v);
        }
        if let Some(d) = rows.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!(
                "drug `{}` has no embedding",
                vocab.drug_name(DrugId(d as u32)).unwrap_or("?")
            )));
        }
        Self::from_rows(rows, BankSource::File)
    }

    pub fn write_csv(&self, path: &Path, vocab: &EntityVocab) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = std::iter::once("drug".to_string())
            .chain((0..self.dim).map(|i| format!("dim_{i}")))
            .collect();
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(&header).map_err(csv_err)?;
        for (d, vs) in self.rows.iter().enumerate() {
            let name = vocab
                .drug_name(DrugId(d as u32))
                .ok_or_else(|| Error::Config(format!("bank has drug #{d} beyond the vocabulary")))?;
            for v in vs {
                let rec: Vec<String> = std::iter::once(name.to_string()).chain(v.iter().map(|x| x.to_string())).collect();
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        crate::model::checkpoint::write_atomic(path, &bytes)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_drugs(&self) -> usize {
        self.rows.len()
    }

    /// First (canonical) vector of drug `d`: the training target.
    pub fn primary(&self, d: DrugId) -> Result<&[f64]> {
        self.rows
            .get(d.0 as usize)
            .map(|v| v[0].as_slice())
            .ok_or_else(|| Error::Input(format!("drug #{} has no embedding", d.0)))
    }

    /// Max cosine between unit vector `u` and the rows of drug `d`.
    fn similarity(&self, d: usize, u: &[f64]) -> f64 {
        self.rows[d]
            .iter()
            .map(|r| r.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rank the drugs of `pool` against prediction `pred`. A zero
    /// prediction scores every drug 0, so the order falls back to drug id.
    pub fn retrieve(&self, pred: &[f64], pool: &[DrugId]) -> Result<Ranking> {
        if pred.len() != self.dim {
            return Err(Error::Input(format!("prediction of length {} for a {}-dim bank", pred.len(), self.dim)));
        }
        let u = normalized(pred).unwrap_or_else(|| vec![0.0; self.dim]);
        let mut scored: Vec<(DrugId, f64)> = pool
            .iter()
            .map(|&d| {
                if d.0 as usize >= self.rows.len() {
                    return Err(Error::Input(format!("drug #{} has no embedding", d.0)));
                }
                Ok((d, self.similarity(d.0 as usize, &u)))
            })
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Ranking { order: scored })
    }
}

/// Candidates in descending cosine, ties by ascending drug id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<(DrugId, f64)>,
}

impl Ranking {
    /// 1-based position of `d`, if it is a candidate.
    pub fn rank_of(&self, d: DrugId) -> Option<usize> {
        self.order.iter().position(|&(x, _)| x == d).map(|p| p + 1)
    }

    pub fn top(&self, k: usize) -> &[(DrugId, f64)] {
        &self.order[..k.min(self.order.len())]
    }
}

/// Which drugs are retrieval candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidatePool {
    All,
    HeldOut,
    Seen,
}

impl CandidatePool {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CandidatePool::All),
            "held-out" => Ok(CandidatePool::HeldOut),
            "seen" => Ok(CandidatePool::Seen),
            other => Err(Error::Config(format!("unknown candidate pool `{other}`"))),
        }
    }

    pub fn drugs(&self, num_drugs: usize, split: &SplitBundle) -> Vec<DrugId> {
        (0..num_drugs as u32)
            .map(DrugId)
            .filter(|&d| {
                let held = split.held_out.contains(&Entity::Drug(d));
                match self {
                    CandidatePool::All => true,
                    CandidatePool::HeldOut => held,
                    CandidatePool::Seen => !held,
                }
            })
            .collect()
    }
}

/// Whose identity is being retrieved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySet {
    /// Test tuples; the hidden drug was never trained on.
    HeldOut,
    /// Training tuples with one of their drugs masked; contexts come from
    /// the training pool.
    Seen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    pub n_ctx_max: usize,
    pub strategy: Strategy,
    pub pool: CandidatePool,
    pub queries: QuerySet,
    /// Cap on the number of queries (taken in split order); `None` = all.
    pub max_queries: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    /// Dataset index of the query tuple.
    pub item: usize,
    pub drug: DrugId,
    /// Ground-truth rank after `i` context examples, `i = 0..=n_ctx_max`.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCurve {
    /// Mean rank per context count.
    pub mean_rank: Vec<f64>,
    pub per_query: Vec<QueryTrace>,
}

/// Rank trajectory of one prompt: the query is read out after every
/// prefix of the context, sharing the cached prefix.
pub fn prefix_ranks<T: Scalar>(
    model: &Model<T>,
    prompt: &PromptSequence,
    truth: DrugId,
    bank: &DrugEmbeddingBank,
    pool: &[DrugId],
) -> Result<Vec<usize>> {
    let n = prompt.n_ctx;
    let query = &prompt.tokens[4 * n..];
    let mut state = model.encode_prefix(&[])?;
    let mut ranks = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let (_, v) = model.query_readout(&mut state, query)?;
        let pred: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
        let r = bank.retrieve(&pred, pool)?;
        ranks.push(
            r.rank_of(truth)
                .ok_or_else(|| Error::Config(format!("drug #{} is not in the candidate pool", truth.0)))?,
        );
        if i < n {
            model.extend_prefix(&mut state, &prompt.tokens[4 * i..4 * i + 4])?;
        }
    }
    Ok(ranks)
}

/// Mean ground-truth rank as a function of context size.
pub fn rank_curve<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    split: &SplitBundle,
    bank: &DrugEmbeddingBank,
    cfg: &RankConfig,
) -> Result<RankCurve> {
    if split.mode != SplitMode::UnknownDrug {
        return Err(Error::Config("rank curves need an unknown-drug split".into()));
    }
    if cfg.n_ctx_max > model.config.max_ctx_examples {
        return Err(Error::Config(format!(
            "n_ctx_max {} exceeds the model maximum {}",
            cfg.n_ctx_max, model.config.max_ctx_examples
        )));
    }
    let pool = cfg.pool.drugs(bank.num_drugs(), split);
    let (items, pool_idx): (&[usize], &[usize]) = match cfg.queries {
        QuerySet::HeldOut => (&split.test, &split.context_bank),
        QuerySet::Seen => (&split.train, &split.train),
    };
    let items = &items[..cfg.max_queries.map_or(items.len(), |m| m.min(items.len()))];
    if items.is_empty() {
        return Err(Error::UndefinedMetric("no retrieval queries".into()));
    }
    let graph = ContextGraph::build(data.gather(pool_idx));
    let traces: Vec<QueryTrace> = items
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| {
            let q = &data.tuples[i];
            let mut r = rng::substream(cfg.seed, "rank.context", &[i as u64]);
            let (prompt, h) = match cfg.queries {
                QuerySet::HeldOut => {
                    let h = split
                        .designated(q)
                        .ok_or_else(|| Error::Contract(format!("tuple {i} mentions no held-out entity")))?;
                    let picks = select_context(&graph, Query { tuple: q, node: None, unknown: h }, cfg.n_ctx_max, cfg.strategy, &mut r);
                    let ctx: Vec<&SynergyTuple> = picks.iter().map(|&j| graph.node(j)).collect();
                    (heldout_prompt(&ctx, q, h, split), h)
                }
                QuerySet::Seen => {
                    let h = Entity::Drug(*[q.drug_a, q.drug_b].choose(&mut r).expect("two drugs"));
                    let picks = select_context(
                        &graph,
                        Query {
                            tuple: q,
                            node: Some(pos),
                            unknown: h,
                        },
                        cfg.n_ctx_max,
                        cfg.strategy,
                        &mut r,
                    );
                    let ctx: Vec<&SynergyTuple> = picks.iter().map(|&j| graph.node(j)).collect();
                    (mask_and_assemble(&ctx, q, &Masking::single(h)), h)
                }
            };
            let Entity::Drug(truth) = h else {
                return Err(Error::Contract("retrieval needs a hidden drug".into()));
            };
            Ok(QueryTrace {
                item: i,
                drug: truth,
                ranks: prefix_ranks(model, &prompt, truth, bank, &pool)?,
            })
        })
        .collect::<Result<_>>()?;
    let mean = (0..=cfg.n_ctx_max)
        .map(|k| mean_rank(&traces.iter().map(|t| t.ranks[k]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    Ok(RankCurve {
        mean_rank: mean,
        per_query: traces,
    })
}

/// Train the retrieval head: contrastive objective, unknown-drug mode.
pub fn train_retrieval<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    split: &SplitBundle,
    bank: &DrugEmbeddingBank,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&HistoryRecord),
) -> Result<Vec<HistoryRecord>> {
    if cfg.objective != Objective::Retrieval {
        return Err(Error::Config("train_retrieval needs objective = retrieval".into()));
    }
    train(model, data, split, cfg, Some(bank), on_epoch)
}
