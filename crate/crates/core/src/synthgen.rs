//! Synthetic synergy worlds: a bilinear drug-drug-cell score with a median
//! threshold, so every label has a known generating function.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{CellId, Dataset, DrugId, EntityVocab, SynergyTuple};
use crate::error::{Error, Result};
use crate::rng;

/// Sampling knobs for [`sample_world_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub num_drugs: usize,
    pub num_cells: usize,
    pub d_latent: usize,
    pub noise_rate: f64,
    /// Offset added to the first latent coordinate before normalizing drug
    /// vectors. A nonzero offset makes the population-mean drug informative,
    /// which gives a context-free predictor something to learn.
    pub drug_offset: f64,
    /// Weight of the identity component shared by all cell matrices.
    pub shared_weight: f64,
}

impl WorldSpec {
    pub fn new(num_drugs: usize, num_cells: usize, d_latent: usize) -> Self {
        WorldSpec {
            num_drugs,
            num_cells,
            d_latent,
            noise_rate: 0.0,
            drug_offset: 0.0,
            shared_weight: 1.0,
        }
    }

    /// The desk-scale world used by the acceptance suite and the CLI default.
    pub fn desk() -> Self {
        WorldSpec {
            num_drugs: 60,
            num_cells: 6,
            d_latent: 4,
            noise_rate: 0.02,
            drug_offset: 0.8,
            shared_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentWorld {
    pub d_latent: usize,
    /// Unit-norm latent vector per drug.
    pub drug_vecs: Vec<Vec<f64>>,
    /// Symmetric `d_latent x d_latent` matrix per cell, row-major.
    pub cell_mats: Vec<Vec<f64>>,
    pub noise_rate: f64,
    pub threshold: f64,
}

/// Noise-free world with the default spec.
pub fn sample_world(num_drugs: usize, num_cells: usize, d_latent: usize, seed: u64) -> Result<LatentWorld> {
    sample_world_with(&WorldSpec::new(num_drugs, num_cells, d_latent), seed)
}

pub fn sample_world_with(spec: &WorldSpec, seed: u64) -> Result<LatentWorld> {
    if spec.num_drugs == 0 || spec.num_cells == 0 || spec.d_latent == 0 {
        return Err(Error::Config("world dimensions must all be >= 1".into()));
    }
    if !(0.0..0.5).contains(&spec.noise_rate) {
        return Err(Error::Config(format!("noise_rate {} outside [0, 0.5)", spec.noise_rate)));
    }
    let d = spec.d_latent;
    let mut rng = rng::stream(seed, "synth.world");
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let mut drug_vecs = Vec::with_capacity(spec.num_drugs);
    for _ in 0..spec.num_drugs {
        let mut v: Vec<f64> = (0..d).map(|_| normal()).collect();
        v[0] += spec.drug_offset;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[0] = 1.0;
        }
        drug_vecs.push(v);
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut cell_mats = Vec::with_capacity(spec.num_cells);
    for _ in 0..spec.num_cells {
        let g: Vec<f64> = (0..d * d).map(|_| normal()).collect();
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] = 0.5 * (g[i * d + j] + g[j * d + i]) * scale;
            }
            m[i * d + i] += spec.shared_weight;
        }
        cell_mats.push(m);
    }

    let mut world = LatentWorld {
        d_latent: d,
        drug_vecs,
        cell_mats,
        noise_rate: spec.noise_rate,
        threshold: 0.0,
    };
    world.threshold = world.median_score();
    Ok(world)
}

impl LatentWorld {
    pub fn num_drugs(&self) -> usize {
        self.drug_vecs.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cell_mats.len()
    }

    /// `v_a^T M_c v_b`.
    pub fn score(&self, a: DrugId, b: DrugId, c: CellId) -> f64 {
        let d = self.d_latent;
        let va = &self.drug_vecs[a.0 as usize];
        let vb = &self.drug_vecs[b.0 as usize];
        let m = &self.cell_mats[c.0 as usize];
        let mut s = 0.0;
        for i in 0..d {
            let row = &m[i * d..(i + 1) * d];
            let mv: f64 = row.iter().zip(vb).map(|(x, y)| x * y).sum();
            s += va[i] * mv;
        }
        s
    }

    /// Label without noise: strict `score > threshold`.
    pub fn clean_label(&self, a: DrugId, b: DrugId, c: CellId) -> bool {
        self.score(a, b, c) > self.threshold
    }

    /// Noisy label: the clean label flipped with probability `noise_rate`.
    pub fn label<R: Rng + ?Sized>(&self, a: DrugId, b: DrugId, c: CellId, rng: &mut R) -> bool {
        let y = self.clean_label(a, b, c);
        if self.noise_rate > 0.0 && rng.random::<f64>() < self.noise_rate {
            !y
        } else {
            y
        }
    }

    /// Median over all ordered distinct drug pairs and all cells.
    fn median_score(&self) -> f64 {
        let n = self.num_drugs();
        let mut scores = Vec::with_capacity(n * n * self.num_cells());
        for c in 0..self.num_cells() {
            for a in 0..n {
                for b in 0..n {
                    if a != b || n == 1 {
                        scores.push(self.score(DrugId(a as u32), DrugId(b as u32), CellId(c as u32)));
                    }
                }
            }
        }
        scores.sort_by(f64::total_cmp);
        let k = scores.len();
        if k % 2 == 1 {
            scores[k / 2]
        } else {
            0.5 * (scores[k / 2 - 1] + scores[k / 2])
        }
    }

    /// Group tag attached to synthetic tuples: cells are bucketed into
    /// three pseudo-tissues.
    pub fn group_of(c: CellId) -> String {
        format!("tissue_{}", c.0 % 3)
    }

    pub fn vocab(&self) -> EntityVocab {
        EntityVocab::synthetic(self.num_drugs(), self.num_cells())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Draw `count` tuples with uniform distinct drug pairs and uniform cells.
pub fn sample_dataset(world: &LatentWorld, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("count must be >= 1".into()));
    }
    let n = world.num_drugs();
    let mut rng = rng::stream(seed, "synth.dataset");
    let mut tuples = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.random_range(0..n);
        let b = if n > 1 {
            let b = rng.random_range(0..n - 1);
            if b >= a {
                b + 1
            } else {
                b
            }
        } else {
            a
        };
        let c = rng.random_range(0..world.num_cells());
        let (a, b, c) = (DrugId(a as u32), DrugId(b as u32), CellId(c as u32));
        let label = world.label(a, b, c, &mut rng);
        tuples.push(SynergyTuple {
            drug_a: a,
            drug_b: b,
            cell: c,
            label,
            group: Some(LatentWorld::group_of(c)),
        });
    }
    Dataset::new(world.vocab(), tuples)
}
