//! Synergy tuples, entity vocabularies and the two held-out split regimes.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use indexmap::IndexSet;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Threshold applied to fractional labels at ingest.
pub const DEFAULT_LABEL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DrugId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub u32);

/// A drug or a cell line; the unit that gets held out and masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Entity {
    Drug(DrugId),
    Cell(CellId),
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entity::Drug(d) => write!(f, "drug#{}", d.0),
            Entity::Cell(c) => write!(f, "cell#{}", c.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    UnknownDrug,
    UnknownCell,
}

impl SplitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unknown-drug" | "drug" => Ok(SplitMode::UnknownDrug),
            "unknown-cell" | "cell" => Ok(SplitMode::UnknownCell),
            other => Err(Error::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

/// One labeled combination experiment `(drug_a, drug_b, cell, label)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SynergyTuple {
    pub drug_a: DrugId,
    pub drug_b: DrugId,
    pub cell: CellId,
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl SynergyTuple {
    pub fn new(drug_a: u32, drug_b: u32, cell: u32, label: bool) -> Self {
        SynergyTuple {
            drug_a: DrugId(drug_a),
            drug_b: DrugId(drug_b),
            cell: CellId(cell),
            label,
            group: None,
        }
    }

    pub fn mentions(&self, e: Entity) -> bool {
        match e {
            Entity::Drug(d) => self.drug_a == d || self.drug_b == d,
            Entity::Cell(c) => self.cell == c,
        }
    }

    /// Entities of the kind that `mode` holds out, in slot order, deduplicated.
    pub fn entities(&self, mode: SplitMode) -> Vec<Entity> {
        match mode {
            SplitMode::UnknownDrug if self.drug_a == self.drug_b => vec![Entity::Drug(self.drug_a)],
            SplitMode::UnknownDrug => vec![Entity::Drug(self.drug_a), Entity::Drug(self.drug_b)],
            SplitMode::UnknownCell => vec![Entity::Cell(self.cell)],
        }
    }

    pub fn mentions_any(&self, set: &BTreeSet<Entity>) -> bool {
        set.contains(&Entity::Drug(self.drug_a))
            || set.contains(&Entity::Drug(self.drug_b))
            || set.contains(&Entity::Cell(self.cell))
    }
}

/// The held-out entity a held-out tuple is attributed to: the cell in
/// unknown-cell mode, otherwise the first held-out drug in slot order.
pub fn designated_unknown(
    t: &SynergyTuple,
    held_out: &BTreeSet<Entity>,
    mode: SplitMode,
) -> Option<Entity> {
    t.entities(mode).into_iter().find(|e| held_out.contains(e))
}

/// One element of the model's flat token space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Drug(DrugId),
    Cell(CellId),
    Unknown,
    Unknown2,
    Label(bool),
}

/// Bijective name/id maps for drugs and cell lines.
///
/// The token space is laid out as `[drugs | cells | UNKNOWN | UNKNOWN2 | y=0 | y=1]`,
/// so reserved tokens can never collide with a real entity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityVocab {
    drugs: IndexSet<String>,
    cells: IndexSet<String>,
}

impl EntityVocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Vocabulary with synthetic names `drug_0..`, `cell_0..`.
    pub fn synthetic(num_drugs: usize, num_cells: usize) -> Self {
        let mut v = Self::new();
        for i in 0..num_drugs {
            v.intern_drug(&format!("drug_{i}"));
        }
        for i in 0..num_cells {
            v.intern_cell(&format!("cell_{i}"));
        }
        v
    }

    pub fn intern_drug(&mut self, name: &str) -> DrugId {
        let (idx, _) = self.drugs.insert_full(name.to_owned());
        DrugId(idx as u32)
    }

    pub fn intern_cell(&mut self, name: &str) -> CellId {
        let (idx, _) = self.cells.insert_full(name.to_owned());
        CellId(idx as u32)
    }

    pub fn num_drugs(&self) -> usize {
        self.drugs.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn drug_id(&self, name: &str) -> Option<DrugId> {
        self.drugs.get_index_of(name).map(|i| DrugId(i as u32))
    }

    pub fn cell_id(&self, name: &str) -> Option<CellId> {
        self.cells.get_index_of(name).map(|i| CellId(i as u32))
    }

    pub fn drug_name(&self, id: DrugId) -> Option<&str> {
        self.drugs.get_index(id.0 as usize).map(String::as_str)
    }

    pub fn cell_name(&self, id: CellId) -> Option<&str> {
        self.cells.get_index(id.0 as usize).map(String::as_str)
    }

    pub fn entity_name(&self, e: Entity) -> String {
        match e {
            Entity::Drug(d) => self.drug_name(d).map_or_else(|| e.to_string(), str::to_owned),
            Entity::Cell(c) => self.cell_name(c).map_or_else(|| e.to_string(), str::to_owned),
        }
    }

    pub fn unknown_id(&self) -> usize {
        self.num_drugs() + self.num_cells()
    }

    pub fn unknown2_id(&self) -> usize {
        self.unknown_id() + 1
    }

    pub fn num_tokens(&self) -> usize {
        self.num_drugs() + self.num_cells() + 4
    }

    pub fn resolves(&self, t: &SynergyTuple) -> bool {
        (t.drug_a.0 as usize) < self.num_drugs()
            && (t.drug_b.0 as usize) < self.num_drugs()
            && (t.cell.0 as usize) < self.num_cells()
    }

    /// SHA-256 over the ordered names; stored in checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.drugs {
            h.update(b"d:");
            h.update(d.as_bytes());
            h.update(b"\n");
        }
        for c in &self.cells {
            h.update(b"c:");
            h.update(c.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// A vocabulary together with every ingested tuple, in file order.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub vocab: EntityVocab,
    pub tuples: Vec<SynergyTuple>,
}

impl Dataset {
    pub fn new(vocab: EntityVocab, tuples: Vec<SynergyTuple>) -> Result<Self> {
        if let Some(bad) = tuples.iter().position(|t| !vocab.resolves(t)) {
            return Err(Error::Input(format!("tuple {bad} references an id outside the vocabulary")));
        }
        Ok(Dataset { vocab, tuples })
    }

    pub fn gather(&self, idx: &[usize]) -> Vec<SynergyTuple> {
        idx.iter().map(|&i| self.tuples[i].clone()).collect()
    }

    /// Write the dataset in the ingest CSV format.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let with_group = self.tuples.iter().any(|t| t.group.is_some());
        let mut header = vec!["drug_1", "drug_2", "cell_line", "label"];
        if with_group {
            header.push("group");
        }
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for t in &self.tuples {
            let mut rec = vec![
                self.vocab.drug_name(t.drug_a).unwrap_or_default().to_owned(),
                self.vocab.drug_name(t.drug_b).unwrap_or_default().to_owned(),
                self.vocab.cell_name(t.cell).unwrap_or_default().to_owned(),
                u8::from(t.label).to_string(),
            ];
            if with_group {
                rec.push(t.group.clone().unwrap_or_default());
            }
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Read `drug_1,drug_2,cell_line,label[,group]` rows from a file.
pub fn ingest_csv(path: &Path, threshold: f64) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, threshold)
}

/// Same as [`ingest_csv`] over any reader. Ids are assigned in
/// first-appearance order; duplicate rows are kept.
pub fn ingest_reader<R: Read>(reader: R, threshold: f64) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .quoting(false)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let cols: Vec<&str> = header.iter().collect();
    let with_group = match cols.as_slice() {
        ["drug_1", "drug_2", "cell_line", "label"] => false,
        ["drug_1", "drug_2", "cell_line", "label", "group"] => true,
        // An empty file has no header at all; treat it as an empty dataset.
        [] | [""] => return Ok(Dataset::default()),
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `drug_1,drug_2,cell_line,label[,group]`, got `{}`", cols.join(",")),
            })
        }
    };

    let mut vocab = EntityVocab::new();
    let mut tuples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let expected = if with_group { 5 } else { 4 };
        if rec.len() != expected && !(with_group && rec.len() == 4) {
            return Err(Error::Parse {
                line,
                message: format!("expected {expected} fields, found {}", rec.len()),
            });
        }
        for (i, name) in ["drug_1", "drug_2", "cell_line"].iter().enumerate() {
            if rec[i].is_empty() {
                return Err(Error::Parse {
                    line,
                    message: format!("empty `{name}` field"),
                });
            }
        }
        let label = parse_label(&rec[3], threshold).ok_or_else(|| Error::Value {
            line,
            message: format!("label `{}` is neither 0/1 nor a finite number", &rec[3]),
        })?;
        let drug_a = vocab.intern_drug(&rec[0]);
        let drug_b = vocab.intern_drug(&rec[1]);
        let cell = vocab.intern_cell(&rec[2]);
        let group = rec.get(4).filter(|g| !g.is_empty()).map(str::to_owned);
        tuples.push(SynergyTuple {
            drug_a,
            drug_b,
            cell,
            label,
            group,
        });
    }
    Ok(Dataset { vocab, tuples })
}

/// Binarize a label field: exact `0`/`1`, otherwise `value > threshold`.
pub fn parse_label(field: &str, threshold: f64) -> Option<bool> {
    match field {
        "0" => Some(false),
        "1" => Some(true),
        other => {
            let v: f64 = other.parse().ok()?;
            v.is_finite().then_some(v > threshold)
        }
    }
}

/// Train / context-bank / validation / test partition around a held-out set.
///
/// Lists hold indices into [`Dataset::tuples`]. This is also the on-disk
/// manifest format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBundle {
    pub mode: SplitMode,
    pub seed: u64,
    pub held_out: BTreeSet<Entity>,
    pub train: Vec<usize>,
    pub context_bank: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitBundle {
    pub fn designated(&self, t: &SynergyTuple) -> Option<Entity> {
        designated_unknown(t, &self.held_out, self.mode)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Check the partition invariants against the dataset it indexes.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let n = data.tuples.len();
        let mut seen = vec![false; n];
        for (name, list) in self.lists() {
            for &i in list {
                if i >= n {
                    return Err(Error::Contract(format!("{name} index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Contract(format!("tuple {i} appears in more than one split")));
                }
            }
        }
        for &i in &self.train {
            if data.tuples[i].mentions_any(&self.held_out) {
                return Err(Error::Contract(format!("train tuple {i} mentions a held-out entity")));
            }
        }
        for (name, list) in self.lists().into_iter().skip(1) {
            for &i in list {
                if !data.tuples[i].mentions_any(&self.held_out) {
                    return Err(Error::Contract(format!("{name} tuple {i} mentions no held-out entity")));
                }
            }
        }
        Ok(())
    }

    fn lists(&self) -> [(&'static str, &Vec<usize>); 4] {
        [
            ("train", &self.train),
            ("context_bank", &self.context_bank),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }
}

fn entity_counts(data: &Dataset, mode: SplitMode) -> Vec<(Entity, usize)> {
    let mut counts: HashMap<Entity, usize> = HashMap::new();
    for t in &data.tuples {
        for e in t.entities(mode) {
            *counts.entry(e).or_default() += 1;
        }
    }
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort();
    v
}

fn partition_held_out(data: &Dataset, held_out: &BTreeSet<Entity>) -> (Vec<usize>, Vec<usize>) {
    (0..data.tuples.len()).partition(|&i| !data.tuples[i].mentions_any(held_out))
}

/// Few-shot regime: hold out `m` entities, put exactly `n` tuples per
/// entity in the context bank and every other held-out tuple in test.
///
/// A tuple mentioning two held-out drugs fills only one entity's quota;
/// entities are served in random order, so which one gets it is random.
pub fn make_fewshot_split(
    data: &Dataset,
    m: usize,
    n: usize,
    mode: SplitMode,
    seed: u64,
) -> Result<SplitBundle> {
    let mut rng = rng::stream(seed, "split.fewshot");
    let counts = entity_counts(data, mode);
    let eligible: Vec<Entity> = counts.iter().filter(|(_, c)| *c >= n).map(|(e, _)| *e).collect();
    if eligible.len() < m {
        let (worst, have) = counts
            .iter()
            .filter(|(_, c)| *c < n)
            .min_by_key(|(e, c)| (*c, *e))
            .map(|(e, c)| (*e, *c))
            .unwrap_or((Entity::Drug(DrugId(u32::MAX)), 0));
        return Err(Error::Split {
            entity: data.vocab.entity_name(worst),
            available: have,
            required: n,
        });
    }
    let held_out: BTreeSet<Entity> = eligible.choose_multiple(&mut rng, m).copied().collect();
    let (train, held) = partition_held_out(data, &held_out);

    let mut order: Vec<Entity> = held_out.iter().copied().collect();
    order.shuffle(&mut rng);
    let mut taken = vec![false; data.tuples.len()];
    let mut bank = Vec::with_capacity(m * n);
    for h in order {
        let avail: Vec<usize> = held
            .iter()
            .copied()
            .filter(|&i| !taken[i] && data.tuples[i].mentions(h))
            .collect();
        if avail.len() < n {
            return Err(Error::Split {
                entity: data.vocab.entity_name(h),
                available: avail.len(),
                required: n,
            });
        }
        for &i in avail.choose_multiple(&mut rng, n) {
            taken[i] = true;
            bank.push(i);
        }
    }
    bank.sort_unstable();
    let test = held.into_iter().filter(|&i| !taken[i]).collect();
    Ok(SplitBundle {
        mode,
        seed,
        held_out,
        train,
        context_bank: bank,
        validation: Vec::new(),
        test,
    })
}

/// Optimization regime: hold out `m` entities and split their tuples into
/// three near-equal random parts (bank, validation, test).
pub fn make_optimization_split(data: &Dataset, m: usize, mode: SplitMode, seed: u64) -> Result<SplitBundle> {
    let mut rng = rng::stream(seed, "split.optimization");
    let counts = entity_counts(data, mode);
    if counts.len() < m {
        return Err(Error::Config(format!(
            "requested {m} held-out entities but only {} exist",
            counts.len()
        )));
    }
    let candidates: Vec<Entity> = counts.iter().map(|(e, _)| *e).collect();
    let held_out: BTreeSet<Entity> = candidates.choose_multiple(&mut rng, m).copied().collect();
    let (train, mut held) = partition_held_out(data, &held_out);
    held.shuffle(&mut rng);

    let total = held.len();
    let base = total / 3;
    let extra = total % 3;
    let bank_len = base + usize::from(extra > 0);
    let val_len = base + usize::from(extra > 1);
    let mut bank = held[..bank_len].to_vec();
    let mut validation = held[bank_len..bank_len + val_len].to_vec();
    let mut test = held[bank_len + val_len..].to_vec();
    bank.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(SplitBundle {
        mode,
        seed,
        held_out,
        train,
        context_bank: bank,
        validation,
        test,
    })
}
