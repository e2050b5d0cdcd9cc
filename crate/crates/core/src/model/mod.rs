//! Tuple-token decoder-only transformer with a synergy head and a
//! retrieval head.

pub mod checkpoint;
pub mod kernels;
pub mod grad;
pub mod loss;
mod transformer;

use std::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::context::PromptSequence;
use crate::dataset::{EntityVocab, Token};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

pub use transformer::{ForwardCache, ForwardOutput, PrefixState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_ctx_examples: usize,
    pub num_drugs: usize,
    pub num_cells: usize,
    pub retrieval_dim: usize,
}

impl ModelConfig {
    /// Desk-scale default: 64 wide, 4 layers, 4 heads.
    pub fn desk(vocab: &EntityVocab, retrieval_dim: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            max_ctx_examples: 20,
            num_drugs: vocab.num_drugs(),
            num_cells: vocab.num_cells(),
            retrieval_dim,
        }
    }

    /// Full-size unknown-drug configuration (256 wide, 12 layers, 4 heads).
    pub fn full_drug(vocab: &EntityVocab) -> Self {
        ModelConfig {
            d_model: 256,
            n_layers: 12,
            n_heads: 4,
            max_ctx_examples: 20,
            num_drugs: vocab.num_drugs(),
            num_cells: vocab.num_cells(),
            retrieval_dim: 512,
        }
    }

    /// Full-size unknown-cell configuration (256 wide, 6 layers, 4 heads).
    pub fn full_cell(vocab: &EntityVocab) -> Self {
        ModelConfig {
            n_layers: 6,
            max_ctx_examples: 10,
            ..Self::full_drug(vocab)
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.num_drugs + self.num_cells + 4
    }

    pub fn max_seq(&self) -> usize {
        4 * self.max_ctx_examples + 3
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.retrieval_dim == 0 {
            return Err(Error::Config("n_layers and retrieval_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Row of the embedding table for `tok`; same layout as [`EntityVocab`].
    pub fn token_index(&self, tok: Token) -> Result<usize> {
        let base = self.num_drugs + self.num_cells;
        let idx = match tok {
            Token::Drug(d) if (d.0 as usize) < self.num_drugs => d.0 as usize,
            Token::Cell(c) if (c.0 as usize) < self.num_cells => self.num_drugs + c.0 as usize,
            Token::Unknown => base,
            Token::Unknown2 => base + 1,
            Token::Label(y) => base + 2 + usize::from(y),
            other => return Err(Error::Input(format!("{other:?} outside model vocabulary"))),
        };
        Ok(idx)
    }

    pub fn encode(&self, prompt: &PromptSequence) -> Result<Vec<usize>> {
        if prompt.len() > self.max_seq() {
            return Err(Error::Input(format!(
                "prompt length {} exceeds maximum {}",
                prompt.len(),
                self.max_seq()
            )));
        }
        prompt.tokens.iter().map(|(_, t)| self.token_index(*t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Init {
    Normal,
    Zeros,
    Ones,
    LogTemp,
}

/// Initial value of the learnable contrastive temperature: `ln(1 / 0.07)`.
pub const INIT_LOG_TEMP: f64 = 2.659_260_036_932_778_4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    init: Init,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerOffsets {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

/// Named tensors laid out in one flat buffer.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
    pub(crate) tok_emb: Range<usize>,
    pub(crate) pos_emb: Range<usize>,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: Range<usize>,
    pub(crate) lnf_b: Range<usize>,
    pub(crate) syn_w: Range<usize>,
    pub(crate) syn_b: Range<usize>,
    pub(crate) ret_w: Range<usize>,
    pub(crate) ret_b: Range<usize>,
    pub(crate) log_temp: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut entries = Vec::new();
        let mut total = 0usize;
        let mut add = |name: String, shape: Vec<usize>, init: Init| -> Range<usize> {
            let e = ParamEntry {
                name,
                shape,
                offset: total,
                init,
            };
            total += e.len();
            let r = e.range();
            entries.push(e);
            r
        };
        let tok_emb = add("tok_emb".into(), vec![cfg.vocab_size(), d], Init::Normal);
        let pos_emb = add("pos_emb".into(), vec![cfg.max_seq(), d], Init::Normal);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: add(p("ln1.g"), vec![d], Init::Ones),
                ln1_b: add(p("ln1.b"), vec![d], Init::Zeros),
                w_qkv: add(p("attn.w_qkv"), vec![d, 3 * d], Init::Normal),
                b_qkv: add(p("attn.b_qkv"), vec![3 * d], Init::Zeros),
                w_o: add(p("attn.w_o"), vec![d, d], Init::Normal),
                b_o: add(p("attn.b_o"), vec![d], Init::Zeros),
                ln2_g: add(p("ln2.g"), vec![d], Init::Ones),
                ln2_b: add(p("ln2.b"), vec![d], Init::Zeros),
                w_fc: add(p("mlp.w_fc"), vec![d, 4 * d], Init::Normal),
                b_fc: add(p("mlp.b_fc"), vec![4 * d], Init::Zeros),
                w_proj: add(p("mlp.w_proj"), vec![4 * d, d], Init::Normal),
                b_proj: add(p("mlp.b_proj"), vec![d], Init::Zeros),
            });
        }
        let lnf_g = add("ln_f.g".into(), vec![d], Init::Ones);
        let lnf_b = add("ln_f.b".into(), vec![d], Init::Zeros);
        let syn_w = add("head.synergy.w".into(), vec![d], Init::Normal);
        let syn_b = add("head.synergy.b".into(), vec![1], Init::Zeros);
        let ret_w = add("head.retrieval.w".into(), vec![d, cfg.retrieval_dim], Init::Normal);
        let ret_b = add("head.retrieval.b".into(), vec![cfg.retrieval_dim], Init::Zeros);
        let log_temp = add("log_temp".into(), vec![1], Init::LogTemp).start;
        ParamLayout {
            entries,
            total,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            syn_w,
            syn_b,
            ret_w,
            ret_b,
            log_temp,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Range of one embedding-table row.
    pub fn embedding_row(&self, token_index: usize, d_model: usize) -> Range<usize> {
        let start = self.tok_emb.start + token_index * d_model;
        start..start + d_model
    }
}

/// A configured model: architecture plus its flat parameter vector.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<T>,
}

impl<T: Scalar> Model<T> {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![T::zero(); layout.total()];
        let mut rng = rng::stream(seed, "model.init");
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        for e in layout.entries() {
            let slot = &mut params[e.range()];
            match e.init {
                Init::Normal => slot.iter_mut().for_each(|p| *p = T::lit(normal.sample(&mut rng))),
                Init::Zeros => slot.fill(T::zero()),
                Init::Ones => slot.fill(T::one()),
                Init::LogTemp => slot.fill(T::lit(INIT_LOG_TEMP)),
            }
        }
        Ok(Model { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::Input(format!(
                "parameter vector has {} entries, layout needs {}",
                params.len(),
                layout.total()
            )));
        }
        Ok(Model { config, layout, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|e| &self.params[e.range()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.get(name)?.range();
        Some(&mut self.params[r])
    }

    pub fn log_temp(&self) -> T {
        self.params[self.layout.log_temp]
    }

    /// Convert parameters to another scalar width.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::lit(p.as_f64())).collect(),
        }
    }

    pub fn zero_grads(&self) -> Vec<T> {
        vec![T::zero(); self.params.len()]
    }
}
