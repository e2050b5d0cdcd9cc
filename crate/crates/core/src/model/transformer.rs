//! Pre-norm GPT-2 style blocks: forward with optional activation cache,
//! exact backward, and prefix states for incremental evaluation.

use crate::context::{PromptSequence, Slot};
use crate::dataset::Token;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{attend, attend_backward, axpy, dot, gelu, gelu_backward, layernorm, layernorm_backward, linear, linear_backward};
use super::{Model, ParamLayout};

/// Model outputs for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// Synergy logit at every cell slot (each context example, then the query).
    pub logits: Vec<T>,
    /// Retrieval vector per example, read at its `UNKNOWN` token (cell slot if none).
    pub retrieval: Vec<Vec<T>>,
    pub readout_positions: Vec<usize>,
}

#[derive(Debug, Clone)]
struct KvLayer<T> {
    k: Vec<T>,
    v: Vec<T>,
}

/// Keys and values of an already-encoded token prefix.
///
/// Running extra tokens against a prefix state performs exactly the same
/// row-wise arithmetic as a full forward pass over the concatenation.
#[derive(Debug, Clone)]
pub struct PrefixState<T> {
    layers: Vec<KvLayer<T>>,
    len: usize,
    d: usize,
}

impl<T: Scalar> PrefixState<T> {
    fn new(n_layers: usize, d: usize) -> Self {
        PrefixState {
            layers: (0..n_layers)
                .map(|_| KvLayer {
                    k: Vec::new(),
                    v: Vec::new(),
                })
                .collect(),
            len: 0,
            d,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn truncate(&mut self, len: usize) {
        for l in &mut self.layers {
            l.k.truncate(len * self.d);
            l.v.truncate(len * self.d);
        }
        self.len = len;
    }
}

#[derive(Debug, Clone, Default)]
struct LayerCache<T> {
    x_in: Vec<T>,
    ln1: Vec<T>,
    ln1_stats: Vec<(T, T)>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    h: Vec<T>,
    ln2: Vec<T>,
    ln2_stats: Vec<(T, T)>,
    fc: Vec<T>,
    act: Vec<T>,
}

/// Activations recorded by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    tokens: Vec<usize>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    z: Vec<T>,
    lnf_stats: Vec<(T, T)>,
    cell_positions: Vec<usize>,
    readout_positions: Vec<usize>,
}

fn pair_mut<'a, T>(g: &'a mut [T], a: &std::ops::Range<usize>, b: &std::ops::Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

impl<T: Scalar> Model<T> {
    /// Inference forward pass over a whole prompt.
    pub fn forward(&self, prompt: &PromptSequence) -> Result<ForwardOutput<T>> {
        let toks = self.config.encode(prompt)?;
        let mut state = PrefixState::new(self.config.n_layers, self.config.d_model);
        let z = self.run(&mut state, &toks, None)?;
        Ok(self.readouts(prompt, &z))
    }

    /// Forward pass that also records what [`Model::backward`] needs.
    pub fn forward_cached(&self, prompt: &PromptSequence) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
        let toks = self.config.encode(prompt)?;
        let mut state = PrefixState::new(self.config.n_layers, self.config.d_model);
        let mut cache = ForwardCache {
            tokens: toks.clone(),
            layers: Vec::with_capacity(self.config.n_layers),
            x_final: Vec::new(),
            z: Vec::new(),
            lnf_stats: Vec::new(),
            cell_positions: prompt.query_positions(),
            readout_positions: Vec::new(),
        };
        let z = self.run(&mut state, &toks, Some(&mut cache))?;
        let out = self.readouts(prompt, &z);
        cache.readout_positions = out.readout_positions.clone();
        Ok((out, cache))
    }

    /// Encode a token prefix (typically the context examples of a prompt).
    pub fn encode_prefix(&self, tokens: &[(Slot, Token)]) -> Result<PrefixState<T>> {
        let mut state = PrefixState::new(self.config.n_layers, self.config.d_model);
        self.extend_prefix(&mut state, tokens)?;
        Ok(state)
    }

    pub fn extend_prefix(&self, state: &mut PrefixState<T>, tokens: &[(Slot, Token)]) -> Result<()> {
        let toks: Vec<usize> = tokens
            .iter()
            .map(|(_, t)| self.config.token_index(*t))
            .collect::<Result<_>>()?;
        self.run(state, &toks, None)?;
        Ok(())
    }

    /// Synergy logit and retrieval vector for a 3-token query appended to
    /// `state`. The state is left unchanged.
    pub fn query_readout(&self, state: &mut PrefixState<T>, query: &[(Slot, Token)]) -> Result<(T, Vec<T>)> {
        if query.len() != 3 {
            return Err(Error::Contract(format!("query must have 3 tokens, got {}", query.len())));
        }
        let toks: Vec<usize> = query
            .iter()
            .map(|(_, t)| self.config.token_index(*t))
            .collect::<Result<_>>()?;
        let before = state.len;
        let z = self.run(state, &toks, None);
        state.truncate(before);
        let z = z?;
        let d = self.config.d_model;
        let readout = query.iter().position(|(_, t)| *t == Token::Unknown).unwrap_or(2);
        let logit = self.synergy_logit(&z[2 * d..3 * d]);
        let ret = self.retrieval_vec(&z[readout * d..(readout + 1) * d]);
        Ok((logit, ret))
    }

    fn synergy_logit(&self, z: &[T]) -> T {
        let l = &self.layout;
        dot(z, &self.params[l.syn_w.clone()]) + self.params[l.syn_b.start]
    }

    fn retrieval_vec(&self, z: &[T]) -> Vec<T> {
        let l = &self.layout;
        let r = self.config.retrieval_dim;
        let mut out = vec![T::zero(); r];
        linear(z, 1, self.config.d_model, &self.params[l.ret_w.clone()], Some(&self.params[l.ret_b.clone()]), r, &mut out);
        out
    }

    fn readouts(&self, prompt: &PromptSequence, z: &[T]) -> ForwardOutput<T> {
        let d = self.config.d_model;
        let n = prompt.n_ctx + 1;
        let mut logits = Vec::with_capacity(n);
        let mut retrieval = Vec::with_capacity(n);
        let mut readout_positions = Vec::with_capacity(n);
        for j in 0..n {
            let cell = 4 * j + 2;
            logits.push(self.synergy_logit(&z[cell * d..(cell + 1) * d]));
            let p = prompt.readout_position(j);
            retrieval.push(self.retrieval_vec(&z[p * d..(p + 1) * d]));
            readout_positions.push(p);
        }
        ForwardOutput {
            logits,
            retrieval,
            readout_positions,
        }
    }

    /// Run `toks` at positions `state.len..` and return final-norm rows.
    fn run(&self, state: &mut PrefixState<T>, toks: &[usize], mut cache: Option<&mut ForwardCache<T>>) -> Result<Vec<T>> {
        let cfg = &self.config;
        let l = &self.layout;
        let p = &self.params;
        let d = cfg.d_model;
        let rows = toks.len();
        let start = state.len;
        if start + rows > cfg.max_seq() {
            return Err(Error::Input(format!(
                "sequence length {} exceeds maximum {}",
                start + rows,
                cfg.max_seq()
            )));
        }
        if let Some(&bad) = toks.iter().find(|&&t| t >= cfg.vocab_size()) {
            return Err(Error::Input(format!("token index {bad} outside vocabulary")));
        }
        debug_assert!(cache.is_none() || start == 0);

        let mut x = vec![T::zero(); rows * d];
        for (i, &t) in toks.iter().enumerate() {
            let xr = &mut x[i * d..(i + 1) * d];
            let e = &p[l.embedding_row(t, d)];
            let pos = &p[l.pos_emb.start + (start + i) * d..l.pos_emb.start + (start + i + 1) * d];
            for j in 0..d {
                xr[j] = e[j] + pos[j];
            }
        }

        let nh = cfg.n_heads;
        let total = start + rows;
        for (li, off) in l.layers.iter().enumerate() {
            let mut ln1 = vec![T::zero(); rows * d];
            let mut ln1_stats = vec![(T::zero(), T::zero()); rows];
            layernorm(&x, rows, d, &p[off.ln1_g.clone()], &p[off.ln1_b.clone()], &mut ln1, &mut ln1_stats);
            let mut qkv = vec![T::zero(); rows * 3 * d];
            linear(&ln1, rows, d, &p[off.w_qkv.clone()], Some(&p[off.b_qkv.clone()]), 3 * d, &mut qkv);

            let kv = &mut state.layers[li];
            for i in 0..rows {
                let r = &qkv[i * 3 * d..(i + 1) * 3 * d];
                kv.k.extend_from_slice(&r[d..2 * d]);
                kv.v.extend_from_slice(&r[2 * d..3 * d]);
            }

            let mut att = vec![T::zero(); rows * d];
            let mut probs = if cache.is_some() {
                vec![T::zero(); nh * rows * rows]
            } else {
                Vec::new()
            };
            attend(&qkv, rows, start, &kv.k, &kv.v, d, nh, &mut att, &mut probs);

            let mut hres = vec![T::zero(); rows * d];
            linear(&att, rows, d, &p[off.w_o.clone()], Some(&p[off.b_o.clone()]), d, &mut hres);
            for (hv, xv) in hres.iter_mut().zip(&x) {
                *hv += *xv;
            }
            let mut ln2 = vec![T::zero(); rows * d];
            let mut ln2_stats = vec![(T::zero(), T::zero()); rows];
            layernorm(&hres, rows, d, &p[off.ln2_g.clone()], &p[off.ln2_b.clone()], &mut ln2, &mut ln2_stats);
            let mut fc = vec![T::zero(); rows * 4 * d];
            linear(&ln2, rows, d, &p[off.w_fc.clone()], Some(&p[off.b_fc.clone()]), 4 * d, &mut fc);
            let mut act = vec![T::zero(); rows * 4 * d];
            gelu(&fc, &mut act);
            let mut out = vec![T::zero(); rows * d];
            linear(&act, rows, 4 * d, &p[off.w_proj.clone()], Some(&p[off.b_proj.clone()]), d, &mut out);
            for (ov, hv) in out.iter_mut().zip(&hres) {
                *ov += *hv;
            }

            let x_in = std::mem::replace(&mut x, out);
            if let Some(c) = cache.as_deref_mut() {
                c.layers.push(LayerCache {
                    x_in,
                    ln1,
                    ln1_stats,
                    qkv,
                    probs,
                    att,
                    h: hres,
                    ln2,
                    ln2_stats,
                    fc,
                    act,
                });
            }
        }
        state.len = total;

        let mut z = vec![T::zero(); rows * d];
        let mut stats = vec![(T::zero(), T::zero()); rows];
        layernorm(&x, rows, d, &p[l.lnf_g.clone()], &p[l.lnf_b.clone()], &mut z, &mut stats);
        if let Some(c) = cache {
            c.x_final = x;
            c.z = z.clone();
            c.lnf_stats = stats;
        }
        Ok(z)
    }

    /// Accumulate parameter gradients for one prompt given upstream
    /// gradients of its synergy logits and (optionally) retrieval vectors.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T], dretrieval: Option<&[Vec<T>]>, grads: &mut [T]) -> Result<()> {
        let cfg = &self.config;
        let l: &ParamLayout = &self.layout;
        let p = &self.params;
        let d = cfg.d_model;
        let rows = cache.tokens.len();
        if dlogits.len() != cache.cell_positions.len() {
            return Err(Error::Contract(format!(
                "{} logit gradients for {} prediction positions",
                dlogits.len(),
                cache.cell_positions.len()
            )));
        }
        if grads.len() != p.len() {
            return Err(Error::Contract("gradient buffer does not match parameter count".into()));
        }

        let mut dz = vec![T::zero(); rows * d];
        {
            let (gw, gb) = pair_mut(grads, &l.syn_w, &l.syn_b);
            let w = &p[l.syn_w.clone()];
            for (&pos, &g) in cache.cell_positions.iter().zip(dlogits) {
                if g == T::zero() {
                    continue;
                }
                axpy(g, w, &mut dz[pos * d..(pos + 1) * d]);
                axpy(g, &cache.z[pos * d..(pos + 1) * d], gw);
                gb[0] += g;
            }
        }
        if let Some(dret) = dretrieval {
            if dret.len() != cache.readout_positions.len() {
                return Err(Error::Contract("retrieval gradient count mismatch".into()));
            }
            let r = cfg.retrieval_dim;
            let (gw, gb) = pair_mut(grads, &l.ret_w, &l.ret_b);
            for (&pos, g) in cache.readout_positions.iter().zip(dret) {
                if g.len() != r {
                    return Err(Error::Contract("retrieval gradient has wrong width".into()));
                }
                let zr = &cache.z[pos * d..(pos + 1) * d];
                let mut dzr = vec![T::zero(); d];
                linear_backward(g, zr, &p[l.ret_w.clone()], 1, d, r, Some(&mut dzr), gw, Some(gb));
                axpy(T::one(), &dzr, &mut dz[pos * d..(pos + 1) * d]);
            }
        }

        let mut dx = vec![T::zero(); rows * d];
        {
            let (gg, gb) = pair_mut(grads, &l.lnf_g, &l.lnf_b);
            layernorm_backward(&dz, &cache.x_final, &cache.lnf_stats, rows, d, &p[l.lnf_g.clone()], &mut dx, gg, gb);
        }

        let nh = cfg.n_heads;
        for (off, lc) in l.layers.iter().zip(&cache.layers).rev() {
            // MLP branch.
            let mut dact = vec![T::zero(); rows * 4 * d];
            {
                let (gw, gb) = pair_mut(grads, &off.w_proj, &off.b_proj);
                linear_backward(&dx, &lc.act, &p[off.w_proj.clone()], rows, 4 * d, d, Some(&mut dact), gw, Some(gb));
            }
            let mut dfc = vec![T::zero(); rows * 4 * d];
            gelu_backward(&dact, &lc.fc, &mut dfc);
            let mut dln2 = vec![T::zero(); rows * d];
            {
                let (gw, gb) = pair_mut(grads, &off.w_fc, &off.b_fc);
                linear_backward(&dfc, &lc.ln2, &p[off.w_fc.clone()], rows, d, 4 * d, Some(&mut dln2), gw, Some(gb));
            }
            let mut dh = dx;
            {
                let (gg, gb) = pair_mut(grads, &off.ln2_g, &off.ln2_b);
                layernorm_backward(&dln2, &lc.h, &lc.ln2_stats, rows, d, &p[off.ln2_g.clone()], &mut dh, gg, gb);
            }

            // Attention branch.
            let mut datt = vec![T::zero(); rows * d];
            {
                let (gw, gb) = pair_mut(grads, &off.w_o, &off.b_o);
                linear_backward(&dh, &lc.att, &p[off.w_o.clone()], rows, d, d, Some(&mut datt), gw, Some(gb));
            }
            let mut dq = vec![T::zero(); rows * d];
            let mut dk = vec![T::zero(); rows * d];
            let mut dv = vec![T::zero(); rows * d];
            attend_backward(&datt, &lc.qkv, &lc.probs, rows, d, nh, &mut dq, &mut dk, &mut dv);
            let mut dqkv = vec![T::zero(); rows * 3 * d];
            for t in 0..rows {
                let r = &mut dqkv[t * 3 * d..(t + 1) * 3 * d];
                r[..d].copy_from_slice(&dq[t * d..(t + 1) * d]);
                r[d..2 * d].copy_from_slice(&dk[t * d..(t + 1) * d]);
                r[2 * d..].copy_from_slice(&dv[t * d..(t + 1) * d]);
            }
            let mut dln1 = vec![T::zero(); rows * d];
            {
                let (gw, gb) = pair_mut(grads, &off.w_qkv, &off.b_qkv);
                linear_backward(&dqkv, &lc.ln1, &p[off.w_qkv.clone()], rows, d, 3 * d, Some(&mut dln1), gw, Some(gb));
            }
            let mut dxin = dh;
            {
                let (gg, gb) = pair_mut(grads, &off.ln1_g, &off.ln1_b);
                layernorm_backward(&dln1, &lc.x_in, &lc.ln1_stats, rows, d, &p[off.ln1_g.clone()], &mut dxin, gg, gb);
            }
            dx = dxin;
        }

        for (t, &tok) in cache.tokens.iter().enumerate() {
            let g = &dx[t * d..(t + 1) * d];
            axpy(T::one(), g, &mut grads[l.embedding_row(tok, d)]);
            let ps = l.pos_emb.start + t * d;
            axpy(T::one(), g, &mut grads[ps..ps + d]);
        }
        Ok(())
    }
}
