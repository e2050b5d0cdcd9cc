//! Minibatch loss and exact parameter gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::PromptSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::loss::{loss_retrieval, loss_synergy, ramp_weights};
use super::{ForwardCache, Model};

/// Prompts per gradient accumulation chunk. Chunks are summed in index
/// order, so results do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Synergy,
    Retrieval,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synergy" => Ok(Objective::Synergy),
            "retrieval" => Ok(Objective::Retrieval),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }

    /// Per-prefix weights for a prompt with `k` prefix terms.
    pub fn prefix_weights<T: Scalar>(self, k: usize) -> Vec<T> {
        match self {
            Objective::Synergy => vec![T::one(); k],
            Objective::Retrieval => ramp_weights(k),
        }
    }
}

/// One training prompt with a label per prediction position and, for the
/// retrieval objective, a target vector per position.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub prompt: PromptSequence,
    pub labels: Vec<bool>,
    pub targets: Option<Vec<Vec<T>>>,
}

#[derive(Debug, Clone)]
pub struct BatchGrad<T> {
    pub loss: T,
    pub grads: Vec<T>,
}

pub fn gradient<T: Scalar>(model: &Model<T>, batch: &[Sample<T>], objective: Objective) -> Result<BatchGrad<T>> {
    gradient_scaled(model, batch, objective, T::one())
}

/// Like [`gradient`] with every prefix weight multiplied by `weight_scale`.
pub fn gradient_scaled<T: Scalar>(
    model: &Model<T>,
    batch: &[Sample<T>],
    objective: Objective,
    weight_scale: T,
) -> Result<BatchGrad<T>> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    match objective {
        Objective::Synergy => synergy_gradient(model, batch, weight_scale),
        Objective::Retrieval => retrieval_gradient(model, batch, weight_scale),
    }
}

fn sum_chunks<T: Scalar>(parts: Vec<Result<(T, Vec<T>)>>, n_params: usize) -> Result<BatchGrad<T>> {
    let mut loss = T::zero();
    let mut grads = vec![T::zero(); n_params];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    Ok(BatchGrad { loss, grads })
}

fn synergy_gradient<T: Scalar>(model: &Model<T>, batch: &[Sample<T>], scale: T) -> Result<BatchGrad<T>> {
    let inv_b = T::one() / T::lit(batch.len() as f64);
    let parts: Vec<Result<(T, Vec<T>)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = model.zero_grads();
            let mut loss = T::zero();
            for s in chunk {
                let (out, cache) = model.forward_cached(&s.prompt)?;
                let w: Vec<T> = Objective::Synergy
                    .prefix_weights::<T>(out.logits.len())
                    .into_iter()
                    .map(|w| w * scale)
                    .collect();
                let (l, mut dl) = loss_synergy(&out.logits, &s.labels, &w)?;
                dl.iter_mut().for_each(|g| *g *= inv_b);
                loss += l * inv_b;
                model.backward(&cache, &dl, None, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect();
    sum_chunks(parts, model.num_params())
}

fn retrieval_gradient<T: Scalar>(model: &Model<T>, batch: &[Sample<T>], scale: T) -> Result<BatchGrad<T>> {
    type Forward<T> = Result<(Vec<Vec<T>>, ForwardCache<T>)>;
    let forwards: Vec<Forward<T>> = batch
        .par_iter()
        .map(|s| {
            let (out, cache) = model.forward_cached(&s.prompt)?;
            let targets = s
                .targets
                .as_ref()
                .ok_or_else(|| Error::Contract("retrieval sample without targets".into()))?;
            if targets.len() != out.retrieval.len() {
                return Err(Error::Contract(format!(
                    "{} retrieval targets for {} positions",
                    targets.len(),
                    out.retrieval.len()
                )));
            }
            Ok((out.retrieval, cache))
        })
        .collect();
    let forwards: Vec<(Vec<Vec<T>>, ForwardCache<T>)> = forwards.into_iter().collect::<Result<_>>()?;

    let k = forwards.iter().map(|(r, _)| r.len()).max().unwrap_or(0);
    let weights: Vec<T> = Objective::Retrieval.prefix_weights(k);
    let inv_k = T::one() / T::lit(k as f64);
    let rdim = model.config.retrieval_dim;
    let mut dret: Vec<Vec<Vec<T>>> = forwards
        .iter()
        .map(|(r, _)| vec![vec![T::zero(); rdim]; r.len()])
        .collect();
    let mut loss = T::zero();
    let mut dlog_temp = T::zero();
    for i in 0..k {
        let members: Vec<usize> = (0..batch.len()).filter(|&p| forwards[p].0.len() > i).collect();
        let pred: Vec<Vec<T>> = members.iter().map(|&p| forwards[p].0[i].clone()).collect();
        let target: Vec<Vec<T>> = members
            .iter()
            .map(|&p| batch[p].targets.as_ref().expect("checked above")[i].clone())
            .collect();
        let c = loss_retrieval(&pred, &target, model.log_temp())?;
        let coef = weights[i] * scale * inv_k;
        loss += coef * c.loss;
        dlog_temp += coef * c.dlog_temp;
        for (m, &p) in members.iter().enumerate() {
            dret[p][i] = c.dpred[m].iter().map(|&g| g * coef).collect();
        }
    }

    let idx: Vec<usize> = (0..batch.len()).collect();
    let parts: Vec<Result<(T, Vec<T>)>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = model.zero_grads();
            for &p in chunk {
                let cache = &forwards[p].1;
                let zeros = vec![T::zero(); forwards[p].0.len()];
                model.backward(cache, &zeros, Some(&dret[p]), &mut grads)?;
            }
            Ok((T::zero(), grads))
        })
        .collect();
    let mut out = sum_chunks(parts, model.num_params())?;
    out.loss = loss;
    out.grads[model.layout.log_temp] += dlog_temp;
    Ok(out)
}

/// Batch loss without gradients.
pub fn batch_loss<T: Scalar>(model: &Model<T>, batch: &[Sample<T>], objective: Objective) -> Result<T> {
    Ok(gradient(model, batch, objective)?.loss)
}
