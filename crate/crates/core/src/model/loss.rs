//! Prefix-averaged synergy loss and the symmetric contrastive retrieval loss.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logits<T: Scalar>(z: T, y: bool) -> T {
    let yv = if y { T::one() } else { T::zero() };
    z.max(T::zero()) - z * yv + (-z.abs()).exp().ln_1p()
}

/// `d bce / d z = sigmoid(z) - y`.
pub fn bce_grad<T: Scalar>(z: T, y: bool) -> T {
    let yv = if y { T::one() } else { T::zero() };
    sigmoid(z) - yv
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Retrieval prefix weights for `k` prefix terms: `(i + 1) / k`, so the
/// first term weighs `1/k` and the last `1`.
pub fn ramp_weights<T: Scalar>(k: usize) -> Vec<T> {
    (0..k).map(|i| T::lit((i + 1) as f64 / k as f64)).collect()
}

/// `(1/(n+1)) Σ_i w_i BCE(logit_i, y_i)` and its gradient w.r.t. the logits.
pub fn loss_synergy<T: Scalar>(logits: &[T], labels: &[bool], weights: &[T]) -> Result<(T, Vec<T>)> {
    if logits.len() != labels.len() || logits.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} logits, {} labels, {} weights",
            logits.len(),
            labels.len(),
            weights.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Contract("no prediction positions".into()));
    }
    let inv = T::one() / T::lit(logits.len() as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for ((&z, &y), &w) in logits.iter().zip(labels).zip(weights) {
        loss += w * bce_with_logits(z, y);
        grad.push(w * bce_grad(z, y) * inv);
    }
    Ok((loss * inv, grad))
}

/// Value and gradients of the symmetric contrastive loss.
#[derive(Debug, Clone)]
pub struct Contrastive<T> {
    pub loss: T,
    /// Gradient w.r.t. the raw (unnormalized) predictions.
    pub dpred: Vec<Vec<T>>,
    pub dlog_temp: T,
}

fn normalize<T: Scalar>(v: &[T]) -> (Vec<T>, T) {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(1e-12));
    (v.iter().map(|&x| x / norm).collect(), norm)
}

fn log_softmax_ce<T: Scalar>(row: &[T], target: usize, probs: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (p, &s) in probs.iter_mut().zip(row) {
        *p = (s - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    max + sum.ln() - row[target]
}

/// `CE(e^τ G P̂ᵀ, I) + CE(e^τ P̂ Gᵀ, I)`, each cross-entropy averaged over
/// rows. Predictions are L2-normalized here; targets are used as given
/// (unit rows, or zero rows for positions without a hidden drug).
pub fn loss_retrieval<T: Scalar>(pred: &[Vec<T>], target: &[Vec<T>], log_temp: T) -> Result<Contrastive<T>> {
    let b = pred.len();
    if b == 0 {
        return Err(Error::Contract("empty contrastive batch".into()));
    }
    if target.len() != b {
        return Err(Error::Contract(format!("{b} predictions but {} targets", target.len())));
    }
    let r = pred[0].len();
    if pred.iter().chain(target).any(|v| v.len() != r) {
        return Err(Error::Contract("retrieval vectors differ in width".into()));
    }
    let scale = log_temp.exp();
    let normed: Vec<(Vec<T>, T)> = pred.iter().map(|p| normalize(p)).collect();

    // s[i][j] = e^τ g_i · p̂_j
    let mut s = vec![T::zero(); b * b];
    for i in 0..b {
        for j in 0..b {
            let d: T = target[i].iter().zip(&normed[j].0).map(|(&a, &c)| a * c).sum();
            s[i * b + j] = scale * d;
        }
    }
    let inv_b = T::one() / T::lit(b as f64);
    let mut ds = vec![T::zero(); b * b];
    let mut probs = vec![T::zero(); b];
    let mut loss = T::zero();
    let mut row = vec![T::zero(); b];
    for i in 0..b {
        row.copy_from_slice(&s[i * b..(i + 1) * b]);
        loss += log_softmax_ce(&row, i, &mut probs) * inv_b;
        for j in 0..b {
            let ind = if i == j { T::one() } else { T::zero() };
            ds[i * b + j] += (probs[j] - ind) * inv_b;
        }
    }
    for j in 0..b {
        for i in 0..b {
            row[i] = s[i * b + j];
        }
        loss += log_softmax_ce(&row, j, &mut probs) * inv_b;
        for i in 0..b {
            let ind = if i == j { T::one() } else { T::zero() };
            ds[i * b + j] += (probs[i] - ind) * inv_b;
        }
    }

    let mut dlog_temp = T::zero();
    for (&g, &v) in ds.iter().zip(&s) {
        dlog_temp += g * v;
    }
    let mut dpred = Vec::with_capacity(b);
    for j in 0..b {
        let mut dhat = vec![T::zero(); r];
        for i in 0..b {
            let c = ds[i * b + j] * scale;
            for (dh, &g) in dhat.iter_mut().zip(&target[i]) {
                *dh += c * g;
            }
        }
        let (phat, norm) = &normed[j];
        let proj: T = phat.iter().zip(&dhat).map(|(&a, &c)| a * c).sum();
        dpred.push(dhat.iter().zip(phat).map(|(&dh, &ph)| (dh - ph * proj) / *norm).collect());
    }
    Ok(Contrastive {
        loss,
        dpred,
        dlog_temp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_zero_is_ln2() {
        let (l, g) = loss_synergy(&[0.0f64], &[true], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_logits_give_tiny_loss() {
        let (l, _) = loss_synergy(&[40.0f64, -40.0], &[true, false], &[1.0, 1.0]).unwrap();
        assert!(l < 1e-15);
    }

    #[test]
    fn synergy_matches_reference_mean() {
        let z = [0.3f64, -1.2, 2.5, 0.0];
        let y = [true, false, false, true];
        let (l, _) = loss_synergy(&z, &y, &[1.0; 4]).unwrap();
        let reference: f64 = z
            .iter()
            .zip(&y)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                if y {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / 4.0;
        assert!((l - reference).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        assert!(matches!(
            loss_synergy(&[0.0f64, 1.0], &[true], &[1.0, 1.0]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(loss_retrieval::<f64>(&[], &[], 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn ramp_weights_end_at_one() {
        let w: Vec<f64> = ramp_weights(5);
        assert_eq!(w[0], 0.2);
        assert_eq!(w[4], 1.0);
    }

    #[test]
    fn contrastive_single_row_is_zero() {
        let c = loss_retrieval(&[vec![0.3f64, -0.2, 0.9]], &[vec![1.0, 0.0, 0.0]], 2.0).unwrap();
        assert_eq!(c.loss, 0.0);
        assert!(c.dpred[0].iter().all(|&g| g == 0.0));
        assert_eq!(c.dlog_temp, 0.0);
    }

    #[test]
    fn contrastive_matched_beats_swapped() {
        let g = vec![vec![1.0f64, 0.0], vec![0.0, 1.0]];
        let matched = loss_retrieval(&g, &g, 10.0f64.ln()).unwrap().loss;
        let swapped = loss_retrieval(&[g[1].clone(), g[0].clone()], &g, 10.0f64.ln()).unwrap().loss;
        assert!(swapped > matched);
        let sharp = loss_retrieval(&g, &g, 50.0).unwrap().loss;
        assert!(sharp < 1e-12);
    }

    #[test]
    fn contrastive_gradient_matches_difference() {
        let pred = vec![vec![0.3f64, -0.5, 0.8], vec![-0.1, 0.9, 0.2], vec![0.6, 0.1, -0.4]];
        let target = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]];
        let tau = 1.3;
        let c = loss_retrieval(&pred, &target, tau).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            for k in 0..3 {
                let mut p = pred.clone();
                p[j][k] += h;
                let up = loss_retrieval(&p, &target, tau).unwrap().loss;
                p[j][k] -= 2.0 * h;
                let down = loss_retrieval(&p, &target, tau).unwrap().loss;
                assert!(((up - down) / (2.0 * h) - c.dpred[j][k]).abs() < 1e-7);
            }
        }
        let up = loss_retrieval(&pred, &target, tau + h).unwrap().loss;
        let down = loss_retrieval(&pred, &target, tau - h).unwrap().loss;
        assert!(((up - down) / (2.0 * h) - c.dlog_temp).abs() < 1e-7);
    }
}
