//! Softmax with temperature, cross-entropy and KL divergence.
//!
//! The checked functions operate on single probability vectors and validate
//! their inputs. The `*_logits` variants work on `(N, C)` logit batches and
//! return per-example values together with gradients with respect to the
//! logits; those are the ones the attacks and training objectives use.
//!
//! Every logarithm of a probability is taken of `max(p, PROB_FLOOR)`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Lower clamp applied to probabilities before a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_inv_temperature<T: Real>(inv_temperature: T) -> Result<()> {
    if !(inv_temperature > T::zero()) || !inv_temperature.is_finite() {
        return Err(Error::invalid(format!(
            "inverse temperature must be positive and finite, got {inv_temperature:?}"
        )));
    }
    Ok(())
}

fn log_floor<T: Real>() -> T {
    T::from_f64(PROB_FLOOR.ln())
}

/// Writes `log softmax(logits * inv_temperature)` into `out`, clamped below at
/// `ln(PROB_FLOOR)`, and returns nothing else. `probs` receives the softmax.
fn log_softmax_into<T: Real>(logits: &[T], inv_temperature: T, probs: &mut [T], logp: &mut [T]) {
    let mut max = T::neg_infinity();
    for &z in logits {
        let s = z * inv_temperature;
        if s > max {
            max = s;
        }
    }
    let mut sum = T::zero();
    for (p, &z) in probs.iter_mut().zip(logits) {
        let e = (z * inv_temperature - max).exp();
        *p = e;
        sum += e;
    }
    let log_sum = sum.ln();
    let floor = log_floor::<T>();
    for ((p, lp), &z) in probs.iter_mut().zip(logp.iter_mut()).zip(logits) {
        *p = *p / sum;
        *lp = (z * inv_temperature - max - log_sum).max(floor);
    }
}

/// `softmax(logits * inv_temperature)`.
pub fn softmax_temperature<T: Real>(logits: &[T], inv_temperature: T) -> Result<Vec<T>> {
    check_inv_temperature(inv_temperature)?;
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut probs = vec![T::zero(); logits.len()];
    let mut logp = vec![T::zero(); logits.len()];
    log_softmax_into(logits, inv_temperature, &mut probs, &mut logp);
    Ok(probs)
}

/// Row-wise softmax of an `(N, C)` logit batch.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>, inv_temperature: T) -> Result<Tensor<T>> {
    check_inv_temperature(inv_temperature)?;
    let c = logits.row_len();
    let mut out = Tensor::zeros(logits.shape().to_vec());
    let mut logp = vec![T::zero(); c];
    for i in 0..logits.batch() {
        let mut probs = vec![T::zero(); c];
        log_softmax_into(logits.row(i), inv_temperature, &mut probs, &mut logp);
        out.row_mut(i).copy_from_slice(&probs);
    }
    Ok(out)
}

/// `-ln p[label]`.
pub fn cross_entropy<T: Real>(probabilities: &[T], label: usize) -> Result<T> {
    let p = *probabilities.get(label).ok_or_else(|| {
        Error::invalid(format!(
            "label {label} out of range for {} classes",
            probabilities.len()
        ))
    })?;
    Ok(-(p.max(T::from_f64(PROB_FLOOR))).ln())
}

/// `sum_c p_c ln(p_c / q_c)`. Zero entries of `p` contribute zero; `q` must be
/// strictly positive.
pub fn kl_divergence<T: Real>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid(format!(
            "kl_divergence length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if let Some(i) = q.iter().position(|&v| !(v > T::zero())) {
        return Err(Error::invalid(format!(
            "kl_divergence: q[{i}] is not strictly positive"
        )));
    }
    if let Some(i) = p.iter().position(|&v| v < T::zero() || !v.is_finite()) {
        return Err(Error::invalid(format!("kl_divergence: p[{i}] is invalid")));
    }
    let floor = T::from_f64(PROB_FLOOR);
    let mut acc = T::zero();
    for (&pc, &qc) in p.iter().zip(q) {
        if pc > T::zero() {
            acc += pc * (pc.max(floor).ln() - qc.max(floor).ln());
        }
    }
    Ok(acc.max(T::zero()))
}

/// Per-example cross-entropy of `softmax(logits * inv_temperature)` and its
/// gradient with respect to the logits.
///
/// The gradient is `inv_temperature * (softmax - onehot)` for every row.
pub fn cross_entropy_logits<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    inv_temperature: T,
) -> Result<(Vec<T>, Tensor<T>)> {
    check_inv_temperature(inv_temperature)?;
    let n = logits.batch();
    let c = logits.row_len();
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut losses = Vec::with_capacity(n);
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let mut probs = vec![T::zero(); c];
    let mut logp = vec![T::zero(); c];
    for (i, &y) in labels.iter().enumerate() {
        log_softmax_into(logits.row(i), inv_temperature, &mut probs, &mut logp);
        losses.push(-logp[y]);
        let g = grad.row_mut(i);
        for k in 0..c {
            let onehot = if k == y { T::one() } else { T::zero() };
            g[k] = inv_temperature * (probs[k] - onehot);
        }
    }
    Ok((losses, grad))
}

/// Per-example `KL(softmax(natural) || softmax(adversarial))` with gradients
/// with respect to both logit batches.
pub fn kl_logits<T: Real>(
    natural: &Tensor<T>,
    adversarial: &Tensor<T>,
) -> Result<(Vec<T>, Tensor<T>, Tensor<T>)> {
    if natural.shape() != adversarial.shape() {
        return Err(Error::Shape(format!(
            "kl between logits of shape {:?} and {:?}",
            natural.shape(),
            adversarial.shape()
        )));
    }
    let n = natural.batch();
    let c = natural.row_len();
    let mut values = Vec::with_capacity(n);
    let mut d_nat = Tensor::zeros(natural.shape().to_vec());
    let mut d_adv = Tensor::zeros(natural.shape().to_vec());
    let (mut p, mut logp) = (vec![T::zero(); c], vec![T::zero(); c]);
    let (mut q, mut logq) = (vec![T::zero(); c], vec![T::zero(); c]);
    let mut g = vec![T::zero(); c];
    for i in 0..n {
        log_softmax_into(natural.row(i), T::one(), &mut p, &mut logp);
        log_softmax_into(adversarial.row(i), T::one(), &mut q, &mut logq);
        let mut kl = T::zero();
        for k in 0..c {
            g[k] = logp[k] - logq[k];
            kl += p[k] * g[k];
        }
        values.push(kl);
        let dn = d_nat.row_mut(i);
        for k in 0..c {
            dn[k] = p[k] * (g[k] - kl);
        }
        let da = d_adv.row_mut(i);
        for k in 0..c {
            da[k] = q[k] - p[k];
        }
    }
    Ok((values, d_nat, d_adv))
}

/// Per-example `KL(reference || softmax(logits))` for a fixed reference
/// distribution, with the gradient with respect to `logits`.
pub fn kl_to_reference_logits<T: Real>(
    reference: &Tensor<T>,
    logits: &Tensor<T>,
) -> Result<(Vec<T>, Tensor<T>)> {
    if reference.shape() != logits.shape() {
        return Err(Error::Shape(format!(
            "reference {:?} vs logits {:?}",
            reference.shape(),
            logits.shape()
        )));
    }
    let c = logits.row_len();
    let floor = T::from_f64(PROB_FLOOR);
    let mut values = Vec::with_capacity(logits.batch());
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let (mut q, mut logq) = (vec![T::zero(); c], vec![T::zero(); c]);
    for i in 0..logits.batch() {
        log_softmax_into(logits.row(i), T::one(), &mut q, &mut logq);
        let p = reference.row(i);
        let mut kl = T::zero();
        for k in 0..c {
            if p[k] > T::zero() {
                kl += p[k] * (p[k].max(floor).ln() - logq[k]);
            }
        }
        values.push(kl);
        let g = grad.row_mut(i);
        let mass: T = p.iter().copied().sum();
        for k in 0..c {
            g[k] = mass * q[k] - p[k];
        }
    }
    Ok((values, grad))
}
