//! Semantic losses (cross entropy, Lovász-softmax) and the weighted total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, BackwardCtx, DenseArray, Tape, Var};
use crate::error::{Error, Result};
use crate::offset::{loss_dir, loss_reg, OffsetTargets};
use crate::scalar::Real;

/// Weight of the auxiliary offset losses.
pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA }
    }
}

fn check_labels(shape: &[usize], labels: &[usize], op: &'static str) -> Result<usize> {
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(op, shape, &[labels.len()]));
    }
    let c = shape[1];
    if let Some(&l) = labels.iter().find(|l| **l >= c) {
        return Err(Error::LabelOutOfRange { label: l, classes: c });
    }
    Ok(c)
}

struct ScaledGrad<T: Real> {
    grad: Vec<T>,
}

impl<T: Real> Backward<T> for ScaledGrad<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>> {
        let g = ctx.grad.data()[0];
        let data = self.grad.iter().map(|v| *v * g).collect();
        vec![Some(DenseArray::new(ctx.inputs[0].shape().to_vec(), data).unwrap())]
    }
}

/// Mean cross entropy and its gradient with respect to the logits.
pub fn cross_entropy_kernel<T: Real>(logits: &[T], classes: usize, labels: &[usize]) -> (T, Vec<T>) {
    let n = labels.len();
    let mut grad = vec![T::zero(); logits.len()];
    if n == 0 {
        return (T::zero(), grad);
    }
    let inv = T::one() / T::count(n);
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|s| (*s - max).exp()).sum();
        total = total + max + sum.ln() - row[label];
        for k in 0..classes {
            let p = (row[k] - max).exp() / sum;
            let onehot = if k == label { T::one() } else { T::zero() };
            grad[i * classes + k] = (p - onehot) * inv;
        }
    }
    (total * inv, grad)
}

/// Mean softmax cross entropy of `[N, C]` logits.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let c = check_labels(tape.shape(logits), labels, "cross_entropy")?;
    let (value, grad) = cross_entropy_kernel(tape.value(logits).data(), c, labels);
    Ok(tape.custom(&[logits], DenseArray::scalar(value), Box::new(ScaledGrad { grad })))
}

/// Lovász extension of the Jaccard loss over `[N, C]` probabilities,
/// averaged over the classes present in `labels`. Returns the value and
/// the gradient with respect to the probabilities.
pub fn lovasz_kernel<T: Real>(probs: &[T], classes: usize, labels: &[usize]) -> (T, Vec<T>) {
    let n = labels.len();
    let mut grad = vec![T::zero(); probs.len()];
    let present: Vec<usize> = (0..classes).filter(|k| labels.contains(k)).collect();
    if present.is_empty() {
        return (T::zero(), grad);
    }
    let scale = T::one() / T::count(present.len());
    let mut total = T::zero();
    for &k in &present {
        let fg: Vec<bool> = labels.iter().map(|l| *l == k).collect();
        let errors: Vec<T> = (0..n)
            .map(|i| {
                let p = probs[i * classes + k];
                if fg[i] {
                    T::one() - p
                } else {
                    p
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap_or(std::cmp::Ordering::Equal));
        let gts = fg.iter().filter(|f| **f).count();
        let (mut cum_fg, mut cum_bg) = (0usize, 0usize);
        let mut prev = T::zero();
        for &i in &order {
            if fg[i] {
                cum_fg += 1;
            } else {
                cum_bg += 1;
            }
            let inter = T::count(gts - cum_fg);
            let union = T::count(gts + cum_bg);
            let jac = T::one() - inter / union;
            let g = jac - prev;
            prev = jac;
            total = total + errors[i] * g * scale;
            let de = if fg[i] { -T::one() } else { T::one() };
            grad[i * classes + k] = de * g * scale;
        }
    }
    (total, grad)
}

/// Lovász-softmax on `[N, C]` probabilities.
pub fn lovasz_on_probs<T: Real>(tape: &mut Tape<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let c = check_labels(tape.shape(probs), labels, "lovasz_softmax")?;
    let (value, grad) = lovasz_kernel(tape.value(probs).data(), c, labels);
    Ok(tape.custom(&[probs], DenseArray::scalar(value), Box::new(ScaledGrad { grad })))
}

/// Lovász-softmax of `[N, C]` logits.
pub fn lovasz_softmax<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape.shape(logits), labels, "lovasz_softmax")?;
    let probs = tape.softmax_lastdim(logits);
    lovasz_on_probs(tape, probs, labels)
}

/// `CE + Lovász` on one set of logits.
pub fn semantic_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let ce = cross_entropy(tape, logits, labels)?;
    let lv = lovasz_softmax(tape, logits, labels)?;
    tape.add(ce, lv)
}

/// `L_reg + L_dir`.
pub fn auxiliary_loss<T: Real>(tape: &mut Tape<T>, offsets: Var, targets: &OffsetTargets<T>) -> Result<Var> {
    let reg = loss_reg(tape, offsets, targets)?;
    let dir = loss_dir(tape, offsets, targets)?;
    tape.add(reg, dir)
}

/// Scalar parts of a total loss, kept for reporting.
#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub total: Var,
    pub semantic: Var,
    pub auxiliary: Option<Var>,
}

/// `L_sem + alpha * (L_reg + L_dir)`; without offsets the loss is `L_sem`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    offsets: Option<(Var, &OffsetTargets<T>)>,
    weights: LossWeights,
) -> Result<TotalLoss> {
    let semantic = semantic_loss(tape, logits, labels)?;
    let Some((o, targets)) = offsets else {
        return Ok(TotalLoss {
            total: semantic,
            semantic,
            auxiliary: None,
        });
    };
    let aux = auxiliary_loss(tape, o, targets)?;
    let weighted = tape.mul_scalar(aux, T::lit(weights.alpha));
    let total = tape.add(semantic, weighted)?;
    Ok(TotalLoss {
        total,
        semantic,
        auxiliary: Some(aux),
    })
}
