//! Per-sample losses on a logit row, each with its gradient w.r.t. the logits.

use crate::classes::ClassSet;
use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

/// Loss of one sample given its logit row.
#[derive(Debug, Clone, Copy)]
pub enum SampleLoss<'a, S> {
    /// `-log softmax_classes(z)_label`; slots outside `classes` are ignored.
    CrossEntropy { label: usize, classes: &'a ClassSet },
    /// Mean squared difference to `target` over `slots`.
    LogitMse { target: &'a [S], slots: &'a ClassSet },
}

impl<S: Scalar> SampleLoss<'_, S> {
    pub fn value_and_grad(&self, logits: &[S]) -> Result<(S, Vec<S>)> {
        match *self {
            SampleLoss::CrossEntropy { label, classes } => restricted_ce(logits, label, classes),
            SampleLoss::LogitMse { target, slots } => logit_mse(logits, target, slots),
        }
    }
}

/// Cross-entropy with the softmax restricted to `classes`, computed with
/// max-subtraction.
pub fn restricted_ce<S: Scalar>(logits: &[S], label: usize, classes: &ClassSet) -> Result<(S, Vec<S>)> {
    if !classes.contains(label) {
        return contract(format!("label {label} outside class set {:?}", classes.ids()));
    }
    if let Some(m) = classes.max_id() {
        if m >= logits.len() {
            return contract(format!("class id {m} exceeds {} logit slots", logits.len()));
        }
    }
    let zmax = classes
        .ids()
        .iter()
        .map(|&c| logits[c])
        .fold(S::neg_infinity(), S::max);
    let mut denom = S::zero();
    for &c in classes.ids() {
        denom = denom + (logits[c] - zmax).exp();
    }
    let log_denom = denom.ln();
    let loss = log_denom - (logits[label] - zmax);
    let mut grad = vec![S::zero(); logits.len()];
    for &c in classes.ids() {
        grad[c] = (logits[c] - zmax).exp() / denom;
    }
    grad[label] = grad[label] - S::one();
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite cross-entropy".into()));
    }
    // Clamp tiny negative rounding so losses stay >= 0.
    Ok((loss.max(S::zero()), grad))
}

pub fn logit_mse<S: Scalar>(logits: &[S], target: &[S], slots: &ClassSet) -> Result<(S, Vec<S>)> {
    if target.len() != logits.len() {
        return contract(format!(
            "stored logits have {} slots, current logits {}",
            target.len(),
            logits.len()
        ));
    }
    if slots.is_empty() {
        return contract("distillation needs at least one slot");
    }
    let n = S::from_count(slots.len());
    let two = S::lit(2.0);
    let mut grad = vec![S::zero(); logits.len()];
    let mut acc = S::zero();
    for &c in slots.ids() {
        let d = logits[c] - target[c];
        acc = acc + d * d;
        grad[c] = two * d / n;
    }
    Ok((acc / n, grad))
}
