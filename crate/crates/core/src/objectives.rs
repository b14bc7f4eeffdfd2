//! Loss assemblies for rehearsal training.
//!
//! Every inner objective has the same shape: for `B` (new sample, buffer
//! sample) pairs,
//!
//! ```text
//! L_tr = 1/B * sum_i [ wD_i * CE(xD_i) + wM_i * CE(xM_i) + gM_i * KD(xM_i) ]
//! ```
//!
//! where the per-pair weights are either fixed presets (ER, ER-ACE, DER++) or
//! produced by the relation net. ER-ACE restricts the new-sample softmax to
//! the current task's classes. KD is the mean squared error between current
//! and stored logits over the seen-class slots.

use serde::{Deserialize, Serialize};

use crate::buffer::BufferBatch;
use crate::classes::ClassSet;
use crate::error::{config, contract, Error, Result};
use crate::loss::{logit_mse, restricted_ce};
use crate::main_net::{MainNet, Prediction};
use crate::rrn::{pair_features, PairFeatures, WeightVector};
use crate::scalar::Scalar;
use crate::tensor::{dense_backward, dense_backward_per_sample, dense_backward_per_sample_dot, ForwardCache, Tensor};

/// Rehearsal loss family the weights are applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    Er,
    ErAce,
    DerPP,
}

impl BaseLoss {
    /// Number of weights per pair.
    pub fn num_weights(self) -> usize {
        match self {
            BaseLoss::Er | BaseLoss::ErAce => 2,
            BaseLoss::DerPP => 3,
        }
    }

    pub fn uses_distillation(self) -> bool {
        self == BaseLoss::DerPP
    }
}

/// Class sets in force while training the current task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassContext {
    pub current: ClassSet,
    /// All classes seen so far, including the current task's.
    pub seen: ClassSet,
}

impl ClassContext {
    pub fn new(current: ClassSet, previously_seen: &ClassSet) -> Self {
        let seen = previously_seen.union(&current);
        Self { current, seen }
    }
}

/// New-task batch paired index-wise with an equally sized buffer batch. The
/// buffer side may be empty (nothing stored yet), which zeroes its terms.
#[derive(Debug, Clone)]
pub struct PairBatch<S> {
    pub new_inputs: Tensor<S>,
    pub new_labels: Vec<usize>,
    pub buf_inputs: Tensor<S>,
    pub buf_labels: Vec<usize>,
    pub buf_logits: Option<Tensor<S>>,
}

impl<S: Scalar> PairBatch<S> {
    pub fn new(
        new_inputs: Tensor<S>,
        new_labels: Vec<usize>,
        buffer: Option<&BufferBatch<S>>,
    ) -> Result<Self> {
        let cols = new_inputs.cols();
        let pb = match buffer {
            Some(b) => Self {
                new_inputs,
                new_labels,
                buf_inputs: b.inputs.clone(),
                buf_labels: b.labels.clone(),
                buf_logits: Some(b.stored_logits.clone()),
            },
            None => Self {
                new_inputs,
                new_labels,
                buf_inputs: Tensor::empty(cols),
                buf_labels: Vec::new(),
                buf_logits: None,
            },
        };
        pb.validate()?;
        Ok(pb)
    }

    pub fn len(&self) -> usize {
        self.new_inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_buffer(&self) -> bool {
        self.buf_inputs.rows() > 0
    }

    fn validate(&self) -> Result<()> {
        if self.new_inputs.rows() != self.new_labels.len() || self.buf_inputs.rows() != self.buf_labels.len() {
            return contract("labels and inputs differ in length");
        }
        if self.is_empty() {
            return contract("pair batch is empty");
        }
        if self.has_buffer() && self.buf_inputs.rows() != self.len() {
            return contract(format!(
                "buffer batch has {} rows, new batch {}",
                self.buf_inputs.rows(),
                self.len()
            ));
        }
        if let Some(z) = &self.buf_logits {
            if z.rows() != self.buf_inputs.rows() {
                return contract("stored logits do not match buffer rows");
            }
        }
        Ok(())
    }
}

/// Weighted terms of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTerms<S> {
    pub new_ce: S,
    pub buf_ce: S,
    pub buf_kd: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<S> {
    pub total: S,
    pub per_pair: Vec<PairTerms<S>>,
    pub weights_used: Vec<WeightVector<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterLoss<S> {
    pub total: S,
    pub per_sample: Vec<S>,
}

#[derive(Debug, Clone)]
struct BufferSide<S> {
    pred: Prediction<S>,
    cache: ForwardCache<S>,
    ce: Vec<S>,
    ce_dz: Tensor<S>,
    kd: Option<(Vec<S>, Tensor<S>)>,
}

/// Unweighted per-sample losses and logit gradients of a pair batch at one
/// parameter point. Weighting, reduction and backward all start from here.
#[derive(Debug, Clone)]
pub struct InnerEval<S> {
    base: BaseLoss,
    theta_fingerprint: u64,
    pred_new: Prediction<S>,
    cache_new: ForwardCache<S>,
    new_loss: Vec<S>,
    new_dz: Tensor<S>,
    buf: Option<BufferSide<S>>,
}

/// Per-sample parameter gradients of the unweighted inner-loss terms.
#[derive(Debug, Clone)]
pub struct PerSampleGrads<S> {
    pub new_ce: Vec<Vec<S>>,
    pub buf_ce: Vec<Vec<S>>,
    pub buf_kd: Option<Vec<Vec<S>>>,
}

fn ce_rows<S: Scalar>(pred: &Prediction<S>, labels: &[usize], classes: &ClassSet) -> Result<(Vec<S>, Tensor<S>)> {
    let mut losses = Vec::with_capacity(labels.len());
    let mut dz = Tensor::zeros(vec![labels.len(), pred.logits.cols()]);
    for (r, &y) in labels.iter().enumerate() {
        let (l, g) = restricted_ce(pred.logits.row(r), y, classes)?;
        losses.push(l);
        dz.row_mut(r).copy_from_slice(&g);
    }
    Ok((losses, dz))
}

fn kd_rows<S: Scalar>(pred: &Prediction<S>, stored: &Tensor<S>, slots: &ClassSet) -> Result<(Vec<S>, Tensor<S>)> {
    if stored.rows() != pred.rows() {
        return contract("stored logits do not match batch rows");
    }
    let mut losses = Vec::with_capacity(pred.rows());
    let mut dz = Tensor::zeros(vec![pred.rows(), pred.logits.cols()]);
    for r in 0..pred.rows() {
        let (l, g) = logit_mse(pred.logits.row(r), stored.row(r), slots)?;
        losses.push(l);
        dz.row_mut(r).copy_from_slice(&g);
    }
    Ok((losses, dz))
}

fn scaled_rows<S: Scalar>(dz: &Tensor<S>, scale: impl Fn(usize) -> S) -> Tensor<S> {
    let mut out = dz.clone();
    for r in 0..out.rows() {
        let s = scale(r);
        for v in out.row_mut(r) {
            *v = *v * s;
        }
    }
    out
}

fn add_into<S: Scalar>(acc: &mut [S], g: &[S]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a = *a + *b;
    }
}

/// Forward pass and per-sample terms for a pair batch.
pub fn evaluate_inner<S: Scalar>(
    net: &MainNet<S>,
    pairs: &PairBatch<S>,
    base: BaseLoss,
    classes: &ClassContext,
) -> Result<InnerEval<S>> {
    pairs.validate()?;
    let new_classes = match base {
        BaseLoss::ErAce => &classes.current,
        BaseLoss::Er | BaseLoss::DerPP => &classes.seen,
    };
    let (pred_new, cache_new) = net.forward(&pairs.new_inputs)?;
    let (new_loss, new_dz) = ce_rows(&pred_new, &pairs.new_labels, new_classes)?;
    let buf = if pairs.has_buffer() {
        let (pred, cache) = net.forward(&pairs.buf_inputs)?;
        let (ce, ce_dz) = ce_rows(&pred, &pairs.buf_labels, &classes.seen)?;
        let kd = if base.uses_distillation() {
            let Some(stored) = &pairs.buf_logits else {
                return contract("distillation needs stored logits on buffer samples");
            };
            Some(kd_rows(&pred, stored, &classes.seen)?)
        } else {
            None
        };
        Some(BufferSide { pred, cache, ce, ce_dz, kd })
    } else {
        None
    };
    Ok(InnerEval {
        base,
        theta_fingerprint: net.params().fingerprint(),
        pred_new,
        cache_new,
        new_loss,
        new_dz,
        buf,
    })
}

impl<S: Scalar> InnerEval<S> {
    pub fn base(&self) -> BaseLoss {
        self.base
    }

    pub fn len(&self) -> usize {
        self.new_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.new_loss.is_empty()
    }

    pub fn has_buffer(&self) -> bool {
        self.buf.is_some()
    }

    pub fn theta_fingerprint(&self) -> u64 {
        self.theta_fingerprint
    }

    pub fn new_prediction(&self) -> &Prediction<S> {
        &self.pred_new
    }

    pub fn new_losses(&self) -> &[S] {
        &self.new_loss
    }

    /// Unweighted per-pair terms `[CE(xD), CE(xM)(, KD(xM))]`; buffer terms
    /// are zero without a buffer side.
    pub fn unweighted_terms(&self) -> Vec<Vec<S>> {
        (0..self.len())
            .map(|j| {
                let mut t = vec![self.new_loss[j]];
                match &self.buf {
                    Some(side) => {
                        t.push(side.ce[j]);
                        if let Some((kd, _)) = &side.kd {
                            t.push(kd[j]);
                        }
                    }
                    None => t.push(S::zero()),
                }
                if self.base.uses_distillation() && t.len() < 3 {
                    t.push(S::zero());
                }
                t
            })
            .collect()
    }

    /// Relation-net inputs (per-pair losses and logit norms); `None` without a buffer side.
    pub fn features(&self) -> Option<Vec<PairFeatures<S>>> {
        let b = self.buf.as_ref()?;
        Some(pair_features(&self.pred_new, &b.pred, &self.new_loss, &b.ce).expect("pair sides built with equal length"))
    }

    fn check_weights(&self, weights: &[WeightVector<S>]) -> Result<()> {
        if weights.len() != self.len() {
            return contract(format!("{} weight vectors for {} pairs", weights.len(), self.len()));
        }
        let k = self.base.num_weights();
        for w in weights {
            if w.len() != k {
                return contract(format!("{:?} needs {k} weights per pair, got {}", self.base, w.len()));
            }
            if w.0.iter().any(|v| !v.is_finite() || *v < S::zero()) {
                return config("loss weights must be finite and non-negative");
            }
        }
        Ok(())
    }

    /// Weighted objective value with per-pair terms.
    pub fn breakdown(&self, weights: &[WeightVector<S>]) -> Result<LossBreakdown<S>> {
        self.check_weights(weights)?;
        let b = S::from_count(self.len());
        let mut per_pair = Vec::with_capacity(self.len());
        let mut sum = S::zero();
        for (i, w) in weights.iter().enumerate() {
            let new_ce = w.lambda_new() * self.new_loss[i];
            let (buf_ce, buf_kd) = match &self.buf {
                Some(side) => (
                    w.lambda_buf() * side.ce[i],
                    match (&side.kd, w.gamma_buf()) {
                        (Some((kd, _)), Some(g)) => g * kd[i],
                        _ => S::zero(),
                    },
                ),
                None => (S::zero(), S::zero()),
            };
            sum = sum + (new_ce + buf_ce + buf_kd);
            per_pair.push(PairTerms { new_ce, buf_ce, buf_kd });
        }
        let total = sum / b;
        if !total.is_finite() {
            return Err(Error::Numeric("non-finite inner loss".into()));
        }
        Ok(LossBreakdown {
            total,
            per_pair,
            weights_used: weights.to_vec(),
        })
    }

    /// Gradient of the weighted objective w.r.t. the Main Net parameters.
    pub fn gradient(&self, net: &MainNet<S>, weights: &[WeightVector<S>]) -> Result<Vec<S>> {
        self.check_weights(weights)?;
        let b = S::from_count(self.len());
        let up_new = scaled_rows(&self.new_dz, |i| weights[i].lambda_new() / b);
        let mut grad = dense_backward(net.params(), &self.cache_new, &up_new)?.params;
        if let Some(side) = &self.buf {
            let mut up = scaled_rows(&side.ce_dz, |i| weights[i].lambda_buf() / b);
            if let Some((_, kd_dz)) = &side.kd {
                let kd_up = scaled_rows(kd_dz, |i| weights[i].gamma_buf().unwrap_or_else(S::zero) / b);
                for (a, k) in up.data_mut().iter_mut().zip(kd_up.data()) {
                    *a = *a + *k;
                }
            }
            let g = dense_backward(net.params(), &side.cache, &up)?.params;
            add_into(&mut grad, &g);
        }
        Ok(grad)
    }

    /// `<v, g_k(j)>` for every pair `j` and unweighted term `k`, laid out
    /// like [`PerSampleGrads`] but as scalars per pair.
    pub fn per_sample_dots(&self, net: &MainNet<S>, v: &[S]) -> Result<Vec<Vec<S>>> {
        let new = dense_backward_per_sample_dot(net.params(), &self.cache_new, &self.new_dz, v)?;
        let (buf, kd) = match &self.buf {
            Some(side) => (
                dense_backward_per_sample_dot(net.params(), &side.cache, &side.ce_dz, v)?,
                match &side.kd {
                    Some((_, dz)) => Some(dense_backward_per_sample_dot(net.params(), &side.cache, dz, v)?),
                    None => None,
                },
            ),
            None => (vec![S::zero(); self.len()], None),
        };
        Ok((0..self.len())
            .map(|j| {
                let mut g = vec![new[j], buf[j]];
                if let Some(k) = &kd {
                    g.push(k[j]);
                }
                g
            })
            .collect())
    }

    /// Gradients of each unweighted term, one vector per sample.
    pub fn per_sample_grads(&self, net: &MainNet<S>) -> Result<PerSampleGrads<S>> {
        let new_ce = dense_backward_per_sample(net.params(), &self.cache_new, &self.new_dz)?;
        let (buf_ce, buf_kd) = match &self.buf {
            Some(side) => (
                dense_backward_per_sample(net.params(), &side.cache, &side.ce_dz)?,
                match &side.kd {
                    Some((_, dz)) => Some(dense_backward_per_sample(net.params(), &side.cache, dz)?),
                    None => None,
                },
            ),
            None => (Vec::new(), None),
        };
        Ok(PerSampleGrads { new_ce, buf_ce, buf_kd })
    }
}

fn presets<S: Scalar>(n: usize, w: &[f64]) -> Vec<WeightVector<S>> {
    vec![WeightVector::from_f64(w); n]
}

fn check_preset(w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return config("loss weights must be finite and non-negative");
    }
    Ok(())
}

/// Experience replay: `1/B sum [lD CE(xD) + lM CE(xM)]`.
pub fn er_loss<S: Scalar>(
    net: &MainNet<S>,
    pairs: &PairBatch<S>,
    lambda_new: f64,
    lambda_buf: f64,
    classes: &ClassContext,
) -> Result<LossBreakdown<S>> {
    check_preset(&[lambda_new, lambda_buf])?;
    let ev = evaluate_inner(net, pairs, BaseLoss::Er, classes)?;
    ev.breakdown(&presets(pairs.len(), &[lambda_new, lambda_buf]))
}

/// DER++: ER terms plus `gM * KD` on the buffer samples.
pub fn derpp_loss<S: Scalar>(
    net: &MainNet<S>,
    pairs: &PairBatch<S>,
    lambda_new: f64,
    lambda_buf: f64,
    gamma_buf: f64,
    classes: &ClassContext,
) -> Result<LossBreakdown<S>> {
    check_preset(&[lambda_new, lambda_buf, gamma_buf])?;
    let ev = evaluate_inner(net, pairs, BaseLoss::DerPP, classes)?;
    ev.breakdown(&presets(pairs.len(), &[lambda_new, lambda_buf, gamma_buf]))
}

/// ER-ACE: new samples use CE over the current task's classes, buffer
/// samples CE over all seen classes.
pub fn erace_loss<S: Scalar>(
    net: &MainNet<S>,
    pairs: &PairBatch<S>,
    lambda_new: f64,
    lambda_buf: f64,
    classes: &ClassContext,
) -> Result<LossBreakdown<S>> {
    check_preset(&[lambda_new, lambda_buf])?;
    let ev = evaluate_inner(net, pairs, BaseLoss::ErAce, classes)?;
    ev.breakdown(&presets(pairs.len(), &[lambda_new, lambda_buf]))
}

/// Inner objective with one weight vector per pair.
pub fn weighted_inner_loss<S: Scalar>(
    net: &MainNet<S>,
    pairs: &PairBatch<S>,
    weights: &[WeightVector<S>],
    base: BaseLoss,
    classes: &ClassContext,
) -> Result<LossBreakdown<S>> {
    evaluate_inner(net, pairs, base, classes)?.breakdown(weights)
}

/// Per-sample outer (buffer) losses with their logit gradients.
fn outer_rows<S: Scalar>(
    net: &MainNet<S>,
    batch: &BufferBatch<S>,
    base: BaseLoss,
    classes: &ClassContext,
) -> Result<(Vec<S>, Tensor<S>, ForwardCache<S>)> {
    if batch.labels.is_empty() {
        return contract("outer loss needs a non-empty buffer batch");
    }
    let (pred, cache) = net.forward(&batch.inputs)?;
    let (mut losses, mut dz) = ce_rows(&pred, &batch.labels, &classes.seen)?;
    if base.uses_distillation() {
        let (kd, kd_dz) = kd_rows(&pred, &batch.stored_logits, &classes.seen)?;
        for (l, k) in losses.iter_mut().zip(kd) {
            *l = *l + k;
        }
        for (a, k) in dz.data_mut().iter_mut().zip(kd_dz.data()) {
            *a = *a + *k;
        }
    }
    Ok((losses, dz, cache))
}

/// Buffer loss driving the relation net: mean CE over seen classes, plus KD
/// for DER++.
pub fn outer_loss<S: Scalar>(
    net: &MainNet<S>,
    batch: &BufferBatch<S>,
    base: BaseLoss,
    classes: &ClassContext,
) -> Result<OuterLoss<S>> {
    let (per_sample, _, _) = outer_rows(net, batch, base, classes)?;
    let total = per_sample.iter().copied().sum::<S>() / S::from_count(per_sample.len());
    Ok(OuterLoss { total, per_sample })
}

/// Outer loss together with its mean gradient w.r.t. the Main Net parameters.
pub fn outer_loss_and_grad<S: Scalar>(
    net: &MainNet<S>,
    batch: &BufferBatch<S>,
    base: BaseLoss,
    classes: &ClassContext,
) -> Result<(OuterLoss<S>, Vec<S>)> {
    let (per_sample, dz, cache) = outer_rows(net, batch, base, classes)?;
    let n = S::from_count(per_sample.len());
    let up = scaled_rows(&dz, |_| S::one() / n);
    let grad = dense_backward(net.params(), &cache, &up)?.params;
    let total = per_sample.iter().copied().sum::<S>() / n;
    Ok((OuterLoss { total, per_sample }, grad))
}

/// One outer-loss gradient per buffer sample.
pub fn outer_per_sample_grads<S: Scalar>(
    net: &MainNet<S>,
    batch: &BufferBatch<S>,
    base: BaseLoss,
    classes: &ClassContext,
) -> Result<Vec<Vec<S>>> {
    let (_, dz, cache) = outer_rows(net, batch, base, classes)?;
    dense_backward_per_sample(net.params(), &cache, &dz)
}
