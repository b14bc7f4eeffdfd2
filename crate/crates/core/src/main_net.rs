//! The Main Net: an MLP classifier with a logit head pre-allocated for every
//! class of the stream. Losses and argmax are always restricted to a class
//! set, so unseen slots never influence training or evaluation.

use rand::Rng;

use crate::classes::ClassSet;
use crate::error::{config, contract, Result};
use crate::loss::{restricted_ce, SampleLoss};
use crate::scalar::{l2_norm, Scalar};
use crate::tensor::{
    dense_backward_per_sample, dense_forward, Activation, ForwardCache, Init, LayerSpec, ParamVector, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct MainNetConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Logit slots for the full stream.
    pub total_classes: usize,
    pub hidden_activation: Activation,
}

impl MainNetConfig {
    pub fn layout(&self) -> Result<Vec<LayerSpec>> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.total_classes);
        let n = dims.len() - 1;
        dims.windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == n { Activation::Identity } else { self.hidden_activation };
                LayerSpec::new(w[0], w[1], act)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MainNet<S> {
    params: ParamVector<S>,
    seen: ClassSet,
}

impl<S: Scalar> MainNet<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &MainNetConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            params: ParamVector::init(cfg.layout()?, Init::Default, rng),
            seen: ClassSet::default(),
        })
    }

    pub fn from_params(params: ParamVector<S>, seen: ClassSet) -> Result<Self> {
        let Some(last) = params.layout().last() else {
            return config("main net needs at least one layer");
        };
        if seen.max_id().is_some_and(|m| m >= last.out_dim) {
            return config("seen classes exceed logit slots");
        }
        Ok(Self { params, seen })
    }

    pub fn params(&self) -> &ParamVector<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector<S> {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params.layout()[0].in_dim
    }

    pub fn total_classes(&self) -> usize {
        self.params.layout().last().map_or(0, |l| l.out_dim)
    }

    pub fn seen_classes(&self) -> &ClassSet {
        &self.seen
    }

    /// Adds newly encountered classes to the seen set.
    pub fn observe_classes(&mut self, classes: &ClassSet) -> Result<()> {
        if classes.max_id().is_some_and(|m| m >= self.total_classes()) {
            return config("class id exceeds logit slots");
        }
        self.seen = self.seen.union(classes);
        Ok(())
    }

    /// Forward pass that also returns the cache needed for backward.
    pub fn forward(&self, batch: &Tensor<S>) -> Result<(Prediction<S>, ForwardCache<S>)> {
        let cache = dense_forward(&self.params, batch)?;
        let pred = Prediction::from_logits(cache.output().clone(), &self.seen);
        Ok((pred, cache))
    }

    pub fn predict(&self, batch: &Tensor<S>) -> Result<Prediction<S>> {
        Ok(self.forward(batch)?.0)
    }
}

/// Logits of a batch and the L2 norm of each row over the seen-class slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<S> {
    pub logits: Tensor<S>,
    pub logit_l2_norms: Vec<S>,
}

impl<S: Scalar> Prediction<S> {
    pub fn from_logits(logits: Tensor<S>, seen: &ClassSet) -> Self {
        let logit_l2_norms = (0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let sel: Vec<S> = seen.ids().iter().map(|&c| row[c]).collect();
                l2_norm(&sel)
            })
            .collect();
        Self { logits, logit_l2_norms }
    }

    pub fn rows(&self) -> usize {
        self.logits.rows()
    }
}

fn check_labels(rows: usize, labels: &[usize]) -> Result<()> {
    if rows != labels.len() {
        return contract(format!("{} labels for {} rows", labels.len(), rows));
    }
    Ok(())
}

/// Per-sample cross-entropy with the softmax restricted to `classes`.
pub fn cross_entropy<S: Scalar>(pred: &Prediction<S>, labels: &[usize], classes: &ClassSet) -> Result<Vec<S>> {
    check_labels(pred.rows(), labels)?;
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| Ok(restricted_ce(pred.logits.row(r), y, classes)?.0))
        .collect()
}

/// Per-sample gradients of the restricted cross-entropy w.r.t. the Main Net parameters.
pub fn ce_gradient<S: Scalar>(
    net: &MainNet<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    classes: &ClassSet,
) -> Result<Vec<Vec<S>>> {
    check_labels(batch.rows(), labels)?;
    let (pred, cache) = net.forward(batch)?;
    let mut up = Tensor::zeros(vec![pred.rows(), net.total_classes()]);
    for (r, &y) in labels.iter().enumerate() {
        let loss = SampleLoss::CrossEntropy { label: y, classes };
        let (_, dz) = loss.value_and_grad(pred.logits.row(r))?;
        up.row_mut(r).copy_from_slice(&dz);
    }
    dense_backward_per_sample(net.params(), &cache, &up)
}

/// Index of the largest logit among `classes`; ties go to the smallest id.
pub fn argmax_in<S: Scalar>(row: &[S], classes: &ClassSet) -> usize {
    let mut best = classes.ids()[0];
    for &c in &classes.ids()[1..] {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Fraction of rows whose restricted argmax equals the label. Task-IL passes
/// the task's class set, Class-IL the full seen set.
pub fn masked_accuracy<S: Scalar>(pred: &Prediction<S>, labels: &[usize], classes: &ClassSet) -> Result<f64> {
    check_labels(pred.rows(), labels)?;
    if labels.is_empty() {
        return contract("accuracy of an empty batch is undefined");
    }
    if classes.is_empty() {
        return contract("accuracy needs a non-empty class set");
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax_in(pred.logits.row(*r), classes) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn task_masked_accuracy<S: Scalar>(
    net: &MainNet<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    task_classes: &ClassSet,
) -> Result<f64> {
    if batch.rows() == 0 {
        return contract("accuracy of an empty batch is undefined");
    }
    masked_accuracy(&net.predict(batch)?, labels, task_classes)
}
