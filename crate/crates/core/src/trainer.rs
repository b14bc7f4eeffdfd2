//! Bi-level training loop: the Main Net takes SGD steps on the weighted
//! rehearsal loss, and every `interval` steps the relation net is moved along
//! the analytic gradient of the buffer loss measured after that step.
//!
//! For one inner step `theta' = theta - eta/B * sum_j sum_k h_jk(phi) g_k(j)`
//! the chain rule gives
//!
//! ```text
//! d L_bf(theta') / d phi = -(eta / B) * sum_j sum_k G_k(j) * d h_jk / d phi,
//! G_k(j) = < mean buffer-loss gradient at theta', g_k(j) at theta >
//! ```
//!
//! with `k` ranging over the new-sample CE, buffer-sample CE and (DER++)
//! buffer-sample distillation terms. Relation-net inputs are treated as
//! constants of `phi`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{BufferBatch, BufferEntry, ReservoirBuffer};
use crate::error::{config, contract, Error, Result};
use crate::main_net::{MainNet, MainNetConfig};
use crate::objectives::{
    evaluate_inner, outer_loss_and_grad, outer_per_sample_grads, BaseLoss, ClassContext, InnerEval, PairBatch,
    PerSampleGrads,
};
use crate::optim::{adam_step, sgd_step, AdamConfig, AdamState};
use crate::rrn::{FeatureStandardizer, MergeMode, PairFeatures, RelationNet, RelationNetConfig, WeightVector};
use crate::scalar::{dot, Scalar};
use crate::stream::Task;
use crate::tensor::{Activation, Tensor};

/// Training method: a rehearsal baseline, its relational counterpart, or the
/// single-level ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Er,
    ErAce,
    #[serde(rename = "derpp")]
    DerPP,
    Rer,
    RerAce,
    Rder,
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Preset,
    Bilevel,
    Joint,
}

impl Variant {
    pub fn base(self, vanilla_base: BaseLoss) -> BaseLoss {
        match self {
            Variant::Er | Variant::Rer => BaseLoss::Er,
            Variant::ErAce | Variant::RerAce => BaseLoss::ErAce,
            Variant::DerPP | Variant::Rder => BaseLoss::DerPP,
            Variant::Vanilla => vanilla_base,
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Variant::Er | Variant::ErAce | Variant::DerPP => Mode::Preset,
            Variant::Rer | Variant::RerAce | Variant::Rder => Mode::Bilevel,
            Variant::Vanilla => Mode::Joint,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Er => "er",
            Variant::ErAce => "er_ace",
            Variant::DerPP => "derpp",
            Variant::Rer => "rer",
            Variant::RerAce => "rer_ace",
            Variant::Rder => "rder",
            Variant::Vanilla => "vanilla",
        }
    }
}

/// Length of the per-task warm-up phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IterWarm {
    Steps(usize),
    Named(WarmKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WarmKeyword {
    /// Half of the per-task iterations.
    #[default]
    Half,
    /// Presets drive the Main Net for the whole task.
    Infinite,
}

impl Default for IterWarm {
    fn default() -> Self {
        IterWarm::Named(WarmKeyword::Half)
    }
}

/// Where the mean buffer-loss gradient in `G` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradPoint {
    /// After the inner step; exact derivative of the lookahead buffer loss.
    #[default]
    ThetaNext,
    /// Before the inner step.
    ThetaCurrent,
}

fn d_eta_theta() -> f64 {
    0.03
}
fn d_eta_phi() -> f64 {
    0.001
}
fn d_wd_phi() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    50
}
fn d_hidden() -> Vec<usize> {
    vec![100, 100]
}
fn d_rrn_hidden() -> usize {
    16
}
fn d_vanilla_base() -> BaseLoss {
    BaseLoss::DerPP
}
fn d_relu() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub variant: Variant,
    #[serde(default = "d_eta_theta")]
    pub eta_theta: f64,
    #[serde(default = "d_eta_phi")]
    pub eta_phi: f64,
    #[serde(default = "d_wd_phi")]
    pub weight_decay_phi: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs_per_task: usize,
    #[serde(default)]
    pub iter_warm: IterWarm,
    /// Steps between relation-net updates; `epochs_per_task / 10` when absent.
    #[serde(default)]
    pub interval: Option<usize>,
    #[serde(default)]
    pub preset_weights: Option<Vec<f64>>,
    /// Fraction of the buffer reserved for the outer batch.
    #[serde(default)]
    pub split_buffer: Option<f64>,
    #[serde(default = "d_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "d_relu")]
    pub hidden_activation: Activation,
    #[serde(default = "d_rrn_hidden")]
    pub rrn_hidden: usize,
    #[serde(default)]
    pub rrn_merge: MergeMode,
    #[serde(default = "d_relu")]
    pub rrn_activation: Activation,
    #[serde(default)]
    pub standardize_features: bool,
    #[serde(default)]
    pub grad_point: GradPoint,
    #[serde(default = "d_vanilla_base")]
    pub vanilla_base: BaseLoss,
}

/// Per-task step counts resolved from a config and the task size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub iters_per_task: usize,
    /// Steps `< iter_warm` use presets; `usize::MAX` means the whole task.
    pub iter_warm: usize,
    pub interval: usize,
}

impl TrainerConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            eta_theta: d_eta_theta(),
            eta_phi: d_eta_phi(),
            weight_decay_phi: d_wd_phi(),
            batch_size: d_batch(),
            epochs_per_task: d_epochs(),
            iter_warm: IterWarm::default(),
            interval: None,
            preset_weights: None,
            split_buffer: None,
            hidden_layers: d_hidden(),
            hidden_activation: Activation::Relu,
            rrn_hidden: d_rrn_hidden(),
            rrn_merge: MergeMode::Concat,
            rrn_activation: Activation::Relu,
            standardize_features: false,
            grad_point: GradPoint::ThetaNext,
            vanilla_base: d_vanilla_base(),
        }
    }

    pub fn base(&self) -> BaseLoss {
        self.variant.base(self.vanilla_base)
    }

    pub fn presets(&self) -> Vec<f64> {
        self.preset_weights.clone().unwrap_or_else(|| match self.base() {
            BaseLoss::DerPP => vec![1.0, 0.5, 0.2],
            _ => vec![1.0, 0.5],
        })
    }

    pub fn rrn_config(&self) -> RelationNetConfig {
        RelationNetConfig {
            hidden: self.rrn_hidden,
            outputs: self.base().num_weights(),
            merge: self.rrn_merge,
            activation: self.rrn_activation,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.eta_phi,
            weight_decay: self.weight_decay_phi,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v >= 0.0;
        if !positive(self.eta_theta) || !positive(self.eta_phi) || !positive(self.weight_decay_phi) {
            return config("learning rates and weight decay must be finite and non-negative");
        }
        if self.batch_size == 0 || self.epochs_per_task == 0 {
            return config("batch_size and epochs_per_task must be at least 1");
        }
        if self.interval == Some(0) {
            return config("interval must be at least 1");
        }
        let p = self.presets();
        if p.len() != self.base().num_weights() {
            return config(format!(
                "{:?} takes {} preset weights, got {}",
                self.base(),
                self.base().num_weights(),
                p.len()
            ));
        }
        if p.iter().any(|v| !positive(*v)) {
            return config("preset weights must be finite and non-negative");
        }
        if let Some(f) = self.split_buffer {
            if !(f > 0.0 && f < 1.0) {
                return config("split_buffer must lie in (0, 1)");
            }
        }
        if self.rrn_hidden == 0 {
            return config("rrn_hidden must be at least 1");
        }
        Ok(())
    }

    /// Number of batches per epoch for a task with `train_len` samples.
    pub fn batches_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, train_len: usize) -> Result<Schedule> {
        if train_len == 0 {
            return config("task has no training data");
        }
        let iters = self.epochs_per_task * self.batches_per_epoch(train_len);
        let iter_warm = match self.iter_warm {
            IterWarm::Named(WarmKeyword::Half) => iters / 2,
            IterWarm::Named(WarmKeyword::Infinite) => usize::MAX,
            IterWarm::Steps(s) if s > iters => {
                return config(format!("iter_warm {s} exceeds the {iters} iterations per task"))
            }
            IterWarm::Steps(s) => s,
        };
        let interval = self.interval.unwrap_or((self.epochs_per_task / 10).max(1));
        Ok(Schedule {
            iters_per_task: iters,
            iter_warm,
            interval,
        })
    }
}

/// Preset weight vectors for a batch of `n` pairs.
pub fn preset_batch<S: Scalar>(n: usize, w: &[f64]) -> Vec<WeightVector<S>> {
    vec![WeightVector::from_f64(w); n]
}

/// One SGD step of the weighted inner loss.
pub fn inner_step<S: Scalar>(
    net: &MainNet<S>,
    weights: &[WeightVector<S>],
    pairs: &PairBatch<S>,
    base: BaseLoss,
    classes: &ClassContext,
    eta_theta: f64,
) -> Result<MainNet<S>> {
    let ev = evaluate_inner(net, pairs, base, classes)?;
    apply_inner(net, &ev, weights, eta_theta)
}

fn apply_inner<S: Scalar>(net: &MainNet<S>, ev: &InnerEval<S>, weights: &[WeightVector<S>], eta: f64) -> Result<MainNet<S>> {
    let grad = ev.gradient(net, weights)?;
    let mut next = net.clone();
    sgd_step(next.params_mut().values_mut(), &grad, S::lit(eta))?;
    Ok(next)
}

/// Inner step driven by relation-net weights, remembering everything the
/// meta-gradient needs.
#[derive(Debug, Clone)]
pub struct InnerStep<S> {
    pub theta_next: MainNet<S>,
    pub weights: Vec<WeightVector<S>>,
    pub eta_theta: f64,
    eval: InnerEval<S>,
    rrn_inputs: Vec<PairFeatures<S>>,
    theta_fp: u64,
    next_fp: u64,
    phi_fp: u64,
}

impl<S: Scalar> InnerStep<S> {
    /// `rrn_inputs` are the (possibly standardized) features fed to `rrn`.
    pub fn from_eval(
        net: &MainNet<S>,
        rrn: &RelationNet<S>,
        eval: InnerEval<S>,
        rrn_inputs: Vec<PairFeatures<S>>,
        eta_theta: f64,
    ) -> Result<Self> {
        if eval.theta_fingerprint() != net.params().fingerprint() {
            return contract("inner evaluation was computed at different Main Net parameters");
        }
        if !eval.has_buffer() {
            return contract("relational step needs a buffer side");
        }
        let weights = rrn.batch_weights(&rrn_inputs)?;
        let theta_next = apply_inner(net, &eval, &weights, eta_theta)?;
        Ok(Self {
            next_fp: theta_next.params().fingerprint(),
            theta_fp: net.params().fingerprint(),
            phi_fp: rrn.params().fingerprint(),
            theta_next,
            weights,
            eta_theta,
            eval,
            rrn_inputs,
        })
    }

    pub fn eval(&self) -> &InnerEval<S> {
        &self.eval
    }

    pub fn rrn_inputs(&self) -> &[PairFeatures<S>] {
        &self.rrn_inputs
    }
}

/// Evaluates the pairs at `net`, weights them with `rrn` and steps.
pub fn relational_step<S: Scalar>(
    net: &MainNet<S>,
    rrn: &RelationNet<S>,
    pairs: &PairBatch<S>,
    base: BaseLoss,
    classes: &ClassContext,
    eta_theta: f64,
    standardizer: Option<&FeatureStandardizer>,
) -> Result<InnerStep<S>> {
    let eval = evaluate_inner(net, pairs, base, classes)?;
    let feats = standardize(eval.features().ok_or(Error::EmptyBuffer)?, standardizer);
    InnerStep::from_eval(net, rrn, eval, feats, eta_theta)
}

fn standardize<S: Scalar>(feats: Vec<PairFeatures<S>>, st: Option<&FeatureStandardizer>) -> Vec<PairFeatures<S>> {
    match st {
        Some(s) => feats.iter().map(|f| s.apply(f)).collect(),
        None => feats,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient<S> {
    pub grad_phi: Vec<S>,
    /// `G(j)` per pair: `[G_D, G_M]` or `[G_D, G_M, G_KD]`.
    pub coefficients: Vec<Vec<S>>,
    /// Buffer loss at the evaluation point.
    pub outer_loss: S,
}

/// `G_k(j) = <gbar, g_k(j)>`.
pub fn flat_coefficients<S: Scalar>(gbar: &[S], tr: &PerSampleGrads<S>) -> Vec<Vec<S>> {
    (0..tr.new_ce.len())
        .map(|j| {
            let mut g = vec![dot(gbar, &tr.new_ce[j]), dot(gbar, &tr.buf_ce[j])];
            if let Some(kd) = &tr.buf_kd {
                g.push(dot(gbar, &kd[j]));
            }
            g
        })
        .collect()
}

/// Same coefficients with the buffer-batch gradients first summed per
/// class: `G_k(j) = 1/|bf| * sum_c < sum_{i: y_i = c} g_i, g_k(j) >`.
pub fn grouped_coefficients<S: Scalar>(bf_grads: &[Vec<S>], bf_labels: &[usize], tr: &PerSampleGrads<S>) -> Vec<Vec<S>> {
    let mut classes: Vec<usize> = bf_labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let dim = bf_grads.first().map_or(0, Vec::len);
    let sums: Vec<Vec<S>> = classes
        .iter()
        .map(|&c| {
            let mut s = vec![S::zero(); dim];
            for (g, _) in bf_grads.iter().zip(bf_labels).filter(|(_, &y)| y == c) {
                for (a, b) in s.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            s
        })
        .collect();
    let n = S::from_count(bf_grads.len());
    let coef = |g: &[S]| sums.iter().map(|s| dot(s, g)).sum::<S>() / n;
    (0..tr.new_ce.len())
        .map(|j| {
            let mut g = vec![coef(&tr.new_ce[j]), coef(&tr.buf_ce[j])];
            if let Some(kd) = &tr.buf_kd {
                g.push(coef(&kd[j]));
            }
            g
        })
        .collect()
}

/// `-(eta / B) * sum_j sum_k G_k(j) * J_j[k, :]`.
pub fn assemble_meta_gradient<S: Scalar>(coefficients: &[Vec<S>], jacobians: &[Tensor<S>], eta_theta: f64) -> Result<Vec<S>> {
    if coefficients.len() != jacobians.len() || coefficients.is_empty() {
        return contract("one coefficient vector and one Jacobian per pair required");
    }
    let len = jacobians[0].cols();
    let mut out = vec![S::zero(); len];
    for (g, jac) in coefficients.iter().zip(jacobians) {
        if jac.rows() != g.len() || jac.cols() != len {
            return contract("Jacobian shape does not match coefficients");
        }
        for (k, gk) in g.iter().enumerate() {
            for (o, j) in out.iter_mut().zip(jac.row(k)) {
                *o = *o + *gk * *j;
            }
        }
    }
    let scale = -S::lit(eta_theta) / S::from_count(coefficients.len());
    for o in &mut out {
        *o = *o * scale;
    }
    Ok(out)
}

/// Analytic gradient of the buffer loss after `step` w.r.t. the relation-net parameters.
pub fn meta_gradient<S: Scalar>(
    theta_k: &MainNet<S>,
    step: &InnerStep<S>,
    rrn: &RelationNet<S>,
    batch_bf: &BufferBatch<S>,
    classes: &ClassContext,
    point: GradPoint,
) -> Result<MetaGradient<S>> {
    if theta_k.params().fingerprint() != step.theta_fp
        || step.theta_next.params().fingerprint() != step.next_fp
        || rrn.params().fingerprint() != step.phi_fp
    {
        return contract("inner step was not produced from these Main Net / relation net parameters");
    }
    let at = match point {
        GradPoint::ThetaNext => &step.theta_next,
        GradPoint::ThetaCurrent => theta_k,
    };
    let (outer, gbar) = outer_loss_and_grad(at, batch_bf, step.eval.base(), classes)?;
    let coefficients = step.eval.per_sample_dots(theta_k, &gbar)?;
    let jacobians = step
        .rrn_inputs
        .iter()
        .map(|f| rrn.param_jacobian(f))
        .collect::<Result<Vec<_>>>()?;
    let grad_phi = assemble_meta_gradient(&coefficients, &jacobians, step.eta_theta)?;
    if !crate::scalar::all_finite(&grad_phi) {
        return Err(Error::Numeric("non-finite meta-gradient".into()));
    }
    Ok(MetaGradient {
        grad_phi,
        coefficients,
        outer_loss: outer.total,
    })
}

/// Class-grouped coefficients for the same step, for cross-checking.
pub fn meta_coefficients_grouped<S: Scalar>(
    theta_k: &MainNet<S>,
    step: &InnerStep<S>,
    batch_bf: &BufferBatch<S>,
    classes: &ClassContext,
    point: GradPoint,
) -> Result<Vec<Vec<S>>> {
    let at = match point {
        GradPoint::ThetaNext => &step.theta_next,
        GradPoint::ThetaCurrent => theta_k,
    };
    let bf = outer_per_sample_grads(at, batch_bf, step.eval.base(), classes)?;
    let tr = step.eval.per_sample_grads(theta_k)?;
    Ok(grouped_coefficients(&bf, &batch_bf.labels, &tr))
}

/// `phi -= Adam(grad)`.
pub fn outer_step<S: Scalar>(
    rrn: &mut RelationNet<S>,
    meta: &MetaGradient<S>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    adam_step(state, rrn.params_mut().values_mut(), &meta.grad_phi, cfg)
}

/// Joint gradients of `L_tr(theta, h(phi)) + L_bf(theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaGrads<S> {
    pub theta: Vec<S>,
    pub phi: Vec<S>,
    pub weights: Vec<WeightVector<S>>,
    pub inner_loss: S,
    pub outer_loss: S,
}

/// Gradients for the single-level ablation. `phi` only enters through the
/// weights of the inner loss, so the buffer loss contributes to `theta` alone.
pub fn vanilla_gradients<S: Scalar>(
    net: &MainNet<S>,
    rrn: &RelationNet<S>,
    rrn_inputs: &[PairFeatures<S>],
    eval: &InnerEval<S>,
    batch_bf: &BufferBatch<S>,
    classes: &ClassContext,
) -> Result<VanillaGrads<S>> {
    if eval.theta_fingerprint() != net.params().fingerprint() {
        return contract("inner evaluation was computed at different Main Net parameters");
    }
    let weights = rrn.batch_weights(rrn_inputs)?;
    let inner = eval.breakdown(&weights)?;
    let mut theta = eval.gradient(net, &weights)?;
    let (outer, gbar) = outer_loss_and_grad(net, batch_bf, eval.base(), classes)?;
    for (a, b) in theta.iter_mut().zip(&gbar) {
        *a = *a + *b;
    }
    // unweighted per-pair terms: weight k multiplies term k
    let unit = eval.unweighted_terms();
    let mut phi = vec![S::zero(); rrn.params().len()];
    let b = S::from_count(rrn_inputs.len());
    for (f, u) in rrn_inputs.iter().zip(&unit) {
        let jac = rrn.param_jacobian(f)?;
        for (k, uk) in u.iter().enumerate() {
            for (p, j) in phi.iter_mut().zip(jac.row(k)) {
                *p = *p + *uk * *j / b;
            }
        }
    }
    Ok(VanillaGrads {
        theta,
        phi,
        weights,
        inner_loss: inner.total,
        outer_loss: outer.total,
    })
}

/// Single simultaneous update of both nets with the joint gradient.
#[allow(clippy::too_many_arguments)]
pub fn vanilla_step<S: Scalar>(
    net: &mut MainNet<S>,
    rrn: &mut RelationNet<S>,
    state: &mut AdamState<S>,
    pairs: &PairBatch<S>,
    batch_bf: &BufferBatch<S>,
    base: BaseLoss,
    classes: &ClassContext,
    cfg: &TrainerConfig,
) -> Result<VanillaGrads<S>> {
    let eval = evaluate_inner(net, pairs, base, classes)?;
    let feats = eval.features().ok_or(Error::EmptyBuffer)?;
    let g = vanilla_gradients(net, rrn, &feats, &eval, batch_bf, classes)?;
    sgd_step(net.params_mut().values_mut(), &g.theta, S::lit(cfg.eta_theta))?;
    adam_step(state, rrn.params_mut().values_mut(), &g.phi, &cfg.adam())?;
    Ok(g)
}

/// Which weights drove the Main Net at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Preset,
    Rrn,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub task: usize,
    pub inner_loss: f64,
    pub outer_loss: Option<f64>,
    pub mean_lambda_new: f64,
    pub mean_lambda_buf: f64,
    pub mean_gamma_buf: Option<f64>,
    pub mean_g_new: Option<f64>,
    pub mean_g_buf: Option<f64>,
    pub weights: WeightSource,
}

impl StepRecord {
    /// Whether the relation net was updated at this step.
    pub fn phi_updated(&self) -> bool {
        self.outer_loss.is_some()
    }
}

/// Counters for one `train_task` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TaskReport {
    pub schedule: Schedule,
    pub iterations: usize,
    /// Steps taken with an empty buffer (no replay, no relation-net use).
    pub skipped: usize,
    pub phi_updates: usize,
}

fn mix(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG seeds derived from one master seed. Keeping them apart
/// lets a relational run consume meta-batches without perturbing the data
/// order or the reservoir.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    pub main_init: u64,
    pub rrn_init: u64,
    pub data: u64,
    pub meta: u64,
    pub buffer: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            main_init: mix(seed, 1),
            rrn_init: mix(seed, 2),
            data: mix(seed, 3),
            meta: mix(seed, 4),
            buffer: mix(seed, 5),
        }
    }
}

fn mean_of<S: Scalar>(it: impl Iterator<Item = S>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v.as_f64();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Full learner state: Main Net, relation net, optimizer, buffer and RNGs.
#[derive(Debug, Clone)]
pub struct Learner<S> {
    cfg: TrainerConfig,
    net: MainNet<S>,
    rrn: Option<RelationNet<S>>,
    adam: Option<AdamState<S>>,
    standardizer: Option<FeatureStandardizer>,
    buffer: ReservoirBuffer<S>,
    data_rng: ChaCha8Rng,
    meta_rng: ChaCha8Rng,
    step: u64,
    epochs_done: u64,
    trace: Vec<StepRecord>,
}

impl<S: Scalar> Learner<S> {
    pub fn new(cfg: TrainerConfig, input_dim: usize, total_classes: usize, buffer_capacity: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let seeds = SeedStreams::new(seed);
        let net = MainNet::new(
            &MainNetConfig {
                input_dim,
                hidden: cfg.hidden_layers.clone(),
                total_classes,
                hidden_activation: cfg.hidden_activation,
            },
            &mut ChaCha8Rng::seed_from_u64(seeds.main_init),
        )?;
        let (rrn, adam) = if cfg.variant.mode() == Mode::Preset {
            (None, None)
        } else {
            let r = RelationNet::new(cfg.rrn_config(), &mut ChaCha8Rng::seed_from_u64(seeds.rrn_init))?;
            let a = AdamState::new(r.params().len());
            (Some(r), Some(a))
        };
        Ok(Self {
            standardizer: cfg.standardize_features.then(FeatureStandardizer::default),
            net,
            rrn,
            adam,
            buffer: ReservoirBuffer::new(buffer_capacity, seeds.buffer),
            data_rng: ChaCha8Rng::seed_from_u64(seeds.data),
            meta_rng: ChaCha8Rng::seed_from_u64(seeds.meta),
            step: 0,
            epochs_done: 0,
            trace: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn net(&self) -> &MainNet<S> {
        &self.net
    }

    pub fn rrn(&self) -> Option<&RelationNet<S>> {
        self.rrn.as_ref()
    }

    pub fn buffer(&self) -> &ReservoirBuffer<S> {
        &self.buffer
    }

    /// Steps recorded so far, including a partially trained task after an error.
    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<StepRecord> {
        std::mem::take(&mut self.trace)
    }

    /// Trains on one task of the stream and records one trace row per step.
    pub fn train_task(&mut self, task: &Task<S>) -> Result<TaskReport> {
        self.train_task_observed(task, |_, _| {})
    }

    /// Like [`Learner::train_task`], calling `observe(step_in_task, net)` after
    /// every Main Net update.
    pub fn train_task_observed(&mut self, task: &Task<S>, mut observe: impl FnMut(usize, &MainNet<S>)) -> Result<TaskReport> {
        let n = task.train_y.len();
        let schedule = self.cfg.schedule(n)?;
        let base = self.cfg.base();
        let mode = self.cfg.variant.mode();
        let presets = self.cfg.presets();
        let ctx = ClassContext::new(task.classes.clone(), self.net.seen_classes());
        self.net.observe_classes(&task.classes)?;
        let bsz = self.cfg.batch_size;

        let mut k = 0usize;
        let mut eligible = 0usize;
        let mut skipped = 0usize;
        let mut phi_updates = 0usize;
        for epoch in 0..self.cfg.epochs_per_task {
            let views = match self.cfg.split_buffer {
                Some(f) => self.buffer.split_partition(f, self.epochs_done).ok(),
                None => None,
            };
            self.epochs_done += 1;
            let mut order: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut self.data_rng);
            for chunk in order.chunks(bsz) {
                let new_x = task.train_x.gather_rows(chunk);
                let new_y: Vec<usize> = chunk.iter().map(|&i| task.train_y[i]).collect();
                let buf_batch = if self.buffer.is_empty() {
                    None
                } else {
                    let idx = match &views {
                        Some((inner, _)) => self.buffer.sample_indices_in(inner, chunk.len(), &mut self.data_rng)?,
                        None => self.buffer.sample_indices(chunk.len(), &mut self.data_rng)?,
                    };
                    Some(self.buffer.gather(&idx))
                };
                let pairs = PairBatch::new(new_x.clone(), new_y.clone(), buf_batch.as_ref())?;
                let eval = evaluate_inner(&self.net, &pairs, base, &ctx)?;
                let preset_w = preset_batch::<S>(pairs.len(), &presets);
                let insert_logits = eval.new_prediction().logits.clone();

                let mut record = StepRecord {
                    step: self.step,
                    epoch,
                    task: task.id,
                    inner_loss: 0.0,
                    outer_loss: None,
                    mean_lambda_new: 0.0,
                    mean_lambda_buf: 0.0,
                    mean_gamma_buf: None,
                    mean_g_new: None,
                    mean_g_buf: None,
                    weights: WeightSource::Preset,
                };

                let next = if mode == Mode::Preset || !eval.has_buffer() {
                    if eval.has_buffer() {
                        eligible += 1;
                    } else {
                        skipped += 1;
                    }
                    record.fill_weights(&preset_w, WeightSource::Preset);
                    record.inner_loss = eval.breakdown(&preset_w)?.total.as_f64();
                    apply_inner(&self.net, &eval, &preset_w, self.cfg.eta_theta)?
                } else {
                    eligible += 1;
                    let bf = self.draw_outer(&views, buf_batch.as_ref().map(|b| b.indices.as_slice()), chunk.len())?;
                    let raw = eval.features().ok_or(Error::EmptyBuffer)?;
                    if let Some(st) = &mut self.standardizer {
                        st.update(&raw);
                    }
                    let feats = standardize(raw, self.standardizer.as_ref());
                    let rrn = self.rrn.as_mut().expect("relational modes own a relation net");
                    let adam = self.adam.as_mut().expect("relational modes own an optimizer state");
                    match mode {
                        Mode::Joint => {
                            let g = vanilla_gradients(&self.net, rrn, &feats, &eval, &bf, &ctx)?;
                            let mut next = self.net.clone();
                            sgd_step(next.params_mut().values_mut(), &g.theta, S::lit(self.cfg.eta_theta))?;
                            adam_step(adam, rrn.params_mut().values_mut(), &g.phi, &self.cfg.adam())?;
                            phi_updates += 1;
                            record.fill_weights(&g.weights, WeightSource::Rrn);
                            record.inner_loss = g.inner_loss.as_f64();
                            record.outer_loss = Some(g.outer_loss.as_f64());
                            next
                        }
                        _ => {
                            let warm = k < schedule.iter_warm;
                            let due = eligible % schedule.interval == 0;
                            let step = if !warm || due {
                                Some(InnerStep::from_eval(&self.net, rrn, eval.clone(), feats, self.cfg.eta_theta)?)
                            } else {
                                None
                            };
                            let next = match (&step, warm) {
                                (Some(st), false) => {
                                    record.fill_weights(&st.weights, WeightSource::Rrn);
                                    record.inner_loss = eval.breakdown(&st.weights)?.total.as_f64();
                                    st.theta_next.clone()
                                }
                                _ => {
                                    record.fill_weights(&preset_w, WeightSource::Preset);
                                    record.inner_loss = eval.breakdown(&preset_w)?.total.as_f64();
                                    apply_inner(&self.net, &eval, &preset_w, self.cfg.eta_theta)?
                                }
                            };
                            if let (Some(st), true) = (&step, due) {
                                let meta = meta_gradient(&self.net, st, rrn, &bf, &ctx, self.cfg.grad_point)?;
                                outer_step(rrn, &meta, adam, &self.cfg.adam())?;
                                phi_updates += 1;
                                record.outer_loss = Some(meta.outer_loss.as_f64());
                                record.mean_g_new = Some(mean_of(meta.coefficients.iter().map(|g| g[0])));
                                record.mean_g_buf = Some(mean_of(meta.coefficients.iter().map(|g| g[1])));
                            }
                            next
                        }
                    }
                };
                if !record.inner_loss.is_finite() || !next.params().values().iter().all(|v| v.is_finite()) {
                    self.trace.push(record);
                    return Err(Error::Numeric(format!(
                        "non-finite loss or parameters at step {} (task {}, epoch {epoch})",
                        self.step, task.id
                    )));
                }
                self.net = next;
                for (r, (&i, &y)) in chunk.iter().zip(&new_y).enumerate() {
                    self.buffer.insert(BufferEntry {
                        input: task.train_x.row(i).to_vec(),
                        label: y,
                        stored_logits: insert_logits.row(r).to_vec(),
                        task_id: task.id,
                    });
                }
                self.trace.push(record);
                observe(k, &self.net);
                self.step += 1;
                k += 1;
            }
        }
        Ok(TaskReport {
            schedule,
            iterations: k,
            skipped,
            phi_updates,
        })
    }

    fn draw_outer(&mut self, views: &Option<(Vec<usize>, Vec<usize>)>, avoid: Option<&[usize]>, b: usize) -> Result<BufferBatch<S>> {
        let view = views.as_ref().map(|(_, outer)| outer.as_slice());
        let idx = self
            .buffer
            .sample_indices_distinct(view, b, avoid.unwrap_or(&[]), &mut self.meta_rng)?;
        Ok(self.buffer.gather(&idx))
    }

    /// Relation-net weights the current parameters assign to the given pairs.
    pub fn relation_weights(&self, pairs: &PairBatch<S>, classes: &ClassContext) -> Result<Option<Vec<WeightVector<S>>>> {
        let Some(rrn) = &self.rrn else { return Ok(None) };
        let eval = evaluate_inner(&self.net, pairs, self.cfg.base(), classes)?;
        let feats = standardize(eval.features().ok_or(Error::EmptyBuffer)?, self.standardizer.as_ref());
        Ok(Some(rrn.batch_weights(&feats)?))
    }
}

impl StepRecord {
    fn fill_weights<S: Scalar>(&mut self, w: &[WeightVector<S>], source: WeightSource) {
        self.mean_lambda_new = mean_of(w.iter().map(|v| v.lambda_new()));
        self.mean_lambda_buf = mean_of(w.iter().map(|v| v.lambda_buf()));
        self.mean_gamma_buf = w.first().and_then(|v| v.gamma_buf()).map(|_| mean_of(w.iter().filter_map(|v| v.gamma_buf())));
        self.weights = source;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::ClassSet;
    use crate::objectives::outer_loss;
    use rand::Rng;

    struct Fixture {
        net: MainNet<f64>,
        rrn: RelationNet<f64>,
        pairs: PairBatch<f64>,
        bf: BufferBatch<f64>,
        ctx: ClassContext,
        base: BaseLoss,
    }

    fn fixture(seed: u64, base: BaseLoss, b: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = MainNet::new(
            &MainNetConfig {
                input_dim: 4,
                hidden: vec![8],
                total_classes: 4,
                hidden_activation: Activation::Relu,
            },
            &mut rng,
        )
        .unwrap();
        let ctx = ClassContext::new(ClassSet::new(vec![2, 3]), &ClassSet::new(vec![0, 1]));
        net.observe_classes(&ctx.seen).unwrap();
        let rrn = RelationNet::new(RelationNetConfig::new(base.num_weights()), &mut rng).unwrap();
        let rows = |n: usize, rng: &mut ChaCha8Rng| {
            Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
        };
        let batch = |rng: &mut ChaCha8Rng| BufferBatch {
            indices: (0..b).collect(),
            inputs: rows(b, rng),
            labels: (0..b).map(|_| rng.random_range(0..2)).collect(),
            stored_logits: Tensor::new(vec![b, 4], (0..b * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        };
        let mb = batch(&mut rng);
        let bf = batch(&mut rng);
        let new_x = rows(b, &mut rng);
        let new_y = (0..b).map(|_| rng.random_range(2..4)).collect();
        let pairs = PairBatch::new(new_x, new_y, Some(&mb)).unwrap();
        Fixture {
            net,
            rrn,
            pairs,
            bf,
            ctx,
            base,
        }
    }

    fn lookahead_outer(fx: &Fixture, rrn: &RelationNet<f64>, feats: &[PairFeatures<f64>], eta: f64) -> f64 {
        let w = rrn.batch_weights(feats).unwrap();
        let next = inner_step(&fx.net, &w, &fx.pairs, fx.base, &fx.ctx, eta).unwrap();
        outer_loss(&next, &fx.bf, fx.base, &fx.ctx).unwrap().total
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        for (seed, base) in [(1, BaseLoss::Er), (2, BaseLoss::ErAce), (3, BaseLoss::DerPP)] {
            let fx = fixture(seed, base, 4);
            let eta = 0.5;
            let step = relational_step(&fx.net, &fx.rrn, &fx.pairs, base, &fx.ctx, eta, None).unwrap();
            let meta = meta_gradient(&fx.net, &step, &fx.rrn, &fx.bf, &fx.ctx, GradPoint::ThetaNext).unwrap();
            let feats = step.rrn_inputs().to_vec();
            let h = 1e-5;
            let num: Vec<f64> = (0..fx.rrn.params().len())
                .map(|i| {
                    let mut a = fx.rrn.clone();
                    a.params_mut().values_mut()[i] += h;
                    let mut b = fx.rrn.clone();
                    b.params_mut().values_mut()[i] -= h;
                    (lookahead_outer(&fx, &a, &feats, eta) - lookahead_outer(&fx, &b, &feats, eta)) / (2.0 * h)
                })
                .collect();
            let diff = crate::scalar::l2_norm(&meta.grad_phi.iter().zip(&num).map(|(a, b)| a - b).collect::<Vec<_>>());
            let rel = diff / crate::scalar::l2_norm(&num).max(1e-300);
            assert!(rel <= 1e-5, "{base:?}: relative error {rel}");
        }
    }

    #[test]
    fn grouped_coefficients_equal_flat() {
        let fx = fixture(4, BaseLoss::DerPP, 6);
        let step = relational_step(&fx.net, &fx.rrn, &fx.pairs, fx.base, &fx.ctx, 0.1, None).unwrap();
        let meta = meta_gradient(&fx.net, &step, &fx.rrn, &fx.bf, &fx.ctx, GradPoint::ThetaNext).unwrap();
        let grouped = meta_coefficients_grouped(&fx.net, &step, &fx.bf, &fx.ctx, GradPoint::ThetaNext).unwrap();
        for (a, b) in meta.coefficients.iter().zip(&grouped) {
            assert_eq!(a.len(), 3);
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn stale_provenance_is_rejected() {
        let fx = fixture(5, BaseLoss::Er, 3);
        let step = relational_step(&fx.net, &fx.rrn, &fx.pairs, fx.base, &fx.ctx, 0.1, None).unwrap();
        let mut other = fx.net.clone();
        other.params_mut().values_mut()[0] += 1.0;
        assert!(matches!(
            meta_gradient(&other, &step, &fx.rrn, &fx.bf, &fx.ctx, GradPoint::ThetaNext),
            Err(Error::Contract(_))
        ));
        let mut rrn2 = fx.rrn.clone();
        rrn2.params_mut().values_mut()[0] += 1.0;
        assert!(matches!(
            meta_gradient(&fx.net, &step, &rrn2, &fx.bf, &fx.ctx, GradPoint::ThetaNext),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_lr_inner_step_is_identity() {
        let fx = fixture(6, BaseLoss::Er, 3);
        let w = preset_batch(3, &[1.0, 0.5]);
        let next = inner_step(&fx.net, &w, &fx.pairs, fx.base, &fx.ctx, 0.0).unwrap();
        assert_eq!(next.params().values(), fx.net.params().values());
    }

    #[test]
    fn saturated_buffer_batch_gives_zero_meta_gradient() {
        let mut fx = fixture(7, BaseLoss::Er, 3);
        // push every buffer sample's logit for class 0 far above the rest
        let last = fx.net.params().layout().len() - 1;
        let (w, b) = fx.net.params().layer_ranges(last);
        for v in &mut fx.net.params_mut().values_mut()[w] {
            *v = 0.0;
        }
        fx.net.params_mut().values_mut()[b.start] = 100.0;
        fx.bf.labels = vec![0; 3];
        let step = relational_step(&fx.net, &fx.rrn, &fx.pairs, fx.base, &fx.ctx, 0.01, None).unwrap();
        let meta = meta_gradient(&fx.net, &step, &fx.rrn, &fx.bf, &fx.ctx, GradPoint::ThetaNext).unwrap();
        assert!(meta.grad_phi.iter().all(|g| g.abs() < 1e-30));
    }

    #[test]
    fn zero_meta_gradient_without_decay_leaves_phi() {
        let fx = fixture(8, BaseLoss::Er, 2);
        let mut rrn = fx.rrn.clone();
        let meta = MetaGradient {
            grad_phi: vec![0.0; rrn.params().len()],
            coefficients: vec![],
            outer_loss: 0.0,
        };
        let mut st = AdamState::new(rrn.params().len());
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        outer_step(&mut rrn, &meta, &mut st, &cfg).unwrap();
        assert_eq!(rrn.params().values(), fx.rrn.params().values());
    }

    #[test]
    fn vanilla_gradients_match_finite_differences() {
        for (seed, base) in [(9, BaseLoss::Er), (10, BaseLoss::DerPP)] {
            let fx = fixture(seed, base, 3);
            let eval = evaluate_inner(&fx.net, &fx.pairs, base, &fx.ctx).unwrap();
            let feats = eval.features().unwrap();
            let g = vanilla_gradients(&fx.net, &fx.rrn, &feats, &eval, &fx.bf, &fx.ctx).unwrap();
            let joint = |net: &MainNet<f64>, rrn: &RelationNet<f64>| {
                let w = rrn.batch_weights(&feats).unwrap();
                crate::objectives::weighted_inner_loss(net, &fx.pairs, &w, base, &fx.ctx).unwrap().total
                    + outer_loss(net, &fx.bf, base, &fx.ctx).unwrap().total
            };
            let h = 1e-5;
            let check = |analytic: &[f64], num: Vec<f64>| {
                let d = crate::scalar::l2_norm(&analytic.iter().zip(&num).map(|(a, b)| a - b).collect::<Vec<_>>());
                d / crate::scalar::l2_norm(&num)
            };
            let num_phi: Vec<f64> = (0..fx.rrn.params().len())
                .map(|i| {
                    let mut a = fx.rrn.clone();
                    a.params_mut().values_mut()[i] += h;
                    let mut b = fx.rrn.clone();
                    b.params_mut().values_mut()[i] -= h;
                    (joint(&fx.net, &a) - joint(&fx.net, &b)) / (2.0 * h)
                })
                .collect();
            let num_theta: Vec<f64> = (0..fx.net.params().len())
                .map(|i| {
                    let mut a = fx.net.clone();
                    a.params_mut().values_mut()[i] += h;
                    let mut b = fx.net.clone();
                    b.params_mut().values_mut()[i] -= h;
                    (joint(&a, &fx.rrn) - joint(&b, &fx.rrn)) / (2.0 * h)
                })
                .collect();
            assert!(check(&g.phi, num_phi) <= 1e-6);
            assert!(check(&g.theta, num_theta) <= 1e-6);
        }
    }

    #[test]
    fn schedule_defaults() {
        let cfg = TrainerConfig::new(Variant::Rer);
        let s = cfg.schedule(320).unwrap();
        assert_eq!(s.iters_per_task, 500);
        assert_eq!(s.iter_warm, 250);
        assert_eq!(s.interval, 5);
        let mut c2 = cfg.clone();
        c2.iter_warm = IterWarm::Steps(501);
        assert!(c2.schedule(320).is_err());
        c2.iter_warm = IterWarm::Named(WarmKeyword::Infinite);
        assert_eq!(c2.schedule(320).unwrap().iter_warm, usize::MAX);
        c2.interval = Some(0);
        assert!(c2.validate().is_err());
        let parsed: TrainerConfig = serde_json::from_str(r#"{"variant":"rder","iter_warm":"infinite"}"#).unwrap();
        assert_eq!(parsed.presets(), vec![1.0, 0.5, 0.2]);
        assert_eq!(parsed.iter_warm, IterWarm::Named(WarmKeyword::Infinite));
        let n: TrainerConfig = serde_json::from_str(r#"{"variant":"rer","iter_warm":7}"#).unwrap();
        assert_eq!(n.iter_warm, IterWarm::Steps(7));
        assert!(serde_json::from_str::<TrainerConfig>(r#"{"variant":"rer","lr":1}"#).is_err());
    }
}
