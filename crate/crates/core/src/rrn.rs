//! The Relation Replay Net: maps the losses and logit norms of a
//! (new-task sample, buffer sample) pair to bounded loss weights.
//!
//! Architecture: one `2 -> hidden` relu branch on the pair's losses, one on
//! its logit norms, and a sigmoid merge layer over the concatenated (or
//! summed) branch outputs producing 2 weights (ER, ER-ACE) or 3 (DER++).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::main_net::Prediction;
use crate::scalar::Scalar;
use crate::tensor::{affine, sigmoid, Activation, Init, LayerSpec, ParamVector, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    #[default]
    Concat,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationNetConfig {
    pub hidden: usize,
    pub outputs: usize,
    pub merge: MergeMode,
    pub activation: Activation,
}

impl RelationNetConfig {
    pub fn new(outputs: usize) -> Self {
        Self {
            hidden: 16,
            outputs,
            merge: MergeMode::Concat,
            activation: Activation::Relu,
        }
    }

    fn merge_in(&self) -> usize {
        match self.merge {
            MergeMode::Concat => 2 * self.hidden,
            MergeMode::Sum => self.hidden,
        }
    }

    pub fn layout(&self) -> Result<Vec<LayerSpec>> {
        if !(2..=3).contains(&self.outputs) {
            return config("relation net produces 2 or 3 weights");
        }
        Ok(vec![
            LayerSpec::new(2, self.hidden, self.activation)?,
            LayerSpec::new(2, self.hidden, self.activation)?,
            LayerSpec::new(self.merge_in(), self.outputs, Activation::Sigmoid)?,
        ])
    }
}

/// Inputs of one pair: `[L(x^D), L(x^M)]` and `[|z^D|, |z^M|]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFeatures<S> {
    pub losses: [S; 2],
    pub norms: [S; 2],
}

impl<S: Scalar> PairFeatures<S> {
    fn validate(&self) -> Result<()> {
        let all = [self.losses[0], self.losses[1], self.norms[0], self.norms[1]];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite relation net feature".into()));
        }
        if self.norms.iter().any(|&n| n < S::zero()) {
            return contract("logit norms must be non-negative");
        }
        Ok(())
    }
}

/// `[lambda^D, lambda^M]` or `[lambda^D, lambda^M, gamma^M]`, each in (0, 1)
/// when produced by the relation net.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<S>(pub Vec<S>);

impl<S: Scalar> WeightVector<S> {
    pub fn from_f64(values: &[f64]) -> Self {
        Self(values.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn lambda_new(&self) -> S {
        self.0[0]
    }

    pub fn lambda_buf(&self) -> S {
        self.0[1]
    }

    pub fn gamma_buf(&self) -> Option<S> {
        self.0.get(2).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Keeps a saturated sigmoid strictly inside (0, 1).
fn open_unit<S: Scalar>(s: S) -> S {
    let hi = S::one() - S::epsilon() / S::lit(2.0);
    s.max(S::min_positive_value()).min(hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationNet<S> {
    cfg: RelationNetConfig,
    params: ParamVector<S>,
}

struct Hidden<S> {
    a: Vec<S>,
    b: Vec<S>,
    merged: Vec<S>,
    out: Vec<S>,
}

impl<S: Scalar> RelationNet<S> {
    pub fn new<R: Rng + ?Sized>(cfg: RelationNetConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            params: ParamVector::init(cfg.layout()?, Init::Default, rng),
            cfg,
        })
    }

    pub fn from_params(cfg: RelationNetConfig, params: ParamVector<S>) -> Result<Self> {
        if params.layout() != cfg.layout()?.as_slice() {
            return config("parameter layout does not match relation net config");
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &RelationNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamVector<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector<S> {
        &mut self.params
    }

    pub fn outputs(&self) -> usize {
        self.cfg.outputs
    }

    fn hidden(&self, f: &PairFeatures<S>) -> Hidden<S> {
        let act = self.cfg.activation;
        let p = &self.params;
        let a = affine(&f.losses, 1, 2, p.weights(0), p.bias(0), act);
        let b = affine(&f.norms, 1, 2, p.weights(1), p.bias(1), act);
        let merged: Vec<S> = match self.cfg.merge {
            MergeMode::Concat => a.iter().chain(&b).copied().collect(),
            MergeMode::Sum => a.iter().zip(&b).map(|(x, y)| *x + *y).collect(),
        };
        let out = affine(&merged, 1, self.cfg.merge_in(), p.weights(2), p.bias(2), Activation::Identity)
            .into_iter()
            .map(|z| open_unit(sigmoid(z)))
            .collect();
        Hidden { a, b, merged, out }
    }

    pub fn forward(&self, f: &PairFeatures<S>) -> Result<WeightVector<S>> {
        f.validate()?;
        Ok(WeightVector(self.hidden(f).out))
    }

    /// Jacobian of the outputs w.r.t. the flat parameters: `[outputs, |phi|]`.
    pub fn param_jacobian(&self, f: &PairFeatures<S>) -> Result<Tensor<S>> {
        f.validate()?;
        let h = self.hidden(f);
        let n_out = self.cfg.outputs;
        let hid = self.cfg.hidden;
        let m_in = self.cfg.merge_in();
        let act = self.cfg.activation;
        let p = &self.params;
        let (wa, ba) = p.layer_ranges(0);
        let (wb, bb) = p.layer_ranges(1);
        let (wm, bm) = p.layer_ranges(2);
        let merge_w = p.weights(2);
        let mut jac = Tensor::zeros(vec![n_out, p.len()]);
        for k in 0..n_out {
            let row = jac.row_mut(k);
            let s = h.out[k];
            let ds = s * (S::one() - s);
            for (i, m) in h.merged.iter().enumerate() {
                row[wm.start + k * m_in + i] = ds * *m;
            }
            row[bm.start + k] = ds;
            // back through the merge into each branch
            for j in 0..hid {
                let (wa_j, wb_j) = match self.cfg.merge {
                    MergeMode::Concat => (merge_w[k * m_in + j], merge_w[k * m_in + hid + j]),
                    MergeMode::Sum => (merge_w[k * m_in + j], merge_w[k * m_in + j]),
                };
                let da = ds * wa_j * act.derivative_from_output(h.a[j]);
                let db = ds * wb_j * act.derivative_from_output(h.b[j]);
                row[wa.start + 2 * j] = da * f.losses[0];
                row[wa.start + 2 * j + 1] = da * f.losses[1];
                row[ba.start + j] = da;
                row[wb.start + 2 * j] = db * f.norms[0];
                row[wb.start + 2 * j + 1] = db * f.norms[1];
                row[bb.start + j] = db;
            }
        }
        Ok(jac)
    }

    /// Smallest |pre-activation| over the branch units; the outputs are not
    /// differentiable in the parameters where this is zero (relu branches).
    pub fn kink_margin(&self, f: &PairFeatures<S>) -> S {
        let p = &self.params;
        let a = affine(&f.losses, 1, 2, p.weights(0), p.bias(0), Activation::Identity);
        let b = affine(&f.norms, 1, 2, p.weights(1), p.bias(1), Activation::Identity);
        a.iter().chain(&b).map(|z| z.abs()).fold(S::infinity(), S::min)
    }

    pub fn batch_weights(&self, feats: &[PairFeatures<S>]) -> Result<Vec<WeightVector<S>>> {
        feats.iter().map(|f| self.forward(f)).collect()
    }
}

/// Builds per-pair features from the two predictions and loss vectors, pairing by index.
pub fn pair_features<S: Scalar>(
    pred_new: &Prediction<S>,
    pred_buf: &Prediction<S>,
    losses_new: &[S],
    losses_buf: &[S],
) -> Result<Vec<PairFeatures<S>>> {
    let b = pred_new.rows();
    if pred_buf.rows() != b || losses_new.len() != b || losses_buf.len() != b {
        return contract(format!(
            "pair batches differ in length: new {} / buffer {} / losses {} {}",
            b,
            pred_buf.rows(),
            losses_new.len(),
            losses_buf.len()
        ));
    }
    Ok((0..b)
        .map(|i| PairFeatures {
            losses: [losses_new[i], losses_buf[i]],
            norms: [pred_new.logit_l2_norms[i], pred_buf.logit_l2_norms[i]],
        })
        .collect())
}

/// Relation-net weights for every pair of a batch.
pub fn rrn_batch_weights<S: Scalar>(
    net: &RelationNet<S>,
    pred_new: &Prediction<S>,
    pred_buf: &Prediction<S>,
    losses_new: &[S],
    losses_buf: &[S],
) -> Result<Vec<WeightVector<S>>> {
    net.batch_weights(&pair_features(pred_new, pred_buf, losses_new, losses_buf)?)
}

/// Running per-feature standardization (Welford), optional input preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStandardizer {
    count: u64,
    mean: [f64; 4],
    m2: [f64; 4],
}

impl Default for FeatureStandardizer {
    fn default() -> Self {
        Self {
            count: 0,
            mean: [0.0; 4],
            m2: [0.0; 4],
        }
    }
}

impl FeatureStandardizer {
    pub fn update<S: Scalar>(&mut self, feats: &[PairFeatures<S>]) {
        for f in feats {
            self.count += 1;
            let x = [f.losses[0], f.losses[1], f.norms[0], f.norms[1]].map(Scalar::as_f64);
            for k in 0..4 {
                let d = x[k] - self.mean[k];
                self.mean[k] += d / self.count as f64;
                self.m2[k] += d * (x[k] - self.mean[k]);
            }
        }
    }

    /// Standardized copy. Norm features are shifted to stay non-negative.
    pub fn apply<S: Scalar>(&self, f: &PairFeatures<S>) -> PairFeatures<S> {
        if self.count < 2 {
            return *f;
        }
        let std = |k: usize| (self.m2[k] / (self.count - 1) as f64).sqrt().max(1e-8);
        let z = |v: S, k: usize| S::lit((v.as_f64() - self.mean[k]) / std(k));
        PairFeatures {
            losses: [z(f.losses[0], 0), z(f.losses[1], 1)],
            norms: [
                S::lit((f.norms[0].as_f64() / std(2)).max(0.0)),
                S::lit((f.norms[1].as_f64() / std(3)).max(0.0)),
            ],
        }
    }
}
