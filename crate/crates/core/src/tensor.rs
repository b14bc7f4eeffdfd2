//! Dense numerics shared by the Main Net and the Relation Replay Net.
//!
//! A network is a chain of [`LayerSpec`]s whose parameters live in one flat
//! [`ParamVector`]: for every layer the `out_dim x in_dim` weight matrix
//! (row-major) followed by the `out_dim` bias vector. Keeping every parameter
//! in one buffer makes dot products between gradient vectors trivial, which
//! the meta-gradient relies on.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::scalar::{all_finite, Scalar};

/// Dense row-major array with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return config(format!(
                "tensor shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        if !all_finite(&data) {
            return Err(Error::Numeric("tensor contains non-finite values".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    /// Builds a `[rows, cols]` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return config("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// Matrix with `rows` rows and no content, used for absent batches.
    pub fn empty(cols: usize) -> Self {
        Self {
            shape: vec![0, cols],
            data: Vec::new(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// New matrix holding the listed rows in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Stacks two matrices with the same column count.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols() != other.cols() {
            return config("vstack column mismatch");
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            shape: vec![self.rows() + other.rows(), self.cols()],
            data,
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        if all_finite(&self.data) {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite tensor value".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(S::zero()),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output value.
    #[inline]
    pub fn derivative_from_output<S: Scalar>(self, y: S) -> S {
        match self {
            Activation::Identity => S::one(),
            Activation::Relu => {
                if y > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Sigmoid => y * (S::one() - y),
        }
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return config("layer dimensions must be >= 1");
        }
        Ok(Self {
            in_dim,
            out_dim,
            activation,
        })
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Weight matrix and bias of one layer, detached from the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    /// `[out_dim, in_dim]`.
    pub weights: Tensor<S>,
    pub bias: Vec<S>,
}

/// Flat parameter buffer plus the layer layout that gives it meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<S> {
    layout: Vec<LayerSpec>,
    values: Vec<S>,
}

/// Weight initialization for [`ParamVector::init`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zeros,
    /// He uniform for relu layers, Xavier uniform otherwise; biases zero.
    Default,
}

impl<S: Scalar> ParamVector<S> {
    pub fn zeros(layout: Vec<LayerSpec>) -> Self {
        let n = layout.iter().map(LayerSpec::num_params).sum();
        Self {
            layout,
            values: vec![S::zero(); n],
        }
    }

    pub fn from_values(layout: Vec<LayerSpec>, values: Vec<S>) -> Result<Self> {
        let n: usize = layout.iter().map(LayerSpec::num_params).sum();
        if n != values.len() {
            return config(format!("layout needs {n} parameters, got {}", values.len()));
        }
        Ok(Self { layout, values })
    }

    pub fn init<R: Rng + ?Sized>(layout: Vec<LayerSpec>, init: Init, rng: &mut R) -> Self {
        let mut p = Self::zeros(layout);
        if init == Init::Zeros {
            return p;
        }
        for l in 0..p.layout.len() {
            let spec = p.layout[l];
            let limit = match spec.activation {
                Activation::Relu => (6.0 / spec.in_dim as f64).sqrt(),
                _ => (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt(),
            };
            let (w, _) = p.layer_ranges(l);
            for v in &mut p.values[w] {
                *v = S::lit(rng.random_range(-limit..limit));
            }
        }
        p
    }

    pub fn layout(&self) -> &[LayerSpec] {
        &self.layout
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index ranges of layer `l`'s weights and biases inside the flat vector.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.layout[..l].iter().map(LayerSpec::num_params).sum();
        let spec = self.layout[l];
        let w_end = start + spec.in_dim * spec.out_dim;
        (start..w_end, w_end..w_end + spec.out_dim)
    }

    pub fn weights(&self, l: usize) -> &[S] {
        let (w, _) = self.layer_ranges(l);
        &self.values[w]
    }

    pub fn bias(&self, l: usize) -> &[S] {
        let (_, b) = self.layer_ranges(l);
        &self.values[b]
    }

    pub fn unflatten(&self) -> Vec<LayerParams<S>> {
        (0..self.layout.len())
            .map(|l| {
                let spec = self.layout[l];
                LayerParams {
                    weights: Tensor {
                        shape: vec![spec.out_dim, spec.in_dim],
                        data: self.weights(l).to_vec(),
                    },
                    bias: self.bias(l).to_vec(),
                }
            })
            .collect()
    }

    pub fn flatten(layout: Vec<LayerSpec>, layers: &[LayerParams<S>]) -> Result<Self> {
        if layout.len() != layers.len() {
            return config("layer count mismatch");
        }
        let mut values = Vec::with_capacity(layout.iter().map(LayerSpec::num_params).sum());
        for (spec, lp) in layout.iter().zip(layers) {
            if lp.weights.shape() != [spec.out_dim, spec.in_dim] || lp.bias.len() != spec.out_dim {
                return config("layer parameter shape does not match layout");
            }
            values.extend_from_slice(lp.weights.data());
            values.extend_from_slice(&lp.bias);
        }
        Ok(Self { layout, values })
    }

    /// Hash of layout and exact parameter bits, used to detect stale caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.layout.hash(&mut h);
        for v in &self.values {
            v.as_f64().to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn check_chain(&self) -> Result<()> {
        if self.layout.is_empty() {
            return config("network has no layers");
        }
        for pair in self.layout.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return config(format!(
                    "layer out_dim {} does not feed next in_dim {}",
                    pair[0].out_dim, pair[1].in_dim
                ));
            }
        }
        Ok(())
    }
}

/// `out[r, o] = act(b[o] + sum_i x[r, i] * w[o, i])` for a single layer.
pub(crate) fn affine<S: Scalar>(
    x: &[S],
    rows: usize,
    in_dim: usize,
    w: &[S],
    b: &[S],
    act: Activation,
) -> Vec<S> {
    let out_dim = b.len();
    let mut out = Vec::with_capacity(rows * out_dim);
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for (xi, wi) in xr.iter().zip(wr) {
                acc = acc + *xi * *wi;
            }
            out.push(act.apply(acc));
        }
    }
    out
}

/// Activations retained by [`dense_forward`] for an exact backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    fingerprint: u64,
    /// `activations[0]` is the input batch, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Tensor<S>>,
}

impl<S: Scalar> ForwardCache<S> {
    pub fn output(&self) -> &Tensor<S> {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &Tensor<S> {
        &self.activations[0]
    }

    pub fn rows(&self) -> usize {
        self.activations[0].rows()
    }
}

pub fn dense_forward<S: Scalar>(params: &ParamVector<S>, batch: &Tensor<S>) -> Result<ForwardCache<S>> {
    params.check_chain()?;
    if batch.shape().len() != 2 || batch.cols() != params.layout[0].in_dim {
        return config(format!(
            "batch shape {:?} does not match input dim {}",
            batch.shape(),
            params.layout[0].in_dim
        ));
    }
    let rows = batch.rows();
    let mut activations = Vec::with_capacity(params.layout.len() + 1);
    activations.push(batch.clone());
    for (l, spec) in params.layout.iter().enumerate() {
        let x = activations[l].data();
        let out = affine(x, rows, spec.in_dim, params.weights(l), params.bias(l), spec.activation);
        if !all_finite(&out) {
            return Err(Error::Numeric(format!("non-finite activation in layer {l}")));
        }
        activations.push(Tensor {
            shape: vec![rows, spec.out_dim],
            data: out,
        });
    }
    Ok(ForwardCache {
        fingerprint: params.fingerprint(),
        activations,
    })
}

/// Parameter gradient and gradient with respect to the input batch.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub params: Vec<S>,
    pub input: Tensor<S>,
}

/// Pre-activation error signals of every layer, last layer first is index `L-1`.
fn layer_deltas<S: Scalar>(
    params: &ParamVector<S>,
    cache: &ForwardCache<S>,
    upstream: &Tensor<S>,
) -> Result<Vec<Vec<S>>> {
    if cache.fingerprint != params.fingerprint() || cache.activations.len() != params.layout.len() + 1 {
        return Err(Error::Usage(
            "forward cache does not belong to these parameters".into(),
        ));
    }
    let out = cache.output();
    if upstream.shape() != out.shape() {
        return config(format!(
            "upstream gradient shape {:?} != output shape {:?}",
            upstream.shape(),
            out.shape()
        ));
    }
    upstream.check_finite()?;
    let rows = cache.rows();
    let n_layers = params.layout.len();
    let mut deltas: Vec<Vec<S>> = vec![Vec::new(); n_layers];

    let last = params.layout[n_layers - 1];
    deltas[n_layers - 1] = upstream
        .data()
        .iter()
        .zip(out.data())
        .map(|(g, y)| *g * last.activation.derivative_from_output(*y))
        .collect();

    for l in (1..n_layers).rev() {
        let spec = params.layout[l];
        let prev = params.layout[l - 1];
        let w = params.weights(l);
        let a_prev = cache.activations[l].data();
        let mut d_prev = vec![S::zero(); rows * spec.in_dim];
        {
            let d = &deltas[l];
            for r in 0..rows {
                let dr = &d[r * spec.out_dim..(r + 1) * spec.out_dim];
                let out_row = &mut d_prev[r * spec.in_dim..(r + 1) * spec.in_dim];
                for (o, &dv) in dr.iter().enumerate() {
                    if dv == S::zero() {
                        continue;
                    }
                    let wr = &w[o * spec.in_dim..(o + 1) * spec.in_dim];
                    for (acc, wi) in out_row.iter_mut().zip(wr) {
                        *acc = *acc + dv * *wi;
                    }
                }
            }
        }
        for (dv, a) in d_prev.iter_mut().zip(a_prev) {
            *dv = *dv * prev.activation.derivative_from_output(*a);
        }
        deltas[l - 1] = d_prev;
    }
    Ok(deltas)
}

/// Backpropagates `upstream` (gradient w.r.t. the network output) through a
/// cached forward pass. The parameter gradient is summed over batch rows.
pub fn dense_backward<S: Scalar>(
    params: &ParamVector<S>,
    cache: &ForwardCache<S>,
    upstream: &Tensor<S>,
) -> Result<Gradients<S>> {
    let deltas = layer_deltas(params, cache, upstream)?;
    let rows = cache.rows();
    let mut grad = vec![S::zero(); params.len()];
    for (l, spec) in params.layout.iter().enumerate() {
        let (wr, br) = params.layer_ranges(l);
        let a = cache.activations[l].data();
        let d = &deltas[l];
        let gw = &mut grad[wr];
        for r in 0..rows {
            let ar = &a[r * spec.in_dim..(r + 1) * spec.in_dim];
            let dr = &d[r * spec.out_dim..(r + 1) * spec.out_dim];
            for (o, &dv) in dr.iter().enumerate() {
                if dv == S::zero() {
                    continue;
                }
                let g_row = &mut gw[o * spec.in_dim..(o + 1) * spec.in_dim];
                for (g, ai) in g_row.iter_mut().zip(ar) {
                    *g = *g + dv * *ai;
                }
            }
        }
        let gb = &mut grad[br];
        for r in 0..rows {
            for (g, dv) in gb.iter_mut().zip(&d[r * spec.out_dim..(r + 1) * spec.out_dim]) {
                *g = *g + *dv;
            }
        }
    }

    let first = params.layout[0];
    let w = params.weights(0);
    let mut input = vec![S::zero(); rows * first.in_dim];
    for r in 0..rows {
        let dr = &deltas[0][r * first.out_dim..(r + 1) * first.out_dim];
        let out_row = &mut input[r * first.in_dim..(r + 1) * first.in_dim];
        for (o, &dv) in dr.iter().enumerate() {
            let wr = &w[o * first.in_dim..(o + 1) * first.in_dim];
            for (acc, wi) in out_row.iter_mut().zip(wr) {
                *acc = *acc + dv * *wi;
            }
        }
    }
    Ok(Gradients {
        params: grad,
        input: Tensor {
            shape: vec![rows, first.in_dim],
            data: input,
        },
    })
}

/// Like [`dense_backward`] but returns one parameter gradient per batch row
/// instead of their sum.
pub fn dense_backward_per_sample<S: Scalar>(
    params: &ParamVector<S>,
    cache: &ForwardCache<S>,
    upstream: &Tensor<S>,
) -> Result<Vec<Vec<S>>> {
    let deltas = layer_deltas(params, cache, upstream)?;
    let rows = cache.rows();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut grad = vec![S::zero(); params.len()];
        for (l, spec) in params.layout.iter().enumerate() {
            let (wr, br) = params.layer_ranges(l);
            let ar = cache.activations[l].row(r);
            let dr = &deltas[l][r * spec.out_dim..(r + 1) * spec.out_dim];
            let gw = &mut grad[wr];
            for (o, &dv) in dr.iter().enumerate() {
                if dv == S::zero() {
                    continue;
                }
                let g_row = &mut gw[o * spec.in_dim..(o + 1) * spec.in_dim];
                for (g, ai) in g_row.iter_mut().zip(ar) {
                    *g = dv * *ai;
                }
            }
            grad[br].copy_from_slice(dr);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `<v, g_r>` for every row's parameter gradient `g_r`, without
/// materializing the per-row gradients.
pub fn dense_backward_per_sample_dot<S: Scalar>(
    params: &ParamVector<S>,
    cache: &ForwardCache<S>,
    upstream: &Tensor<S>,
    v: &[S],
) -> Result<Vec<S>> {
    if v.len() != params.len() {
        return config(format!("dot vector has length {}, parameters {}", v.len(), params.len()));
    }
    let deltas = layer_deltas(params, cache, upstream)?;
    let rows = cache.rows();
    let mut out = vec![S::zero(); rows];
    for (r, o_r) in out.iter_mut().enumerate() {
        let mut acc = S::zero();
        for (l, spec) in params.layout.iter().enumerate() {
            let (wr, br) = params.layer_ranges(l);
            let ar = cache.activations[l].row(r);
            let dr = &deltas[l][r * spec.out_dim..(r + 1) * spec.out_dim];
            let vw = &v[wr];
            let vb = &v[br];
            for (o, &dv) in dr.iter().enumerate() {
                if dv == S::zero() {
                    continue;
                }
                let row = &vw[o * spec.in_dim..(o + 1) * spec.in_dim];
                let s: S = row.iter().zip(ar).map(|(a, b)| *a * *b).sum();
                acc = acc + dv * (s + vb[o]);
            }
        }
        *o_r = acc;
    }
    Ok(out)
}

/// Gradient of a per-sample loss on a single-row `sample`.
pub fn per_sample_gradient<S: Scalar>(
    params: &ParamVector<S>,
    sample: &Tensor<S>,
    loss: &crate::loss::SampleLoss<'_, S>,
) -> Result<Vec<S>> {
    if sample.rows() != 1 {
        return config("per_sample_gradient expects a single-row sample");
    }
    let cache = dense_forward(params, sample)?;
    let (_, dz) = loss.value_and_grad(cache.output().row(0))?;
    let up = Tensor::new(vec![1, dz.len()], dz)?;
    Ok(dense_backward(params, &cache, &up)?.params)
}
