//! Loss, hand-derived gradients, optimizers, and the training loop.
//!
//! Gradients are reverse-mode and written out by hand in batched matrix
//! form.  For a batch `H` of hidden row vectors (one per sample) and a
//! simple residual layer `H' = H + diag(x) (H W)`:
//!
//! ```text
//! dL/dW      = H^T diag(x) G'          (G' = dL/dH')
//! dL/dHderiv = G' + diag(x) G' W^T     (skip connection + branch)
//! ```
//!
//! Activated layers insert the dropout mask and the ReLU indicator into
//! the branch term; two-channel product layers repeat the branch math
//! once per channel and have no skip term.  The readout gives
//! `dL/dR = H[N]^T dlogits` and seeds `G = dlogits R^T`, with `dlogits =
//! (softmax - onehot) / batch_size` from softmax cross-entropy.
//!
//! All of this is checked against central finite differences in the unit
//! tests below.

// The numeric kernels below walk several same-length buffers at once;
// index loops keep them aligned with the formulas above.
#![allow(clippy::needless_range_loop)]

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::Deserialize;

use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::models::{Activation, FeatureMapKind, ModelParams};
use crate::pruning::Mask;
use crate::rng::SeedTree;
use crate::scalar::Scalar;

/// Evaluation batch size (evaluation is streaming; this only bounds
/// scratch memory).
const EVAL_BATCH: usize = 200;

/// Softmax cross-entropy of one sample.
///
/// Returns the loss and its gradient with respect to the logits
/// (`softmax - onehot`).  Uses the max-shifted log-sum-exp form, so
/// well-separated logits give losses down to exactly `0` instead of
/// underflowing.
pub fn cross_entropy<S: Scalar>(logits: &Vector<S>, label: usize) -> Result<(S, Vector<S>)> {
    if label >= logits.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let ls = logits.as_slice();
    let m = ls.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let mut grad = Vector::zeros(logits.len());
    let mut z = S::zero();
    for (g, &l) in grad.as_mut_slice().iter_mut().zip(ls) {
        let e = (l - m).exp();
        *g = e;
        z += e;
    }
    let loss = z.ln() - (ls[label] - m);
    let inv_z = S::one() / z;
    for g in grad.as_mut_slice().iter_mut() {
        *g *= inv_z;
    }
    grad.as_mut_slice()[label] -= S::one();
    Ok((loss, grad))
}

/// Gradient stack congruent to a [`ModelParams`] of the same kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Gradients<S> {
    SResMps {
        layers: Vec<Matrix<S>>,
        readout_w: Matrix<S>,
        readout_b: Vector<S>,
    },
    AResMps {
        w1: Vec<Matrix<S>>,
        w2: Vec<Matrix<S>>,
        bias: Vec<Vector<S>>,
        readout_w: Matrix<S>,
        readout_b: Vector<S>,
    },
    Mps {
        t1: Vec<Matrix<S>>,
        t2: Vec<Matrix<S>>,
        readout_w: Matrix<S>,
        readout_b: Vector<S>,
    },
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(params: &ModelParams<S>) -> Self {
        let n = params.num_features();
        let chi = params.hidden_dim();
        let c = params.num_classes();
        let zm = || Matrix::zeros(chi, chi);
        match params {
            ModelParams::SResMps(_) => Gradients::SResMps {
                layers: (0..n).map(|_| zm()).collect(),
                readout_w: Matrix::zeros(chi, c),
                readout_b: Vector::zeros(c),
            },
            ModelParams::AResMps(_) => Gradients::AResMps {
                w1: (0..n).map(|_| zm()).collect(),
                w2: (0..n).map(|_| zm()).collect(),
                bias: (0..n).map(|_| Vector::zeros(chi)).collect(),
                readout_w: Matrix::zeros(chi, c),
                readout_b: Vector::zeros(c),
            },
            ModelParams::Mps(_) => Gradients::Mps {
                t1: (0..n).map(|_| zm()).collect(),
                t2: (0..n).map(|_| zm()).collect(),
                readout_w: Matrix::zeros(chi, c),
                readout_b: Vector::zeros(c),
            },
        }
    }

    /// Flat tensor views in the crate-wide pinned order (matching
    /// [`ModelParams::tensors`]).
    pub fn tensors(&self) -> Vec<&[S]> {
        let mut out: Vec<&[S]> = Vec::new();
        match self {
            Gradients::SResMps {
                layers,
                readout_w,
                readout_b,
            } => {
                for l in layers {
                    out.push(l.data());
                }
                out.push(readout_w.data());
                out.push(readout_b.as_slice());
            }
            Gradients::AResMps {
                w1,
                w2,
                bias,
                readout_w,
                readout_b,
            } => {
                for i in 0..w1.len() {
                    out.push(w1[i].data());
                    out.push(w2[i].data());
                    out.push(bias[i].as_slice());
                }
                out.push(readout_w.data());
                out.push(readout_b.as_slice());
            }
            Gradients::Mps {
                t1,
                t2,
                readout_w,
                readout_b,
            } => {
                for i in 0..t1.len() {
                    out.push(t1[i].data());
                    out.push(t2[i].data());
                }
                out.push(readout_w.data());
                out.push(readout_b.as_slice());
            }
        }
        out
    }

    /// Mutable variant of [`Gradients::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = Vec::new();
        match self {
            Gradients::SResMps {
                layers,
                readout_w,
                readout_b,
            } => {
                for l in layers {
                    out.push(l.data_mut());
                }
                out.push(readout_w.data_mut());
                out.push(readout_b.as_mut_slice());
            }
            Gradients::AResMps {
                w1,
                w2,
                bias,
                readout_w,
                readout_b,
            } => {
                // Split borrows: iterate the three stacks in lockstep.
                let n = w1.len();
                let mut w1s: Vec<&mut [S]> = w1.iter_mut().map(|m| m.data_mut()).collect();
                let mut w2s: Vec<&mut [S]> = w2.iter_mut().map(|m| m.data_mut()).collect();
                let mut bs: Vec<&mut [S]> = bias.iter_mut().map(|v| v.as_mut_slice()).collect();
                for _ in 0..n {
                    out.push(w1s.remove(0));
                    out.push(w2s.remove(0));
                    out.push(bs.remove(0));
                }
                out.push(readout_w.data_mut());
                out.push(readout_b.as_mut_slice());
            }
            Gradients::Mps {
                t1,
                t2,
                readout_w,
                readout_b,
            } => {
                let n = t1.len();
                let mut t1s: Vec<&mut [S]> = t1.iter_mut().map(|m| m.data_mut()).collect();
                let mut t2s: Vec<&mut [S]> = t2.iter_mut().map(|m| m.data_mut()).collect();
                for _ in 0..n {
                    out.push(t1s.remove(0));
                    out.push(t2s.remove(0));
                }
                out.push(readout_w.data_mut());
                out.push(readout_b.as_mut_slice());
            }
        }
        out
    }
}

/// Per-batch dropout keep masks, one `batch x chi` layer at a time.
///
/// Masks are a pure function of `(seed, epoch, batch index)`: each batch
/// draws its own stream, and within it one 32-bit draw per
/// `(layer, sample, unit)` in layer-major row-major order.  An entry is
/// kept iff its draw falls below `round((1 - rate) * 2^32)`.
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub layers: Vec<Vec<u8>>,
    pub rate: f64,
}

impl DropoutMasks {
    pub fn generate(
        seeds: &SeedTree,
        epoch: usize,
        batch_idx: usize,
        num_layers: usize,
        batch: usize,
        chi: usize,
        rate: f64,
    ) -> DropoutMasks {
        let mut rng = seeds.stream_indexed("dropout", &[epoch as u64, batch_idx as u64]);
        let keep_threshold = ((1.0 - rate) * 4294967296.0).round().min(4294967295.0) as u32;
        let per_layer = batch * chi;
        let mut draws = vec![0u32; per_layer];
        let layers = (0..num_layers)
            .map(|_| {
                rng.fill(&mut draws[..]);
                draws.iter().map(|&d| u8::from(d < keep_threshold)).collect()
            })
            .collect();
        DropoutMasks { layers, rate }
    }
}

/// Optimizer family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Dropout rate on residual branches (applies to both residual
    /// parameterizations; product-layer models never use dropout).
    pub dropout: f64,
    /// Gaussian initialization scale for fresh parameters.
    pub init_std: f64,
    pub seed: u64,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 100,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            dropout: 0.1,
            init_std: 1e-3,
            seed: 0,
            hidden_dim: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "epochs, batch_size, and hidden width must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1)")));
            }
        }
        if !(self.eps_adam > 0.0 && self.eps_adam.is_finite()) {
            return Err(Error::Config(format!(
                "eps_adam {} must be positive and finite",
                self.eps_adam
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!(
                "init std {} must be finite and non-negative",
                self.init_std
            )));
        }
        Ok(())
    }
}

/// First-order optimizer with optional Adam moment state.
#[derive(Debug, Clone)]
pub struct Optimizer<S> {
    kind: OptimizerKind,
    lr: S,
    beta1: f64,
    beta2: f64,
    eps: S,
    /// Adam first/second moments, congruent to the gradient stack.
    moments: Option<(Gradients<S>, Gradients<S>)>,
    t: u32,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            lr: S::from_f64_c(cfg.learning_rate),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: S::from_f64_c(cfg.eps_adam),
            moments: None,
            t: 0,
        }
    }

    /// Apply one update step.
    ///
    /// With a mask, masked residual entries receive no update and are
    /// forced back to exactly `0.0` afterwards, so pruned weights can
    /// never resurrect through optimizer state.
    pub fn step(
        &mut self,
        params: &mut ModelParams<S>,
        grads: &Gradients<S>,
        mask: Option<&Mask>,
    ) -> Result<()> {
        if self.moments.is_none() && self.kind == OptimizerKind::Adam {
            self.moments = Some((Gradients::zeros_like(params), Gradients::zeros_like(params)));
        }
        let mut ps = params.tensors_mut();
        let gs = grads.tensors();
        if ps.len() != gs.len() {
            return Err(Error::Consistency(
                "gradient stack does not match parameter stack".into(),
            ));
        }
        let mask_slices = mask.map(|m| m.tensors());
        // Verify mask congruence against the residual prefix of the stack.
        if let Some(ms) = &mask_slices {
            let residual = ps
                .iter()
                .filter(|(_, r)| *r == crate::models::TensorRole::Residual)
                .count();
            if ms.len() != residual {
                return Err(Error::Consistency(format!(
                    "mask has {} tensors but model has {residual} prunable tensors",
                    ms.len()
                )));
            }
        }

        match self.kind {
            OptimizerKind::Sgd => {
                let mut res_i = 0;
                for ((p, role), g) in ps.iter_mut().zip(gs.iter()) {
                    let keep = if *role == crate::models::TensorRole::Residual {
                        let k = mask_slices.as_ref().map(|ms| ms[res_i]);
                        res_i += 1;
                        k
                    } else {
                        None
                    };
                    sgd_tensor(p, g, self.lr, keep);
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = S::from_f64_c(1.0 - self.beta1.powi(self.t as i32));
                let bc2 = S::from_f64_c(1.0 - self.beta2.powi(self.t as i32));
                let b1 = S::from_f64_c(self.beta1);
                let b2 = S::from_f64_c(self.beta2);
                let (m, v) = self.moments.as_mut().expect("created above");
                let mut msl = m.tensors_mut();
                let mut vsl = v.tensors_mut();
                let mut res_i = 0;
                for (((p, role), g), (ms, vs)) in ps
                    .iter_mut()
                    .zip(gs.iter())
                    .zip(msl.iter_mut().zip(vsl.iter_mut()))
                {
                    let keep = if *role == crate::models::TensorRole::Residual {
                        let k = mask_slices.as_ref().map(|slices| slices[res_i]);
                        res_i += 1;
                        k
                    } else {
                        None
                    };
                    adam_tensor(p, g, ms, vs, self.lr, b1, b2, bc1, bc2, self.eps, keep);
                }
            }
        }
        Ok(())
    }
}

fn sgd_tensor<S: Scalar>(p: &mut [S], g: &[S], lr: S, keep: Option<&[u8]>) {
    match keep {
        None => {
            for (w, gv) in p.iter_mut().zip(g) {
                *w -= lr * *gv;
            }
        }
        Some(mask) => {
            for ((w, gv), &k) in p.iter_mut().zip(g).zip(mask) {
                if k != 0 {
                    *w -= lr * *gv;
                } else {
                    *w = S::zero();
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_tensor<S: Scalar>(
    p: &mut [S],
    g: &[S],
    m: &mut [S],
    v: &mut [S],
    lr: S,
    b1: S,
    b2: S,
    bc1: S,
    bc2: S,
    eps: S,
    keep: Option<&[u8]>,
) {
    let one = S::one();
    for i in 0..p.len() {
        if let Some(mask) = keep {
            if mask[i] == 0 {
                p[i] = S::zero();
                continue;
            }
        }
        let gv = g[i];
        m[i] = b1 * m[i] + (one - b1) * gv;
        v[i] = b2 * v[i] + (one - b2) * gv * gv;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Result of one backward pass over a batch.
pub struct BatchResult<S> {
    /// Mean sample loss over the batch (training mode, dropout included).
    pub loss: S,
    /// Correct argmax predictions within the batch.
    pub correct: usize,
    pub grads: Gradients<S>,
}

/// Gather a batch into feature-major layout: row `n` of the returned
/// matrix holds pixel `n` of every batch sample, which is the access
/// pattern of the layer loop.
pub fn gather_batch<S: Scalar>(ds: &Dataset<S>, indices: &[u32]) -> (Matrix<S>, Vec<u8>) {
    let n = ds.num_features();
    let b = indices.len();
    let mut xcols = Matrix::zeros(n, b);
    let mut labels = Vec::with_capacity(b);
    for (bi, &i) in indices.iter().enumerate() {
        let row = ds.features_of(i as usize);
        for (f, &v) in row.iter().enumerate() {
            xcols.set(f, bi, v);
        }
        labels.push(ds.labels()[i as usize]);
    }
    (xcols, labels)
}

/// Storage for the forward pass of one batch that the backward pass
/// reads back.
struct ForwardRecord<S> {
    /// `states[n]` is the `batch x chi` hidden matrix after `n` layers.
    states: Vec<Matrix<S>>,
    /// ReLU indicator per activated layer (empty otherwise).
    relu_on: Vec<Vec<u8>>,
}

/// One layer update on a batch: `h_prev` in, fresh next-state matrix out.
///
/// The elementwise combination in each arm mirrors the single-sample
/// functions in [`crate::models`] operation for operation, so the two
/// paths agree bitwise in evaluation mode.  When `relu_sink` is given and
/// the layer applies a ReLU, the preactivation-positive indicator is
/// appended to it for the backward pass.
fn layer_step<S: Scalar>(
    params: &ModelParams<S>,
    n: usize,
    xrow: &[S],
    mask: Option<&[u8]>,
    inv_keep: Option<S>,
    h: &Matrix<S>,
    relu_sink: Option<&mut Vec<Vec<u8>>>,
) -> Result<Matrix<S>> {
    let batch = h.rows();
    let chi = h.cols();
    match params {
        ModelParams::SResMps(p) => {
            let prod = h.matmul(&p.layers[n])?;
            let mut out = h.clone();
            for b in 0..batch {
                let x = xrow[b];
                let orow = out.row_mut(b);
                let prow = prod.row(b);
                match (mask, inv_keep) {
                    (Some(mk), Some(inv)) => {
                        let mrow = &mk[b * chi..(b + 1) * chi];
                        for j in 0..chi {
                            if mrow[j] != 0 {
                                orow[j] += x * prow[j] * inv;
                            }
                        }
                    }
                    _ => {
                        for j in 0..chi {
                            orow[j] += x * prow[j];
                        }
                    }
                }
            }
            Ok(out)
        }
        ModelParams::AResMps(p) => {
            let layer = &p.layers[n];
            let p1 = h.matmul(&layer.w1)?;
            let p2 = h.matmul(&layer.w2)?;
            let mut out = h.clone();
            let mut relu_row = if relu_sink.is_some() && p.activation == Activation::Relu {
                Some(vec![0u8; batch * chi])
            } else {
                None
            };
            for b in 0..batch {
                let x = xrow[b];
                let xi2 = S::one() - x;
                let orow = out.row_mut(b);
                let r1 = p1.row(b);
                let r2 = p2.row(b);
                for j in 0..chi {
                    let pre = (x * r1[j] + xi2 * r2[j]) + layer.bias.get(j);
                    let act = match p.activation {
                        Activation::Relu => pre.max(S::zero()),
                        Activation::Linear => pre,
                    };
                    if let Some(rr) = relu_row.as_mut() {
                        rr[b * chi + j] = u8::from(pre > S::zero());
                    }
                    let branch = match (mask, inv_keep) {
                        (Some(mk), Some(inv)) => {
                            if mk[b * chi + j] != 0 {
                                act * inv
                            } else {
                                S::zero()
                            }
                        }
                        _ => act,
                    };
                    orow[j] += branch;
                }
            }
            if let (Some(sink), Some(rr)) = (relu_sink, relu_row) {
                sink.push(rr);
            }
            Ok(out)
        }
        ModelParams::Mps(p) => {
            let core = &p.cores[n];
            let p1 = h.matmul(&core.channel1)?;
            let p2 = h.matmul(&core.channel2)?;
            let mut out = Matrix::zeros(batch, chi);
            for b in 0..batch {
                let (f1, f2) = feature_channels(p.feature_map, xrow[b]);
                let orow = out.row_mut(b);
                let r1 = p1.row(b);
                let r2 = p2.row(b);
                for j in 0..chi {
                    orow[j] = f1 * r1[j] + f2 * r2[j];
                }
            }
            Ok(out)
        }
    }
}

/// Run all layers on a batch, optionally recording every intermediate
/// state for the backward pass.
fn forward_layers<S: Scalar>(
    params: &ModelParams<S>,
    xcols: &Matrix<S>,
    dropout: Option<&DropoutMasks>,
    record: Option<&mut ForwardRecord<S>>,
) -> Result<Matrix<S>> {
    let n_layers = params.num_features();
    let chi = params.hidden_dim();
    let batch = xcols.cols();
    if xcols.rows() != n_layers {
        return Err(Error::shape(
            "batched forward",
            format!("{} feature rows", xcols.rows()),
            format!("{n_layers} layers"),
        ));
    }
    let inv_keep = dropout.map(|d| S::from_f64_c(1.0 / (1.0 - d.rate)));
    let mut start = Matrix::zeros(batch, chi);
    start.fill(S::one());

    if let Some(rec) = record {
        rec.states.clear();
        rec.relu_on.clear();
        rec.states.reserve(n_layers + 1);
        rec.states.push(start);
        for n in 0..n_layers {
            let next = layer_step(
                params,
                n,
                xcols.row(n),
                dropout.map(|d| &d.layers[n][..]),
                inv_keep,
                &rec.states[n],
                Some(&mut rec.relu_on),
            )?;
            rec.states.push(next);
        }
        Ok(rec.states[n_layers].clone())
    } else {
        let mut h = start;
        for n in 0..n_layers {
            h = layer_step(
                params,
                n,
                xcols.row(n),
                dropout.map(|d| &d.layers[n][..]),
                inv_keep,
                &h,
                None,
            )?;
        }
        Ok(h)
    }
}

/// Feature-map channels without the domain check (batch paths trust the
/// dataset invariant that features lie in `[0, 1]`).
#[inline]
fn feature_channels<S: Scalar>(kind: FeatureMapKind, x: S) -> (S, S) {
    match kind {
        FeatureMapKind::Affine => (S::one(), x),
        FeatureMapKind::NormOne => (x, S::one() - x),
    }
}

/// Batched readout: `H R + b` with the bias added after the product.
fn readout_batch<S: Scalar>(params: &ModelParams<S>, h: &Matrix<S>) -> Result<Matrix<S>> {
    let r = params.readout();
    let mut logits = h.matmul(&r.weights)?;
    for b in 0..logits.rows() {
        let row = logits.row_mut(b);
        for (l, &bias) in row.iter_mut().zip(r.bias.as_slice()) {
            *l += bias;
        }
    }
    Ok(logits)
}

/// Mean loss, correct count, and logit gradients for a batch of logits.
fn batch_loss_grad<S: Scalar>(
    logits: &Matrix<S>,
    labels: &[u8],
) -> Result<(S, usize, Matrix<S>)> {
    let b = logits.rows();
    let mut dlogits = Matrix::zeros(b, logits.cols());
    let mut total = S::zero();
    let mut correct = 0usize;
    for i in 0..b {
        let row = Vector::from_vec(logits.row(i).to_vec());
        let label = labels[i] as usize;
        let (loss, grad) = cross_entropy(&row, label)?;
        total += loss;
        let arg = argmax(logits.row(i));
        if arg == label {
            correct += 1;
        }
        dlogits.row_mut(i).copy_from_slice(grad.as_slice());
    }
    let inv_b = S::one() / S::from_usize(b).expect("batch fits in scalar");
    total *= inv_b;
    dlogits.scale_in_place(inv_b);
    Ok((total, correct, dlogits))
}

pub(crate) fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward + hand-derived backward over one batch.
///
/// `xcols` is feature-major (`num_features x batch`, see
/// [`gather_batch`]); `dropout` carries pre-drawn masks for residual
/// branches (training mode) or `None` for evaluation-mode gradients.
pub fn backward<S: Scalar>(
    params: &ModelParams<S>,
    xcols: &Matrix<S>,
    labels: &[u8],
    dropout: Option<&DropoutMasks>,
) -> Result<BatchResult<S>> {
    let batch = xcols.cols();
    if labels.len() != batch {
        return Err(Error::Consistency(format!(
            "{batch} batch samples but {} labels",
            labels.len()
        )));
    }
    let chi = params.hidden_dim();
    let n_layers = params.num_features();
    if let Some(d) = dropout {
        if d.layers.len() != n_layers || d.layers.iter().any(|l| l.len() != batch * chi) {
            return Err(Error::Consistency(
                "dropout masks do not match model depth / batch shape".into(),
            ));
        }
    }

    let mut record = ForwardRecord {
        states: Vec::with_capacity(n_layers + 1),
        relu_on: Vec::new(),
    };
    let h_final = forward_layers(params, xcols, dropout, Some(&mut record))?;
    let logits = readout_batch(params, &h_final)?;
    let (loss, correct, dlogits) = batch_loss_grad(&logits, labels)?;

    let mut grads = Gradients::zeros_like(params);
    let readout = params.readout();

    // Readout gradients and the seed of the hidden-state adjoint.
    let d_readout_w = h_final.t_matmul(&dlogits)?;
    let d_readout_b = dlogits.column_sums();
    let mut g = dlogits.matmul_bt(&readout.weights)?; // batch x chi

    let inv_keep = dropout.map(|d| S::from_f64_c(1.0 / (1.0 - d.rate)));
    let mut scratch = Matrix::zeros(batch, chi);

    for n in (0..n_layers).rev() {
        let xrow = xcols.row(n);
        let h_prev = &record.states[n];
        match (params, &mut grads) {
            (ModelParams::SResMps(p), Gradients::SResMps { layers, .. }) => {
                // E = G o dropmask o diag(x); dW = Hprev^T E; G += E W^T.
                build_branch_adjoint(
                    &g,
                    xrow,
                    dropout.map(|d| &d.layers[n][..]),
                    inv_keep,
                    None,
                    true,
                    &mut scratch,
                );
                layers[n] = h_prev.t_matmul(&scratch)?;
                let back = scratch.matmul_bt(&p.layers[n])?;
                add_in_place(&mut g, &back);
            }
            (ModelParams::AResMps(p), Gradients::AResMps { w1, w2, bias, .. }) => {
                let relu = if p.activation == Activation::Relu {
                    Some(&record.relu_on[n][..])
                } else {
                    None
                };
                // dPre = G o dropmask o relu'; the channel factors x and
                // (1 - x) are applied per channel below, not here.
                build_branch_adjoint(
                    &g,
                    xrow,
                    dropout.map(|d| &d.layers[n][..]),
                    inv_keep,
                    relu,
                    false,
                    &mut scratch,
                );
                // The channel weights split dPre into the two matrices.
                bias[n] = scratch.column_sums();
                let mut e1 = scratch.clone();
                row_scale(&mut e1, xrow, RowScale::X);
                let mut e2 = scratch.clone();
                row_scale(&mut e2, xrow, RowScale::OneMinusX);
                w1[n] = h_prev.t_matmul(&e1)?;
                w2[n] = h_prev.t_matmul(&e2)?;
                let back1 = e1.matmul_bt(&p.layers[n].w1)?;
                let back2 = e2.matmul_bt(&p.layers[n].w2)?;
                add_in_place(&mut g, &back1);
                add_in_place(&mut g, &back2);
            }
            (ModelParams::Mps(p), Gradients::Mps { t1, t2, .. }) => {
                let mut e1 = g.clone();
                let mut e2 = g.clone();
                match p.feature_map {
                    FeatureMapKind::Affine => {
                        row_scale(&mut e2, xrow, RowScale::X);
                    }
                    FeatureMapKind::NormOne => {
                        row_scale(&mut e1, xrow, RowScale::X);
                        row_scale(&mut e2, xrow, RowScale::OneMinusX);
                    }
                }
                t1[n] = h_prev.t_matmul(&e1)?;
                t2[n] = h_prev.t_matmul(&e2)?;
                // No skip connection: the new adjoint replaces the old.
                let mut back = e1.matmul_bt(&p.cores[n].channel1)?;
                let back2 = e2.matmul_bt(&p.cores[n].channel2)?;
                add_in_place(&mut back, &back2);
                g = back;
            }
            _ => unreachable!("gradient stack built from the same params"),
        }
    }

    match &mut grads {
        Gradients::SResMps {
            readout_w,
            readout_b,
            ..
        }
        | Gradients::AResMps {
            readout_w,
            readout_b,
            ..
        }
        | Gradients::Mps {
            readout_w,
            readout_b,
            ..
        } => {
            *readout_w = d_readout_w;
            *readout_b = d_readout_b;
        }
    }

    Ok(BatchResult {
        loss,
        correct,
        grads,
    })
}

enum RowScale {
    X,
    OneMinusX,
}

/// Scale row `b` of `m` by `x_b` (or `1 - x_b`).
fn row_scale<S: Scalar>(m: &mut Matrix<S>, xrow: &[S], kind: RowScale) {
    for b in 0..m.rows() {
        let f = match kind {
            RowScale::X => xrow[b],
            RowScale::OneMinusX => S::one() - xrow[b],
        };
        for v in m.row_mut(b) {
            *v *= f;
        }
    }
}

/// Branch adjoint: `out = G o dropout? o relu'? (o diag(x))`, the shared
/// masking step of the residual backward arms.  `scale_by_x` applies the
/// pixel factor here (simple residual layers); activated layers apply
/// their per-channel factors separately.
fn build_branch_adjoint<S: Scalar>(
    g: &Matrix<S>,
    xrow: &[S],
    mask: Option<&[u8]>,
    inv_keep: Option<S>,
    relu: Option<&[u8]>,
    scale_by_x: bool,
    out: &mut Matrix<S>,
) {
    let chi = g.cols();
    for b in 0..g.rows() {
        let grow = g.row(b);
        let orow = out.row_mut(b);
        for j in 0..chi {
            let mut v = grow[j];
            if let (Some(mk), Some(inv)) = (mask, inv_keep) {
                v = if mk[b * chi + j] != 0 { v * inv } else { S::zero() };
            }
            if let Some(r) = relu {
                if r[b * chi + j] == 0 {
                    v = S::zero();
                }
            }
            if scale_by_x {
                v *= xrow[b];
            }
            orow[j] = v;
        }
    }
}

fn add_in_place<S: Scalar>(a: &mut Matrix<S>, b: &Matrix<S>) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += *y;
    }
}

/// Loss and accuracy of `params` on a dataset (evaluation mode).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
}

/// Evaluate in fixed-size batches; order is the dataset order, so
/// results are independent of threading and batch partitioning.
pub fn evaluate<S: Scalar>(params: &ModelParams<S>, ds: &Dataset<S>) -> Result<EvalReport> {
    if ds.num_features() != params.num_features() {
        return Err(Error::Consistency(format!(
            "dataset has {} features but model has {} layers",
            ds.num_features(),
            params.num_features()
        )));
    }
    if ds.is_empty() {
        return Err(Error::Consistency("cannot evaluate on an empty dataset".into()));
    }
    let mut total_loss = S::zero();
    let mut correct = 0usize;
    let indices: Vec<u32> = (0..ds.len() as u32).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (xcols, labels) = gather_batch(ds, chunk);
        let h = forward_layers(params, &xcols, None, None)?;
        let logits = readout_batch(params, &h)?;
        for i in 0..chunk.len() {
            let row = Vector::from_vec(logits.row(i).to_vec());
            let (loss, _) = cross_entropy(&row, labels[i] as usize)?;
            total_loss += loss;
            if argmax(logits.row(i)) == labels[i] as usize {
                correct += 1;
            }
        }
    }
    Ok(EvalReport {
        loss: total_loss.as_f64() / ds.len() as f64,
        accuracy: correct as f64 / ds.len() as f64,
    })
}

/// One row of the per-epoch metrics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches (training mode).
    pub train_loss: f64,
    /// Running accuracy over the epoch's training batches.
    pub train_acc: f64,
    /// Evaluation-mode accuracy on the held-out set after the epoch.
    pub test_acc: f64,
    /// Wall-clock seconds the epoch took.
    pub seconds: f64,
}

/// Header of the metrics table ([`EpochMetrics`] serialization).
pub const METRICS_HEADER: &str = "epoch\ttrain_loss\ttrain_acc\ttest_acc\tseconds";

impl EpochMetrics {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.seconds
        )
    }
}

/// All per-epoch rows of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
}

impl RunMetrics {
    pub fn write_tsv(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for row in &self.epochs {
            writeln!(out, "{}", row.tsv_row())?;
        }
        Ok(())
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_acc)
    }
}

/// Incremental trainer: owns the parameters, optimizer state, and batch
/// scheduler, and advances one epoch at a time so callers can interleave
/// measurements (stability sweeps, early stopping) with training.
pub struct Trainer<'d, S: Scalar> {
    params: ModelParams<S>,
    cfg: TrainConfig,
    train: &'d Dataset<S>,
    test: &'d Dataset<S>,
    mask: Option<Mask>,
    optimizer: Optimizer<S>,
    batches: BatchIterator,
    seeds: SeedTree,
    epoch: usize,
}

impl<'d, S: Scalar> Trainer<'d, S> {
    pub fn new(
        params: ModelParams<S>,
        cfg: TrainConfig,
        train: &'d Dataset<S>,
        test: &'d Dataset<S>,
        mask: Option<Mask>,
    ) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        for (name, ds) in [("training", train), ("test", test)] {
            if ds.num_features() != params.num_features() {
                return Err(Error::Consistency(format!(
                    "{name} set has {} features but model has {} layers",
                    ds.num_features(),
                    params.num_features()
                )));
            }
            if ds.num_classes() > params.num_classes() {
                return Err(Error::Consistency(format!(
                    "{name} set has {} classes but model reads out {}",
                    ds.num_classes(),
                    params.num_classes()
                )));
            }
        }
        if train.is_empty() {
            return Err(Error::Consistency("training set is empty".into()));
        }
        let mut params = params;
        if let Some(m) = &mask {
            m.check_congruent(&params)?;
            m.apply(&mut params);
        }
        let optimizer = Optimizer::new(&cfg);
        let batches = BatchIterator::new(train.len(), cfg.batch_size, cfg.seed)?;
        let seeds = SeedTree::new(cfg.seed);
        Ok(Trainer {
            params,
            cfg,
            train,
            test,
            mask,
            optimizer,
            batches,
            seeds,
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ModelParams<S> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<S> {
        self.params
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    /// Dropout rate in effect for this model/config combination.
    fn dropout_rate(&self) -> f64 {
        match &self.params {
            ModelParams::SResMps(_) => self.cfg.dropout,
            ModelParams::AResMps(p) => p.dropout,
            ModelParams::Mps(_) => 0.0,
        }
    }

    /// Run one epoch: every training batch once (shuffled), then one
    /// evaluation pass over the test set.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let started = Instant::now();
        let epoch = self.epoch;
        let plan = self.batches.epoch(epoch);
        let rate = self.dropout_rate();
        let chi = self.params.hidden_dim();
        let n_layers = self.params.num_features();

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut correct = 0usize;
        for (batch_idx, chunk) in plan.iter().enumerate() {
            let (xcols, labels) = gather_batch(self.train, chunk);
            let masks = if rate > 0.0 {
                Some(DropoutMasks::generate(
                    &self.seeds,
                    epoch,
                    batch_idx,
                    n_layers,
                    chunk.len(),
                    chi,
                    rate,
                ))
            } else {
                None
            };
            let result = backward(&self.params, &xcols, &labels, masks.as_ref())?;
            if !result.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: batch_idx + 1,
                });
            }
            self.optimizer
                .step(&mut self.params, &result.grads, self.mask.as_ref())?;
            loss_sum += result.loss.as_f64() * chunk.len() as f64;
            correct += result.correct;
            seen += chunk.len();
        }
        if !self
            .params
            .tensors()
            .iter()
            .all(|(t, _)| t.iter().all(|v| v.is_finite()))
        {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                batch: plan.num_batches(),
            });
        }
        let test = evaluate(&self.params, self.test)?;
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc: test.accuracy,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Optional plumbing for [`train`]: metrics streaming and early stopping.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Stream each metrics row (TSV, header first) as it is produced.
    pub metrics_out: Option<&'a mut dyn Write>,
    /// Stop after any epoch for which this returns true.
    pub stop_when: Option<&'a dyn Fn(&EpochMetrics) -> bool>,
}

/// Train `params` for `cfg.epochs` epochs (or until `stop_when` fires).
///
/// Returns the trained parameters and the collected metrics.  With a
/// mask, masked entries are zeroed on entry and stay exactly zero.
pub fn train<S: Scalar>(
    params: ModelParams<S>,
    train_ds: &Dataset<S>,
    test_ds: &Dataset<S>,
    cfg: &TrainConfig,
    mask: Option<Mask>,
    mut options: TrainOptions<'_>,
) -> Result<(ModelParams<S>, RunMetrics)> {
    let mut trainer = Trainer::new(params, cfg.clone(), train_ds, test_ds, mask)?;
    let mut metrics = RunMetrics::default();
    if let Some(out) = options.metrics_out.as_deref_mut() {
        writeln!(out, "{METRICS_HEADER}")?;
    }
    for _ in 0..cfg.epochs {
        let row = trainer.run_epoch()?;
        if let Some(out) = options.metrics_out.as_deref_mut() {
            writeln!(out, "{}", row.tsv_row())?;
            out.flush()?;
        }
        metrics.epochs.push(row);
        if options.stop_when.is_some_and(|f| f(&row)) {
            break;
        }
    }
    Ok((trainer.into_params(), metrics))
}
