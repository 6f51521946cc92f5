//! Model parameterizations and forward evaluation.
//!
//! Three closely related image classifiers over pixel sequences, all
//! sharing the same skeleton: a hidden row vector `h` of width `chi`
//! starts as all ones, is updated once per pixel (so depth equals the
//! pixel count), and a final linear readout maps it to class logits.
//!
//! * **Simple residual layers** (`SResMps`): `h' = h + x * (h W)` — one
//!   weight matrix per pixel, no bias, no activation.  The update is the
//!   identity when the pixel is black (`x = 0`), so information flows
//!   through untouched layers unchanged.
//! * **Activated residual layers** (`AResMps`): the residual branch gets
//!   two input channels (`x` and `1 - x`), a bias, an optional ReLU, and
//!   optional dropout: `h' = h + drop(act(x·(h W1) + (1-x)·(h W2) + b))`.
//! * **Two-channel product layers** (`Mps`): `h' = f1(x)·(h T1) +
//!   f2(x)·(h T2)` with a selectable pixel feature map.  A simple
//!   residual model rewrites exactly into this form (see
//!   [`mps_from_sresmps`]), which is what makes the residual form "half
//!   the parameters for the same function class".
//!
//! Numeric note: every composite expression here is written in one pinned
//! form (documented inline) that the batched training code in
//! [`crate::training`] mirrors operation for operation.  Equivalence
//! between the single-sample and batched paths — and between a residual
//! model and its two-channel rewriting — is therefore bitwise, not merely
//! approximate.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::SeedTree;
use crate::scalar::Scalar;

/// Pixel feature map for two-channel product layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMapKind {
    /// `(1, x)`: a constant channel plus the raw pixel.
    Affine,
    /// `(x, 1 - x)`: channel weights that sum to one exactly.
    NormOne,
}

/// Elementwise nonlinearity on the activated residual branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// No nonlinearity; with tied channel weights this reduces the
    /// activated layer to the simple residual rule.
    Linear,
}

/// Which of the three parameterizations a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SResMps,
    AResMps,
    Mps,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::SResMps => write!(f, "sresmps"),
            ModelKind::AResMps => write!(f, "aresmps"),
            ModelKind::Mps => write!(f, "mps"),
        }
    }
}

/// Evaluate the two channel weights of a feature map at pixel value `x`.
///
/// `x` must lie in `[0, 1]` (NaN is rejected by the same comparison).
/// For [`FeatureMapKind::NormOne`] the two weights sum to exactly one in
/// IEEE arithmetic for any `x` in the domain.
pub fn feature_map<S: Scalar>(kind: FeatureMapKind, x: S) -> Result<(S, S)> {
    if !(x >= S::zero() && x <= S::one()) {
        return Err(Error::Domain(format!(
            "feature value {x} outside [0, 1]"
        )));
    }
    Ok(match kind {
        FeatureMapKind::Affine => (S::one(), x),
        FeatureMapKind::NormOne => (x, S::one() - x),
    })
}

/// Final linear map from the hidden vector to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutHead<S> {
    /// `chi x num_classes`.
    pub weights: Matrix<S>,
    /// Length `num_classes`.
    pub bias: Vector<S>,
}

impl<S: Scalar> ReadoutHead<S> {
    /// `h · W + b` with the sum pinned as (product row) + bias.
    pub fn apply(&self, h: &Vector<S>) -> Result<Vector<S>> {
        let mut logits = h.vec_mat(&self.weights)?;
        for (l, b) in logits.as_mut_slice().iter_mut().zip(self.bias.as_slice()) {
            *l += *b;
        }
        Ok(logits)
    }
}

/// Simple residual model: one `chi x chi` matrix per pixel plus readout.
#[derive(Debug, Clone, PartialEq)]
pub struct SResMpsParams<S> {
    pub layers: Vec<Matrix<S>>,
    pub readout: ReadoutHead<S>,
}

/// One activated residual layer: two channel matrices and a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AResMpsLayer<S> {
    pub w1: Matrix<S>,
    pub w2: Matrix<S>,
    pub bias: Vector<S>,
}

/// Activated residual model.
#[derive(Debug, Clone, PartialEq)]
pub struct AResMpsParams<S> {
    pub layers: Vec<AResMpsLayer<S>>,
    pub activation: Activation,
    /// Dropout rate on the residual branch during training (0 disables).
    pub dropout: f64,
    pub readout: ReadoutHead<S>,
}

/// One two-channel product core.
#[derive(Debug, Clone, PartialEq)]
pub struct MpsCore<S> {
    pub channel1: Matrix<S>,
    pub channel2: Matrix<S>,
}

/// Two-channel product-layer model.
#[derive(Debug, Clone, PartialEq)]
pub struct MpsParams<S> {
    pub cores: Vec<MpsCore<S>>,
    pub feature_map: FeatureMapKind,
    pub readout: ReadoutHead<S>,
}

/// Any of the three model parameterizations.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams<S> {
    SResMps(SResMpsParams<S>),
    AResMps(AResMpsParams<S>),
    Mps(MpsParams<S>),
}

/// Whether a tensor belongs to the per-pixel stack (prunable) or the
/// readout head (exempt from pruning).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Residual,
    Readout,
}

/// The hidden-state trajectory `h[0] ..= h[N]` of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace<S> {
    pub states: Vec<Vector<S>>,
}

impl<S: Scalar> HiddenTrace<S> {
    pub fn endpoint(&self) -> &Vector<S> {
        self.states.last().expect("trace holds at least the start state")
    }
}

/// Simple residual update `h' = h + x * (h W)`, pinned elementwise as
/// `h[j] + x * (hW)[j]`.
pub fn sresmps_layer<S: Scalar>(h: &Vector<S>, x: S, w: &Matrix<S>) -> Result<Vector<S>> {
    let t = h.vec_mat(w)?;
    let mut out = h.clone();
    out.axpy(x, &t);
    Ok(out)
}

/// Activated residual update.
///
/// Branch preactivation is pinned elementwise as
/// `(x * (hW1)[j] + (1-x) * (hW2)[j]) + b[j]`; dropout keeps entry `j`
/// iff `mask[j] != 0`, rescaling survivors by `1 / (1 - rate)` and
/// zeroing the rest exactly.
pub fn aresmps_layer<S: Scalar>(
    h: &Vector<S>,
    x: S,
    layer: &AResMpsLayer<S>,
    activation: Activation,
    dropout: Option<(&[u8], f64)>,
) -> Result<Vector<S>> {
    let p1 = h.vec_mat(&layer.w1)?;
    let p2 = h.vec_mat(&layer.w2)?;
    if layer.bias.len() != p1.len() {
        return Err(Error::shape(
            "activated residual layer",
            format!("bias len {}", layer.bias.len()),
            format!("width {}", p1.len()),
        ));
    }
    let xi2 = S::one() - x;
    let inv_keep = dropout.map(|(_, rate)| S::from_f64_c(1.0 / (1.0 - rate)));
    let mut out = h.clone();
    for j in 0..out.len() {
        let pre = (x * p1.get(j) + xi2 * p2.get(j)) + layer.bias.get(j);
        let act = match activation {
            Activation::Relu => pre.max(S::zero()),
            Activation::Linear => pre,
        };
        let branch = match (&dropout, inv_keep) {
            (Some((mask, _)), Some(inv)) => {
                if mask[j] != 0 {
                    act * inv
                } else {
                    S::zero()
                }
            }
            _ => act,
        };
        out.as_mut_slice()[j] += branch;
    }
    Ok(out)
}

/// Two-channel product update, pinned elementwise as
/// `f1 * (h T1)[j] + f2 * (h T2)[j]`.
pub fn mps_layer<S: Scalar>(
    h: &Vector<S>,
    x: S,
    core: &MpsCore<S>,
    kind: FeatureMapKind,
) -> Result<Vector<S>> {
    let (f1, f2) = feature_map(kind, x)?;
    let p1 = h.vec_mat(&core.channel1)?;
    let p2 = h.vec_mat(&core.channel2)?;
    let mut out = Vector::zeros(p1.len());
    for j in 0..out.len() {
        out.as_mut_slice()[j] = f1 * p1.get(j) + f2 * p2.get(j);
    }
    Ok(out)
}

impl<S: Scalar> ModelParams<S> {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::SResMps(_) => ModelKind::SResMps,
            ModelParams::AResMps(_) => ModelKind::AResMps,
            ModelParams::Mps(_) => ModelKind::Mps,
        }
    }

    /// Depth: number of per-pixel layers.
    pub fn num_features(&self) -> usize {
        match self {
            ModelParams::SResMps(p) => p.layers.len(),
            ModelParams::AResMps(p) => p.layers.len(),
            ModelParams::Mps(p) => p.cores.len(),
        }
    }

    /// Hidden width `chi`.
    pub fn hidden_dim(&self) -> usize {
        match self {
            ModelParams::SResMps(p) => p.readout.weights.rows(),
            ModelParams::AResMps(p) => p.readout.weights.rows(),
            ModelParams::Mps(p) => p.readout.weights.rows(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelParams::SResMps(p) => p.readout.weights.cols(),
            ModelParams::AResMps(p) => p.readout.weights.cols(),
            ModelParams::Mps(p) => p.readout.weights.cols(),
        }
    }

    /// Entries in the per-pixel stack (readout excluded).
    pub fn residual_param_count(&self) -> usize {
        self.tensors()
            .into_iter()
            .filter(|(_, role)| *role == TensorRole::Residual)
            .map(|(t, _)| t.len())
            .sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.tensors().into_iter().map(|(t, _)| t.len()).sum()
    }

    /// Every parameter tensor as a flat slice, in the crate-wide pinned
    /// order: per-pixel tensors layer by layer (for activated layers
    /// `w1, w2, bias`; for product layers `channel1, channel2`), then the
    /// readout weights, then the readout bias.  Checkpoints, gradients,
    /// optimizer state, and pruning masks all follow this order.
    pub fn tensors(&self) -> Vec<(&[S], TensorRole)> {
        let mut out: Vec<(&[S], TensorRole)> = Vec::new();
        match self {
            ModelParams::SResMps(p) => {
                for w in &p.layers {
                    out.push((w.data(), TensorRole::Residual));
                }
                out.push((p.readout.weights.data(), TensorRole::Readout));
                out.push((p.readout.bias.as_slice(), TensorRole::Readout));
            }
            ModelParams::AResMps(p) => {
                for l in &p.layers {
                    out.push((l.w1.data(), TensorRole::Residual));
                    out.push((l.w2.data(), TensorRole::Residual));
                    out.push((l.bias.as_slice(), TensorRole::Residual));
                }
                out.push((p.readout.weights.data(), TensorRole::Readout));
                out.push((p.readout.bias.as_slice(), TensorRole::Readout));
            }
            ModelParams::Mps(p) => {
                for c in &p.cores {
                    out.push((c.channel1.data(), TensorRole::Residual));
                    out.push((c.channel2.data(), TensorRole::Residual));
                }
                out.push((p.readout.weights.data(), TensorRole::Readout));
                out.push((p.readout.bias.as_slice(), TensorRole::Readout));
            }
        }
        out
    }

    /// Mutable variant of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(&mut [S], TensorRole)> {
        let mut out: Vec<(&mut [S], TensorRole)> = Vec::new();
        match self {
            ModelParams::SResMps(p) => {
                for w in &mut p.layers {
                    out.push((w.data_mut(), TensorRole::Residual));
                }
                out.push((p.readout.weights.data_mut(), TensorRole::Readout));
                out.push((p.readout.bias.as_mut_slice(), TensorRole::Readout));
            }
            ModelParams::AResMps(p) => {
                for l in &mut p.layers {
                    out.push((l.w1.data_mut(), TensorRole::Residual));
                    out.push((l.w2.data_mut(), TensorRole::Residual));
                    out.push((l.bias.as_mut_slice(), TensorRole::Residual));
                }
                out.push((p.readout.weights.data_mut(), TensorRole::Readout));
                out.push((p.readout.bias.as_mut_slice(), TensorRole::Readout));
            }
            ModelParams::Mps(p) => {
                for c in &mut p.cores {
                    out.push((c.channel1.data_mut(), TensorRole::Residual));
                    out.push((c.channel2.data_mut(), TensorRole::Residual));
                }
                out.push((p.readout.weights.data_mut(), TensorRole::Readout));
                out.push((p.readout.bias.as_mut_slice(), TensorRole::Readout));
            }
        }
        out
    }

    /// Check internal shape agreement (layer widths, readout dims).
    pub fn validate(&self) -> Result<()> {
        let chi = self.hidden_dim();
        let check = |m: &Matrix<S>, what: &'static str| -> Result<()> {
            if m.shape() != (chi, chi) {
                return Err(Error::shape(what, format!("{}x{}", m.rows(), m.cols()), format!("{chi}x{chi}")));
            }
            Ok(())
        };
        match self {
            ModelParams::SResMps(p) => {
                for w in &p.layers {
                    check(w, "residual layer weights")?;
                }
            }
            ModelParams::AResMps(p) => {
                for l in &p.layers {
                    check(&l.w1, "activated layer weights")?;
                    check(&l.w2, "activated layer weights")?;
                    if l.bias.len() != chi {
                        return Err(Error::shape(
                            "activated layer bias",
                            l.bias.len(),
                            chi,
                        ));
                    }
                }
            }
            ModelParams::Mps(p) => {
                for c in &p.cores {
                    check(&c.channel1, "product core")?;
                    check(&c.channel2, "product core")?;
                }
            }
        }
        let r = self.readout();
        if r.bias.len() != r.weights.cols() {
            return Err(Error::shape(
                "readout bias",
                r.bias.len(),
                r.weights.cols(),
            ));
        }
        Ok(())
    }

    /// Evaluate class logits for one sample (evaluation mode: dropout is
    /// never applied here).
    pub fn forward(&self, x: &[S]) -> Result<Vector<S>> {
        let (logits, _) = self.forward_impl(x, false)?;
        Ok(logits)
    }

    /// Like [`ModelParams::forward`], but also return the full hidden
    /// trajectory `h[0] ..= h[N]`.
    pub fn forward_traced(&self, x: &[S]) -> Result<(Vector<S>, HiddenTrace<S>)> {
        let (logits, trace) = self.forward_impl(x, true)?;
        Ok((logits, trace.expect("trace requested")))
    }

    fn forward_impl(&self, x: &[S], keep_trace: bool) -> Result<(Vector<S>, Option<HiddenTrace<S>>)> {
        if x.len() != self.num_features() {
            return Err(Error::shape(
                "forward",
                format!("{} features", x.len()),
                format!("{} layers", self.num_features()),
            ));
        }
        let chi = self.hidden_dim();
        let mut h = Vector::ones(chi);
        let mut states = if keep_trace {
            let mut s = Vec::with_capacity(x.len() + 1);
            s.push(h.clone());
            Some(s)
        } else {
            None
        };
        for (n, &xn) in x.iter().enumerate() {
            h = match self {
                ModelParams::SResMps(p) => {
                    if !(xn >= S::zero() && xn <= S::one()) {
                        return Err(Error::Domain(format!(
                            "feature value {xn} outside [0, 1] at position {n}"
                        )));
                    }
                    sresmps_layer(&h, xn, &p.layers[n])?
                }
                ModelParams::AResMps(p) => {
                    if !(xn >= S::zero() && xn <= S::one()) {
                        return Err(Error::Domain(format!(
                            "feature value {xn} outside [0, 1] at position {n}"
                        )));
                    }
                    aresmps_layer(&h, xn, &p.layers[n], p.activation, None)?
                }
                ModelParams::Mps(p) => mps_layer(&h, xn, &p.cores[n], p.feature_map)?,
            };
            if let Some(s) = states.as_mut() {
                s.push(h.clone());
            }
        }
        let readout = match self {
            ModelParams::SResMps(p) => &p.readout,
            ModelParams::AResMps(p) => &p.readout,
            ModelParams::Mps(p) => &p.readout,
        };
        let logits = readout.apply(&h)?;
        Ok((logits, states.map(|s| HiddenTrace { states: s })))
    }

    pub fn readout(&self) -> &ReadoutHead<S> {
        match self {
            ModelParams::SResMps(p) => &p.readout,
            ModelParams::AResMps(p) => &p.readout,
            ModelParams::Mps(p) => &p.readout,
        }
    }
}

/// Rewrite a simple residual model as an exactly equivalent two-channel
/// product model with the `(1, x)` feature map: the constant channel
/// carries the identity, the pixel channel carries the residual weights.
/// The readout is copied unchanged.
pub fn mps_from_sresmps<S: Scalar>(p: &SResMpsParams<S>) -> MpsParams<S> {
    let chi = p.readout.weights.rows();
    MpsParams {
        cores: p
            .layers
            .iter()
            .map(|w| MpsCore {
                channel1: Matrix::identity(chi),
                channel2: w.clone(),
            })
            .collect(),
        feature_map: FeatureMapKind::Affine,
        readout: p.readout.clone(),
    }
}

/// Exact inverse of [`mps_from_sresmps`]: recover the residual weights
/// from a two-channel model whose constant channel is exactly the
/// identity.  Models that deviate from that form — a different feature
/// map, or any perturbed constant channel — have no simple residual
/// equivalent and are rejected.
pub fn sresmps_from_mps<S: Scalar>(p: &MpsParams<S>) -> Result<SResMpsParams<S>> {
    if p.feature_map != FeatureMapKind::Affine {
        return Err(Error::Domain(format!(
            "only models with the (1, x) feature map have a residual form; this one uses {:?}",
            p.feature_map
        )));
    }
    let chi = p.readout.weights.rows();
    let identity = Matrix::identity(chi);
    for (i, core) in p.cores.iter().enumerate() {
        if core.channel1 != identity {
            return Err(Error::Domain(format!(
                "core {i}: constant channel is not exactly the identity, \
                 so the model has no residual form"
            )));
        }
    }
    Ok(SResMpsParams {
        layers: p.cores.iter().map(|c| c.channel2.clone()).collect(),
        readout: p.readout.clone(),
    })
}

/// Everything needed to build fresh parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub num_features: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    /// Standard deviation of the Gaussian residual initialization.
    pub init_std: f64,
    /// Feature map for product-layer models.
    pub feature_map: FeatureMapKind,
    /// Nonlinearity for activated residual models.
    pub activation: Activation,
    /// Dropout rate stored on activated residual models.
    pub dropout: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, num_features: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind,
            num_features,
            hidden_dim,
            num_classes,
            init_std: 1e-3,
            feature_map: FeatureMapKind::NormOne,
            activation: Activation::Relu,
            dropout: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_features == 0 || self.hidden_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive (features {}, width {}, classes {})",
                self.num_features, self.hidden_dim, self.num_classes
            )));
        }
        if !self.init_std.is_finite() || self.init_std < 0.0 {
            return Err(Error::Config(format!(
                "init std {} must be finite and non-negative",
                self.init_std
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Build freshly initialized parameters.
///
/// Per-pixel weights are drawn i.i.d. from `N(0, init_std^2)`, which
/// keeps every layer near the identity map:
///
/// * simple residual layers get `W = G` (the identity lives in the skip
///   connection);
/// * activated layers get `W1 = G1`, `W2 = G2` and zero biases;
/// * product cores are initialized consistently with the residual
///   rewriting for their feature map — `(x, 1-x)` cores get `I + G` on
///   both channels (the channel weights sum to one, so the identities
///   combine into a clean skip), while `(1, x)` cores get `I + G` on the
///   constant channel and bare `G` on the pixel channel (an identity
///   there would be amplified by every bright pixel and blow up deep
///   products).
///
/// The readout is `N(0, 1/chi)` with zero bias.  Draws happen in the
/// pinned tensor order, from the `"init"` stream of a [`SeedTree`] over
/// `seed`, so equal `(spec, seed)` gives byte-equal parameters.
pub fn init_params<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ModelParams<S>> {
    spec.validate()?;
    let mut rng = SeedTree::new(seed).stream("init");
    let chi = spec.hidden_dim;
    let eps = S::from_f64_c(spec.init_std);

    let mut gaussian = |rows: usize, cols: usize, std: S, add_identity: bool| -> Matrix<S> {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = std * S::standard_normal(&mut rng);
        }
        if add_identity {
            for i in 0..rows.min(cols) {
                let cur = m.get(i, i);
                m.set(i, i, cur + S::one());
            }
        }
        m
    };

    let params = match spec.kind {
        ModelKind::SResMps => {
            let layers = (0..spec.num_features)
                .map(|_| gaussian(chi, chi, eps, false))
                .collect();
            let readout = ReadoutHead {
                weights: gaussian(chi, spec.num_classes, S::from_f64_c((1.0 / chi as f64).sqrt()), false),
                bias: Vector::zeros(spec.num_classes),
            };
            ModelParams::SResMps(SResMpsParams { layers, readout })
        }
        ModelKind::AResMps => {
            let layers = (0..spec.num_features)
                .map(|_| AResMpsLayer {
                    w1: gaussian(chi, chi, eps, false),
                    w2: gaussian(chi, chi, eps, false),
                    bias: Vector::zeros(chi),
                })
                .collect();
            let readout = ReadoutHead {
                weights: gaussian(chi, spec.num_classes, S::from_f64_c((1.0 / chi as f64).sqrt()), false),
                bias: Vector::zeros(spec.num_classes),
            };
            ModelParams::AResMps(AResMpsParams {
                layers,
                activation: spec.activation,
                dropout: spec.dropout,
                readout,
            })
        }
        ModelKind::Mps => {
            let identity_on_ch2 = spec.feature_map == FeatureMapKind::NormOne;
            let cores = (0..spec.num_features)
                .map(|_| MpsCore {
                    channel1: gaussian(chi, chi, eps, true),
                    channel2: gaussian(chi, chi, eps, identity_on_ch2),
                })
                .collect();
            let readout = ReadoutHead {
                weights: gaussian(chi, spec.num_classes, S::from_f64_c((1.0 / chi as f64).sqrt()), false),
                bias: Vector::zeros(spec.num_classes),
            };
            ModelParams::Mps(MpsParams {
                cores,
                feature_map: spec.feature_map,
                readout,
            })
        }
    };
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn feature_map_values() {
        assert_eq!(feature_map(FeatureMapKind::Affine, 0.3f64).unwrap(), (1.0, 0.3));
        assert_eq!(feature_map(FeatureMapKind::NormOne, 0.0f64).unwrap(), (0.0, 1.0));
        assert!(feature_map(FeatureMapKind::Affine, 1.0000001f64).is_err());
        assert!(feature_map(FeatureMapKind::Affine, -0.1f64).is_err());
        assert!(feature_map(FeatureMapKind::Affine, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn norm_one_channels_sum_to_exactly_one(x in 0.0f64..=1.0) {
            let (a, b) = feature_map(FeatureMapKind::NormOne, x).unwrap();
            prop_assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn simple_layer_with_zero_pixel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_matrix(5, 5, &mut rng);
        let h = Vector::from_vec(random_unit(5, &mut rng));
        let out = sresmps_layer(&h, 0.0, &w).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn simple_layer_matches_hand_computation() {
        // h = (1, 2), x = 0.5, W = [[1, 0], [1, 1]]:
        // hW = (3, 2); h' = h + 0.5 * hW = (2.5, 3).
        let w = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 1.0]]).unwrap();
        let h = Vector::from_vec(vec![1.0, 2.0]);
        let out = sresmps_layer(&h, 0.5, &w).unwrap();
        assert_eq!(out.as_slice(), &[2.5, 3.0]);
    }

    #[test]
    fn activated_layer_degenerations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_matrix(6, 6, &mut rng);
        let h = Vector::from_vec(random_unit(6, &mut rng));

        // Zero second channel, no bias, no activation: exactly the simple
        // residual rule h + x*(hW).
        let pixel_only = AResMpsLayer {
            w1: w.clone(),
            w2: Matrix::zeros(6, 6),
            bias: Vector::zeros(6),
        };
        for &x in &[0.0, 0.25, 1.0] {
            let act = aresmps_layer(&h, x, &pixel_only, Activation::Linear, None).unwrap();
            let simple = sresmps_layer(&h, x, &w).unwrap();
            for (a, s) in act.as_slice().iter().zip(simple.as_slice()) {
                assert_relative_eq!(a, s, max_relative = 1e-14, epsilon = 1e-14);
            }
        }

        // Tied channels: the channel weights x and 1-x collapse, so the
        // update becomes h + hW independent of the pixel value.
        let tied = AResMpsLayer {
            w1: w.clone(),
            w2: w.clone(),
            bias: Vector::zeros(6),
        };
        let expected = {
            let mut e = h.clone();
            e.axpy(1.0, &h.vec_mat(&w).unwrap());
            e
        };
        for &x in &[0.0, 0.25, 1.0] {
            let act = aresmps_layer(&h, x, &tied, Activation::Linear, None).unwrap();
            for (a, s) in act.as_slice().iter().zip(expected.as_slice()) {
                assert_relative_eq!(a, s, max_relative = 1e-14, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn relu_clamps_negative_branches() {
        // Forcing a strongly negative preactivation: the branch must
        // contribute exactly zero, leaving the skip connection alone.
        let chi = 3;
        let layer = AResMpsLayer {
            w1: Matrix::zeros(chi, chi),
            w2: Matrix::zeros(chi, chi),
            bias: Vector::from_vec(vec![-5.0; chi]),
        };
        let h = Vector::from_vec(vec![0.5, -0.25, 2.0]);
        let out = aresmps_layer(&h, 0.3, &layer, Activation::Relu, None).unwrap();
        assert_eq!(out, h);
        let lin = aresmps_layer(&h, 0.3, &layer, Activation::Linear, None).unwrap();
        assert_eq!(lin.as_slice(), &[-4.5, -5.25, -3.0]);
    }

    #[test]
    fn dropout_zeroes_and_rescales() {
        let chi = 4;
        let layer = AResMpsLayer {
            w1: Matrix::identity(chi),
            w2: Matrix::identity(chi),
            bias: Vector::zeros(chi),
        };
        let h = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let mask = [1u8, 0, 1, 0];
        let out = aresmps_layer(&h, 0.5, &layer, Activation::Linear, Some((&mask, 0.5))).unwrap();
        // Branch is h itself (identity weights, weights tied); kept
        // entries double the branch (1/(1-0.5) = 2), dropped add nothing.
        assert_eq!(out.as_slice(), &[3.0, 2.0, 9.0, 4.0]);
    }

    #[test]
    fn product_layer_with_identity_cores_and_norm_one_map_preserves_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let core = MpsCore {
            channel1: Matrix::identity(5),
            channel2: Matrix::identity(5),
        };
        for _ in 0..10 {
            let h = Vector::from_vec(random_unit(5, &mut rng));
            let x: f64 = rng.gen();
            let out = mps_layer(&h, x, &core, FeatureMapKind::NormOne).unwrap();
            for (o, v) in out.as_slice().iter().zip(h.as_slice()) {
                assert_relative_eq!(o, v, max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn forward_on_all_black_image_reads_out_the_ones_vector() {
        let spec = ModelSpec::new(ModelKind::SResMps, 6, 4, 3);
        let params = init_params::<f64>(&spec, 7).unwrap();
        let x = vec![0.0; 6];
        let logits = params.forward(&x).unwrap();
        let expected = params.readout().apply(&Vector::ones(4)).unwrap();
        assert_eq!(logits, expected);
    }

    #[test]
    fn later_layers_do_not_affect_earlier_states() {
        let spec = ModelSpec::new(ModelKind::SResMps, 5, 4, 2);
        let params = init_params::<f64>(&spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_unit(5, &mut rng);
        let (_, trace_a) = params.forward_traced(&x).unwrap();

        let mut altered = params.clone();
        if let ModelParams::SResMps(p) = &mut altered {
            p.layers[3] = random_matrix(4, 4, &mut rng);
        }
        let (_, trace_b) = altered.forward_traced(&x).unwrap();
        // States up to and including h[3] (produced by layers 1..=3) match.
        for n in 0..=3 {
            assert_eq!(trace_a.states[n], trace_b.states[n]);
        }
        assert_ne!(trace_a.states[4], trace_b.states[4]);
    }

    #[test]
    fn rewriting_as_two_channel_model_is_bitwise_equivalent() {
        let spec = ModelSpec {
            init_std: 0.3, // far from identity to make the test meaningful
            ..ModelSpec::new(ModelKind::SResMps, 12, 6, 4)
        };
        let params = init_params::<f64>(&spec, 21).unwrap();
        let ModelParams::SResMps(sres) = &params else {
            unreachable!()
        };
        let mps = ModelParams::Mps(mps_from_sresmps(sres));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_unit(12, &mut rng);
            let a = params.forward(&x).unwrap();
            let b = mps.forward(&x).unwrap();
            assert_eq!(a, b, "rewritten model must match bit for bit");
        }
    }

    #[test]
    fn rewriting_round_trips_exactly_and_rejects_foreign_forms() {
        let spec = ModelSpec {
            init_std: 0.2,
            ..ModelSpec::new(ModelKind::SResMps, 6, 4, 3)
        };
        let params = init_params::<f64>(&spec, 33).unwrap();
        let ModelParams::SResMps(sres) = &params else {
            unreachable!()
        };
        let mps = mps_from_sresmps(sres);
        let back = sresmps_from_mps(&mps).unwrap();
        assert_eq!(sres, &back);

        let mut wrong_map = mps.clone();
        wrong_map.feature_map = FeatureMapKind::NormOne;
        assert!(matches!(sresmps_from_mps(&wrong_map), Err(Error::Domain(_))));

        let mut bent = mps.clone();
        bent.cores[2].channel1.set(0, 1, 1e-9);
        let err = sresmps_from_mps(&bent).unwrap_err();
        assert!(matches!(&err, Error::Domain(m) if m.contains("core 2")), "{err:?}");
    }

    #[test]
    fn converted_model_has_twice_the_residual_parameters() {
        let spec = ModelSpec::new(ModelKind::SResMps, 10, 8, 5);
        let params = init_params::<f64>(&spec, 0).unwrap();
        let ModelParams::SResMps(sres) = &params else {
            unreachable!()
        };
        let mps = ModelParams::Mps(mps_from_sresmps(sres));
        assert_eq!(params.residual_param_count(), 10 * 8 * 8);
        assert_eq!(mps.residual_param_count(), 2 * 10 * 8 * 8);
        assert_eq!(
            mps.total_param_count() - mps.residual_param_count(),
            params.total_param_count() - params.residual_param_count()
        );
    }

    #[test]
    fn init_is_reproducible_and_seed_sensitive() {
        let spec = ModelSpec::new(ModelKind::AResMps, 4, 3, 2);
        let a = init_params::<f64>(&spec, 11).unwrap();
        let b = init_params::<f64>(&spec, 11).unwrap();
        let c = init_params::<f64>(&spec, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_feature_map_identity_placement() {
        let mut spec = ModelSpec::new(ModelKind::Mps, 3, 4, 2);
        spec.init_std = 0.0;
        spec.feature_map = FeatureMapKind::NormOne;
        let ModelParams::Mps(p) = init_params::<f64>(&spec, 0).unwrap() else {
            unreachable!()
        };
        assert_eq!(p.cores[0].channel1, Matrix::identity(4));
        assert_eq!(p.cores[0].channel2, Matrix::identity(4));

        spec.feature_map = FeatureMapKind::Affine;
        let ModelParams::Mps(p) = init_params::<f64>(&spec, 0).unwrap() else {
            unreachable!()
        };
        assert_eq!(p.cores[0].channel1, Matrix::identity(4));
        assert_eq!(p.cores[0].channel2, Matrix::zeros(4, 4));
    }

    #[test]
    fn tensor_order_groups_residual_then_readout() {
        let spec = ModelSpec::new(ModelKind::AResMps, 2, 3, 2);
        let params = init_params::<f64>(&spec, 5).unwrap();
        let tensors = params.tensors();
        // 2 layers x (w1, w2, bias) + readout weights + readout bias.
        assert_eq!(tensors.len(), 8);
        assert!(tensors[..6].iter().all(|(_, r)| *r == TensorRole::Residual));
        assert!(tensors[6..].iter().all(|(_, r)| *r == TensorRole::Readout));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = ModelSpec::new(ModelKind::SResMps, 0, 4, 2);
        assert!(init_params::<f64>(&spec, 0).is_err());
        spec.num_features = 4;
        spec.dropout = 1.0;
        assert!(init_params::<f64>(&spec, 0).is_err());
        spec.dropout = 0.0;
        spec.init_std = f64::NAN;
        assert!(init_params::<f64>(&spec, 0).is_err());
    }
}
