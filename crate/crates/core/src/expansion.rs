//! Polynomial expansion of simple residual models in their pixel values.
//!
//! Unrolling `h' = h + x_n (h W_n)` over all layers writes the final
//! hidden state as a sum over pixel subsets: for each strictly
//! increasing index tuple `a_1 < ... < a_k`, the start vector is passed
//! through `W_{a_1} .. W_{a_k}` (in that order) and scaled by
//! `x_{a_1} .. x_{a_k}`.  Grouping tuples by size `k` splits the model
//! into interaction orders: `k = 0` is the constant term, `k = 1` the
//! linear response, and so on.
//!
//! Two evaluation routes are provided and tested against each other:
//!
//! * **Enumeration** ([`order_term`], [`TruncatedModel::forward`]) walks
//!   every tuple explicitly.  Cost is `C(N, k)` matrix-vector products,
//!   so it is the ground truth for small models and guarded by a tuple
//!   budget for large ones.
//! * **Sequential recursion** ([`order_terms_seq`],
//!   [`TruncatedModel::forward_seq`], [`truncated_backward`]) carries
//!   one partial sum per order through the layer loop
//!   (`s_k <- s_k + x_n (s_{k-1} W_n)`), costing `N * kmax`
//!   matrix-vector products — cheap enough to evaluate datasets and to
//!   *train* a model under a fixed interaction-order budget.

// The order-tracking kernels walk several same-length buffers at once;
// index loops keep them aligned with the recursions above.
#![allow(clippy::needless_range_loop)]

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::models::{ModelParams, SResMpsParams};
use crate::scalar::Scalar;
use crate::training::{BatchResult, Gradients};

/// Enumeration budget: combination walks beyond this many tuples are
/// refused unless explicitly overridden.
pub const TUPLE_BUDGET: u128 = 100_000_000;

/// `C(n, k)` with saturation at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Total tuples enumerated by a truncated evaluation at `kmax`.
pub fn enumeration_cost(n: usize, kmax: usize) -> u128 {
    (0..=kmax.min(n)).fold(0u128, |acc, k| acc.saturating_add(binomial(n, k)))
}

fn expect_sres<S: Scalar>(params: &ModelParams<S>) -> Result<&SResMpsParams<S>> {
    match params {
        ModelParams::SResMps(p) => Ok(p),
        other => Err(Error::Domain(format!(
            "polynomial expansion is defined for simple residual models, got {}",
            other.kind()
        ))),
    }
}

/// The order-`k` contribution to the final hidden state, by explicit
/// tuple enumeration (lexicographic order).
///
/// `k = 0` returns the all-ones start vector.  Cost is `C(N, k)` chained
/// vector-matrix products — intended for small models; use the
/// sequential route for anything sizable.
pub fn order_term<S: Scalar>(
    params: &ModelParams<S>,
    x: &[S],
    k: usize,
) -> Result<Vector<S>> {
    let p = expect_sres(params)?;
    let n = p.layers.len();
    if x.len() != n {
        return Err(Error::shape(
            "order term",
            format!("{} features", x.len()),
            format!("{n} layers"),
        ));
    }
    if k > n {
        return Err(Error::Domain(format!(
            "interaction order {k} exceeds {n} layers"
        )));
    }
    let chi = params.hidden_dim();
    if k == 0 {
        return Ok(Vector::ones(chi));
    }
    let mut sum = Vector::zeros(chi);
    // Odometer over strictly increasing index tuples.
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let mut v = Vector::ones(chi);
        for &a in &idx {
            // Same per-step form as the sequential recursion:
            // v <- x_a * (v W_a), elementwise.
            let mut t = v.vec_mat(&p.layers[a])?;
            for e in t.as_mut_slice() {
                *e = x[a] * *e;
            }
            v = t;
        }
        for (s, e) in sum.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *s += *e;
        }
        // Advance the tuple: find the rightmost index that can move.
        let mut pos = k;
        while pos > 0 {
            pos -= 1;
            if idx[pos] < n - k + pos {
                idx[pos] += 1;
                for j in pos + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
            if pos == 0 {
                return Ok(sum);
            }
        }
    }
}

/// All partial order sums `s_0 ..= s_kmax` after the full layer loop,
/// via the sequential recursion.
pub fn order_terms_seq<S: Scalar>(
    params: &ModelParams<S>,
    x: &[S],
    kmax: usize,
) -> Result<Vec<Vector<S>>> {
    let p = expect_sres(params)?;
    let n = p.layers.len();
    if x.len() != n {
        return Err(Error::shape(
            "order terms",
            format!("{} features", x.len()),
            format!("{n} layers"),
        ));
    }
    let kmax = kmax.min(n);
    let chi = params.hidden_dim();
    let mut s: Vec<Vector<S>> = Vec::with_capacity(kmax + 1);
    s.push(Vector::ones(chi));
    for _ in 0..kmax {
        s.push(Vector::zeros(chi));
    }
    for (a, &xa) in x.iter().enumerate() {
        // Orders descend so s[k-1] is still the pre-update value.
        for k in (1..=kmax).rev() {
            let t = s[k - 1].vec_mat(&p.layers[a])?;
            s[k].axpy(xa, &t);
        }
        // s[0] never changes: the empty tuple contributes the start vector.
    }
    Ok(s)
}

/// Euclidean norms of the per-order contributions for one sample.
pub fn order_norm_profile<S: Scalar>(
    params: &ModelParams<S>,
    x: &[S],
    kmax: usize,
) -> Result<Vec<S>> {
    Ok(order_terms_seq(params, x, kmax)?
        .iter()
        .map(|v| v.norm())
        .collect())
}

/// A simple residual model evaluated with interaction orders above
/// `kmax` discarded.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedModel<'a, S> {
    pub params: &'a ModelParams<S>,
    pub kmax: usize,
}

impl<'a, S: Scalar> TruncatedModel<'a, S> {
    pub fn new(params: &'a ModelParams<S>, kmax: usize) -> Result<Self> {
        expect_sres(params)?;
        Ok(TruncatedModel { params, kmax })
    }

    /// Truncated logits by explicit enumeration.
    ///
    /// Refuses to walk more than [`TUPLE_BUDGET`] tuples unless
    /// `allow_large` is set.
    pub fn forward(&self, x: &[S], allow_large: bool) -> Result<Vector<S>> {
        let p = expect_sres(self.params)?;
        let cost = enumeration_cost(p.layers.len(), self.kmax);
        if cost > TUPLE_BUDGET && !allow_large {
            return Err(Error::CostGuard(format!(
                "enumerating {cost} tuples exceeds the budget of {TUPLE_BUDGET}; \
                 use the sequential evaluation or override explicitly"
            )));
        }
        let chi = self.params.hidden_dim();
        let mut total = Vector::zeros(chi);
        for k in 0..=self.kmax.min(p.layers.len()) {
            let term = order_term(self.params, x, k)?;
            for (t, e) in total.as_mut_slice().iter_mut().zip(term.as_slice()) {
                *t += *e;
            }
        }
        p.readout.apply(&total)
    }

    /// Truncated logits by the sequential recursion (no budget needed).
    pub fn forward_seq(&self, x: &[S]) -> Result<Vector<S>> {
        let p = expect_sres(self.params)?;
        let terms = order_terms_seq(self.params, x, self.kmax)?;
        let chi = self.params.hidden_dim();
        let mut total = Vector::zeros(chi);
        for term in &terms {
            for (t, e) in total.as_mut_slice().iter_mut().zip(term.as_slice()) {
                *t += *e;
            }
        }
        p.readout.apply(&total)
    }
}

/// Accuracy of the truncation at every order `0 ..= kmax` plus the mean
/// per-order contribution norms, in one pass over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionProfile {
    /// `mean_norms[k]` = mean over samples of the order-`k` contribution
    /// norm.
    pub mean_norms: Vec<f64>,
    /// `cumulative_acc[k]` = accuracy when orders `> k` are discarded.
    pub cumulative_acc: Vec<f64>,
}

/// Header of the expansion report table.
pub const EXPANSION_HEADER: &str = "k\tnorm\tcumulative_acc";

pub fn write_expansion_report(profile: &ExpansionProfile, out: &mut dyn std::io::Write) -> Result<()> {
    writeln!(out, "{EXPANSION_HEADER}")?;
    for k in 0..profile.mean_norms.len() {
        writeln!(
            out,
            "{k}\t{:.6}\t{:.4}",
            profile.mean_norms[k], profile.cumulative_acc[k]
        )?;
    }
    Ok(())
}

/// Evaluate the expansion over a dataset via the sequential recursion.
pub fn expansion_profile<S: Scalar>(
    params: &ModelParams<S>,
    ds: &Dataset<S>,
    kmax: usize,
) -> Result<ExpansionProfile> {
    let p = expect_sres(params)?;
    if ds.num_features() != p.layers.len() {
        return Err(Error::Consistency(format!(
            "dataset has {} features but model has {} layers",
            ds.num_features(),
            p.layers.len()
        )));
    }
    if ds.is_empty() {
        return Err(Error::Consistency("cannot profile an empty dataset".into()));
    }
    let kmax = kmax.min(p.layers.len());
    let chi = params.hidden_dim();
    let mut norm_sums = vec![0.0f64; kmax + 1];
    let mut correct = vec![0usize; kmax + 1];
    for i in 0..ds.len() {
        let terms = order_terms_seq(params, ds.features_of(i), kmax)?;
        let mut running = Vector::zeros(chi);
        for (k, term) in terms.iter().enumerate() {
            norm_sums[k] += term.norm().as_f64();
            for (r, e) in running.as_mut_slice().iter_mut().zip(term.as_slice()) {
                *r += *e;
            }
            let logits = p.readout.apply(&running)?;
            if crate::training::argmax(logits.as_slice()) == ds.label(i) {
                correct[k] += 1;
            }
        }
    }
    let n = ds.len() as f64;
    Ok(ExpansionProfile {
        mean_norms: norm_sums.iter().map(|s| s / n).collect(),
        cumulative_acc: correct.iter().map(|&c| c as f64 / n).collect(),
    })
}

/// Forward + backward of the *truncated* model over a batch, for
/// training under an interaction-order budget.
///
/// The recursion lattice `s_k^{(n)}` is stored for all layers, and its
/// adjoint propagated by hand:
///
/// ```text
/// s_k^{(n)} = s_k^{(n-1)} + diag(x_n) s_{k-1}^{(n-1)} W_n
/// dW_n      = sum_k (s_{k-1}^{(n-1)})^T diag(x_n) gs_k^{(n)}
/// gs_k^{(n-1)} = gs_k^{(n)} + diag(x_n) gs_{k+1}^{(n)} W_n^T
/// ```
pub fn truncated_backward<S: Scalar>(
    params: &ModelParams<S>,
    xcols: &Matrix<S>,
    labels: &[u8],
    kmax: usize,
) -> Result<BatchResult<S>> {
    let p = expect_sres(params)?;
    let n_layers = p.layers.len();
    let batch = xcols.cols();
    if xcols.rows() != n_layers {
        return Err(Error::shape(
            "truncated backward",
            format!("{} feature rows", xcols.rows()),
            format!("{n_layers} layers"),
        ));
    }
    if labels.len() != batch {
        return Err(Error::Consistency(format!(
            "{batch} batch samples but {} labels",
            labels.len()
        )));
    }
    let kmax = kmax.min(n_layers);
    let chi = params.hidden_dim();

    // Forward lattice: lattice[n][k-1] = s_k after n layers (k >= 1);
    // s_0 is the all-ones matrix at every depth and is not stored.
    let ones = {
        let mut m = Matrix::zeros(batch, chi);
        m.fill(S::one());
        m
    };
    let mut lattice: Vec<Vec<Matrix<S>>> = Vec::with_capacity(n_layers + 1);
    lattice.push((0..kmax).map(|_| Matrix::zeros(batch, chi)).collect());
    for n in 0..n_layers {
        let xrow: Vec<S> = xcols.row(n).to_vec();
        let prev = &lattice[n];
        let mut next: Vec<Matrix<S>> = Vec::with_capacity(kmax);
        for k in 1..=kmax {
            let source = if k == 1 { &ones } else { &prev[k - 2] };
            let prod = source.matmul(&p.layers[n])?;
            let mut s = prev[k - 1].clone();
            for b in 0..batch {
                let x = xrow[b];
                let srow = s.row_mut(b);
                let prow = prod.row(b);
                for j in 0..chi {
                    srow[j] += x * prow[j];
                }
            }
            next.push(s);
        }
        lattice.push(next);
    }

    // Readout on the truncated sum.
    let mut total = ones.clone();
    for k in 0..kmax {
        for (t, e) in total
            .data_mut()
            .iter_mut()
            .zip(lattice[n_layers][k].data())
        {
            *t += *e;
        }
    }
    let mut logits = total.matmul(&p.readout.weights)?;
    for b in 0..batch {
        for (l, &bias) in logits.row_mut(b).iter_mut().zip(p.readout.bias.as_slice()) {
            *l += bias;
        }
    }
    let (loss, correct, dlogits) = {
        let mut dl = Matrix::zeros(batch, logits.cols());
        let mut total_loss = S::zero();
        let mut corr = 0usize;
        for b in 0..batch {
            let row = Vector::from_vec(logits.row(b).to_vec());
            let (l, g) = crate::training::cross_entropy(&row, labels[b] as usize)?;
            total_loss += l;
            if crate::training::argmax(logits.row(b)) == labels[b] as usize {
                corr += 1;
            }
            dl.row_mut(b).copy_from_slice(g.as_slice());
        }
        let inv = S::one() / S::from_usize(batch).expect("batch fits in scalar");
        total_loss *= inv;
        dl.scale_in_place(inv);
        (total_loss, corr, dl)
    };

    let mut grads = Gradients::zeros_like(params);
    let Gradients::SResMps {
        layers: glayers,
        readout_w,
        readout_b,
    } = &mut grads
    else {
        unreachable!("gradient stack built from the same params")
    };
    *readout_w = total.t_matmul(&dlogits)?;
    *readout_b = dlogits.column_sums();
    let gu = dlogits.matmul_bt(&p.readout.weights)?;

    // Every stored order receives the readout adjoint directly.
    let mut gs: Vec<Matrix<S>> = (0..kmax).map(|_| gu.clone()).collect();
    for n in (0..n_layers).rev() {
        let xrow: Vec<S> = xcols.row(n).to_vec();
        let prev = &lattice[n];
        let mut scaled: Vec<Matrix<S>> = Vec::with_capacity(kmax);
        for k in 1..=kmax {
            // diag(x) gs_k, shared by the weight and state adjoints.
            let mut e = gs[k - 1].clone();
            for b in 0..batch {
                let x = xrow[b];
                for v in e.row_mut(b) {
                    *v *= x;
                }
            }
            scaled.push(e);
        }
        let mut gw = Matrix::zeros(chi, chi);
        for k in 1..=kmax {
            let source = if k == 1 { &ones } else { &prev[k - 2] };
            let contrib = source.t_matmul(&scaled[k - 1])?;
            for (g, c) in gw.data_mut().iter_mut().zip(contrib.data()) {
                *g += *c;
            }
        }
        glayers[n] = gw;
        // gs_k <- gs_k + diag(x) gs_{k+1} W^T (k < kmax; top order only
        // propagates through the identity path).
        for k in 1..kmax {
            let back = scaled[k].matmul_bt(&p.layers[n])?;
            for (g, c) in gs[k - 1].data_mut().iter_mut().zip(back.data()) {
                *g += *c;
            }
        }
    }

    Ok(BatchResult {
        loss,
        correct,
        grads,
    })
}

/// Accuracy of the truncated model on a dataset (sequential route).
pub fn truncated_accuracy<S: Scalar>(
    params: &ModelParams<S>,
    ds: &Dataset<S>,
    kmax: usize,
) -> Result<f64> {
    let profile = expansion_profile(params, ds, kmax)?;
    Ok(*profile
        .cumulative_acc
        .last()
        .expect("profile has kmax + 1 rows"))
}

/// Train a simple residual model *as* its order-`kmax` truncation:
/// forward, loss, and gradients all come from the truncated recursion,
/// so the surviving low-order terms adapt to carry the classification
/// on their own.  Returns the adapted parameters and their truncated
/// test accuracy.
pub fn retrain_truncated<S: Scalar>(
    params: ModelParams<S>,
    kmax: usize,
    cfg: &crate::training::TrainConfig,
    epochs: usize,
    train: &Dataset<S>,
    test: &Dataset<S>,
) -> Result<(ModelParams<S>, f64)> {
    expect_sres(&params)?;
    cfg.validate()?;
    params.validate()?;
    if train.num_features() != params.num_features() {
        return Err(Error::Consistency(format!(
            "training set has {} features but model has {} layers",
            train.num_features(),
            params.num_features()
        )));
    }
    let mut params = params;
    let mut optimizer = crate::training::Optimizer::new(cfg);
    let batches = crate::data::BatchIterator::new(
        train.len(),
        cfg.batch_size,
        crate::rng::SeedTree::new(cfg.seed).derive("truncated-retrain", &[]),
    )?;
    for epoch in 0..epochs {
        for (batch_idx, chunk) in batches.epoch(epoch).iter().enumerate() {
            let (xcols, labels) = crate::training::gather_batch(train, chunk);
            let result = truncated_backward(&params, &xcols, &labels, kmax)?;
            if !result.loss.as_f64().is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: batch_idx + 1,
                });
            }
            optimizer.step(&mut params, &result.grads, None)?;
        }
    }
    let acc = truncated_accuracy(&params, test, kmax)?;
    Ok((params, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, mps_from_sresmps, ModelKind, ModelSpec};
    use crate::training::{gather_batch, test_support::toy};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sres(n: usize, chi: usize, c: usize, std: f64, seed: u64) -> ModelParams<f64> {
        let spec = ModelSpec {
            init_std: std,
            ..ModelSpec::new(ModelKind::SResMps, n, chi, c)
        };
        init_params(&spec, seed).unwrap()
    }

    fn random_x(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn binomial_matches_pascal() {
        assert_eq!(binomial(8, 0), 1);
        assert_eq!(binomial(8, 3), 56);
        assert_eq!(binomial(8, 8), 1);
        assert_eq!(binomial(8, 9), 0);
        assert_eq!(binomial(784, 2), 306_936);
        for n in 1..12usize {
            for k in 1..n {
                assert_eq!(binomial(n, k), binomial(n - 1, k - 1) + binomial(n - 1, k));
            }
        }
    }

    #[test]
    fn order_zero_is_the_start_vector() {
        let params = sres(5, 3, 2, 0.4, 1);
        let x = vec![0.5; 5];
        let t = order_term(&params, &x, 0).unwrap();
        assert_eq!(t.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn order_one_sums_single_layer_responses() {
        // By hand: sum_a x_a * (ones W_a).
        let params = sres(4, 3, 2, 0.4, 2);
        let ModelParams::SResMps(p) = &params else {
            unreachable!()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_x(4, &mut rng);
        let mut expect = Vector::zeros(3);
        for a in 0..4 {
            let t = Vector::ones(3).vec_mat(&p.layers[a]).unwrap();
            expect.axpy(x[a], &t);
        }
        let got = order_term(&params, &x, 1).unwrap();
        for (g, e) in got.as_slice().iter().zip(expect.as_slice()) {
            assert_relative_eq!(g, e, max_relative = 1e-13);
        }
    }

    #[test]
    fn zero_weights_kill_every_positive_order() {
        let params = sres(6, 4, 2, 0.0, 0);
        let x = vec![0.7; 6];
        for k in 1..=3 {
            let t = order_term(&params, &x, k).unwrap();
            assert!(t.as_slice().iter().all(|&v| v == 0.0));
        }
        let profile = order_norm_profile(&params, &x, 3).unwrap();
        assert_relative_eq!(profile[0], 2.0, max_relative = 1e-15); // sqrt(4)
        assert_eq!(&profile[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn order_term_is_homogeneous_of_degree_k_in_the_weights() {
        let params = sres(7, 3, 2, 0.35, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_x(7, &mut rng);
        let lambda = 1.7f64;
        let scaled = {
            let mut sp = params.clone();
            if let ModelParams::SResMps(p) = &mut sp {
                for w in &mut p.layers {
                    w.scale_in_place(lambda);
                }
            }
            sp
        };
        for k in 0..=3usize {
            let base = order_term(&params, &x, k).unwrap();
            let big = order_term(&scaled, &x, k).unwrap();
            let factor = lambda.powi(k as i32);
            for (b, g) in base.as_slice().iter().zip(big.as_slice()) {
                let expect = b * factor;
                if expect.abs() > 1e-12 {
                    assert_relative_eq!(g, &expect, max_relative = 1e-12);
                } else {
                    assert!((g - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn order_term_is_multilinear_in_each_pixel() {
        // Degree <= 1 in every coordinate: the value at the midpoint
        // equals the mean of the endpoint values.
        let params = sres(6, 3, 2, 0.4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = random_x(6, &mut rng);
        for coord in [0usize, 3, 5] {
            for k in 1..=2usize {
                let at = |v: f64| {
                    let mut x = base.clone();
                    x[coord] = v;
                    order_term(&params, &x, k).unwrap()
                };
                let lo = at(0.0);
                let hi = at(1.0);
                let mid = at(0.5);
                for j in 0..3 {
                    let expect = 0.5 * (lo.get(j) + hi.get(j));
                    assert_relative_eq!(mid.get(j), expect, max_relative = 1e-12, epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn sequential_route_matches_enumeration() {
        let params = sres(8, 4, 3, 0.45, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let x = random_x(8, &mut rng);
            let seq = order_terms_seq(&params, &x, 5).unwrap();
            for k in 0..=5usize {
                let enumerated = order_term(&params, &x, k).unwrap();
                for (s, e) in seq[k].as_slice().iter().zip(enumerated.as_slice()) {
                    assert_relative_eq!(s, e, max_relative = 1e-12, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn full_order_truncation_recovers_the_exact_forward() {
        for (n, chi) in [(6, 3), (8, 4)] {
            let params = sres(n, chi, 3, 0.5, 10 + n as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            for _ in 0..4 {
                let x = random_x(n, &mut rng);
                let full = params.forward(&x).unwrap();
                let trunc = TruncatedModel::new(&params, n).unwrap();
                let via_enum = trunc.forward(&x, false).unwrap();
                let via_seq = trunc.forward_seq(&x).unwrap();
                for j in 0..full.len() {
                    let denom = full.get(j).abs().max(1.0);
                    assert!(
                        (via_enum.get(j) - full.get(j)).abs() / denom < 1e-10,
                        "enumeration at kmax=N must equal the layer loop"
                    );
                    assert!(
                        (via_seq.get(j) - full.get(j)).abs() / denom < 1e-10,
                        "recursion at kmax=N must equal the layer loop"
                    );
                }
            }
        }
    }

    #[test]
    fn cost_guard_refuses_oversized_enumerations() {
        // C(120, 5) is about 1.9e8 tuples, over the budget.
        let params = sres(120, 1, 2, 0.1, 0);
        let x = vec![0.5; 120];
        let trunc = TruncatedModel::new(&params, 5).unwrap();
        let err = trunc.forward(&x, false).unwrap_err();
        assert!(matches!(err, Error::CostGuard(_)), "got {err:?}");
        // The sequential route has no such limit.
        assert!(trunc.forward_seq(&x).is_ok());
        // Small enumerations run with the override flag too.
        let small = sres(6, 2, 2, 0.1, 1);
        let t2 = TruncatedModel::new(&small, 3).unwrap();
        assert!(t2.forward(&[0.5; 6], true).is_ok());
    }

    #[test]
    fn tuple_count_per_order_is_binomial() {
        // With every weight matrix equal to [[1]] (width 1) and all
        // pixels 1, each tuple contributes exactly 1, so the order-k
        // term counts the tuples.
        let n = 9;
        let mut params = sres(n, 1, 2, 0.0, 0);
        if let ModelParams::SResMps(p) = &mut params {
            for w in &mut p.layers {
                w.fill(1.0);
            }
        }
        let x = vec![1.0; n];
        for k in 0..=n {
            let t = order_term(&params, &x, k).unwrap();
            assert_eq!(t.get(0), binomial(n, k) as f64, "order {k}");
        }
    }

    #[test]
    fn small_init_scales_make_order_norms_decay() {
        let params = sres(10, 8, 2, 1e-3, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = random_x(10, &mut rng);
        let norms = order_norm_profile(&params, &x, 4).unwrap();
        for k in 1..4 {
            assert!(
                norms[k + 1] < norms[k],
                "norms should fall with the order at small scales: {norms:?}"
            );
        }
    }

    #[test]
    fn retraining_a_truncation_recovers_accuracy() {
        use crate::training::TrainConfig;
        let train = toy(100, 8, 2, 41);
        let test = toy(40, 8, 2, 42);
        let spec = crate::models::ModelSpec::new(ModelKind::SResMps, 8, 6, 2);
        let params = init_params::<f64>(&spec, 5).unwrap();
        let cfg = TrainConfig {
            batch_size: 20,
            learning_rate: 0.01,
            dropout: 0.0,
            seed: 5,
            hidden_dim: 6,
            ..TrainConfig::default()
        };
        let before = truncated_accuracy(&params, &test, 1).unwrap();
        let (adapted, after) =
            retrain_truncated(params, 1, &cfg, 25, &train, &test).unwrap();
        assert!(
            after >= before,
            "training the first-order model should not lose accuracy: {before} -> {after}"
        );
        assert!(after >= 0.9, "first-order model should fit the toy bands, got {after}");
        assert_eq!(adapted.kind(), ModelKind::SResMps);
        // Determinism of the retraining loop.
        let params2 = init_params::<f64>(&spec, 5).unwrap();
        let (adapted2, after2) =
            retrain_truncated(params2, 1, &cfg, 25, &train, &test).unwrap();
        assert_eq!(adapted, adapted2);
        assert_eq!(after, after2);
    }

    #[test]
    fn truncated_gradients_match_finite_differences() {
        let n = 6;
        let chi = 3;
        let kmax = 2;
        let mut params = sres(n, chi, 3, 0.4, 11);
        let ds = toy(5, n, 3, 77);
        let indices: Vec<u32> = (0..5).collect();
        let (xcols, labels) = gather_batch(&ds, &indices);
        let analytic = truncated_backward(&params, &xcols, &labels, kmax).unwrap();
        let gs: Vec<Vec<f64>> = analytic
            .grads
            .tensors()
            .into_iter()
            .map(|t| t.to_vec())
            .collect();
        let delta = 1e-5;
        for ti in 0..gs.len() {
            for ei in (0..gs[ti].len()).step_by(2) {
                let orig = params.tensors_mut()[ti].0[ei];
                params.tensors_mut()[ti].0[ei] = orig + delta;
                let up = truncated_backward(&params, &xcols, &labels, kmax)
                    .unwrap()
                    .loss;
                params.tensors_mut()[ti].0[ei] = orig - delta;
                let down = truncated_backward(&params, &xcols, &labels, kmax)
                    .unwrap()
                    .loss;
                params.tensors_mut()[ti].0[ei] = orig;
                let numeric = (up - down) / (2.0 * delta);
                let denom = gs[ti][ei].abs().max(numeric.abs());
                if denom >= 1e-6 {
                    let rel = (gs[ti][ei] - numeric).abs() / denom;
                    assert!(
                        rel < 1e-5,
                        "tensor {ti} entry {ei}: analytic {} vs numeric {numeric}",
                        gs[ti][ei]
                    );
                } else {
                    assert!((gs[ti][ei] - numeric).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn truncated_loss_matches_truncated_forward() {
        let n = 7;
        let params = sres(n, 3, 2, 0.4, 13);
        let ds = toy(6, n, 2, 99);
        let indices: Vec<u32> = (0..6).collect();
        let (xcols, labels) = gather_batch(&ds, &indices);
        let result = truncated_backward(&params, &xcols, &labels, 2).unwrap();
        // Recompute the mean loss from per-sample truncated logits.
        let trunc = TruncatedModel::new(&params, 2).unwrap();
        let mut expect = 0.0;
        for i in 0..6 {
            let logits = trunc.forward_seq(ds.features_of(i)).unwrap();
            let (l, _) = crate::training::cross_entropy(&logits, ds.label(i)).unwrap();
            expect += l;
        }
        expect /= 6.0;
        assert_relative_eq!(result.loss, expect, max_relative = 1e-12);
    }

    #[test]
    fn expansion_profile_shapes_and_order_zero_band() {
        let params = sres(8, 4, 3, 0.1, 15);
        let ds = toy(12, 8, 3, 101);
        let profile = expansion_profile(&params, &ds, 3).unwrap();
        assert_eq!(profile.mean_norms.len(), 4);
        assert_eq!(profile.cumulative_acc.len(), 4);
        // Order 0 is the constant ones vector for every sample.
        assert_relative_eq!(profile.mean_norms[0], 2.0, max_relative = 1e-15);
        assert!(profile
            .cumulative_acc
            .iter()
            .all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn expansion_rejects_non_residual_models() {
        let params = sres(4, 3, 2, 0.2, 0);
        let ModelParams::SResMps(p) = &params else {
            unreachable!()
        };
        let mps = ModelParams::Mps(mps_from_sresmps(p));
        assert!(order_term(&mps, &[0.5; 4], 1).is_err());
        assert!(TruncatedModel::new(&mps, 2).is_err());
    }
}
