//! Model introspection: per-core channel norms, hidden-state
//! trajectory export, and initialization-scale stability sweeps.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{init_params, mps_from_sresmps, ModelParams, ModelSpec, MpsCore};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::training::{evaluate, TrainConfig, Trainer};

/// Mean absolute deviation of each channel slice from the identity:
/// `q_c = (1/chi^2) * sum_{jk} |T_c[j][k] - delta_{jk}|`.
///
/// Both channels subtract the identity, so a channel acting as a pure
/// skip connection scores exactly zero and the score grows with any
/// departure from it.
pub fn channel_norm<S: Scalar>(core: &MpsCore<S>) -> (S, S) {
    let chi = core.channel1.rows();
    let denom = S::from_usize(chi * chi).expect("chi^2 fits in scalar");
    let q = |m: &crate::linalg::Matrix<S>| {
        let mut acc = S::zero();
        for j in 0..chi {
            let row = m.row(j);
            for (k, &v) in row.iter().enumerate() {
                let d = if j == k { v - S::one() } else { v };
                acc += d.abs();
            }
        }
        acc / denom
    };
    (q(&core.channel1), q(&core.channel2))
}

/// Channel norms of every core of a two-channel model.
///
/// Simple residual models are rewritten to their two-channel form
/// first; activated models have no such form and are rejected.
pub fn channel_norm_profile<S: Scalar>(params: &ModelParams<S>) -> Result<Vec<(S, S)>> {
    match params {
        ModelParams::Mps(p) => Ok(p.cores.iter().map(channel_norm).collect()),
        ModelParams::SResMps(p) => {
            let mps = mps_from_sresmps(p);
            Ok(mps.cores.iter().map(channel_norm).collect())
        }
        ModelParams::AResMps(_) => Err(Error::Domain(
            "channel norms are defined for two-channel cores; \
             activated models have no exact two-channel form"
                .into(),
        )),
    }
}

/// Fraction of layers on which the second channel has the larger norm.
pub fn channel2_dominance<S: Scalar>(profile: &[(S, S)]) -> f64 {
    if profile.is_empty() {
        return 0.0;
    }
    let wins = profile.iter().filter(|(q1, q2)| q2 > q1).count();
    wins as f64 / profile.len() as f64
}

/// Header of the channel-norm table.
pub const CHANNEL_HEADER: &str = "layer\tq1\tq2";

pub fn write_channel_report<S: Scalar>(
    profile: &[(S, S)],
    out: &mut dyn std::io::Write,
) -> Result<()> {
    writeln!(out, "{CHANNEL_HEADER}")?;
    for (layer, (q1, q2)) in profile.iter().enumerate() {
        writeln!(out, "{layer}\t{:.6}\t{:.6}", q1.as_f64(), q2.as_f64())?;
    }
    Ok(())
}

/// Write the hidden-state path of selected samples as TSV, one state
/// per row: `sample`, `label`, `step` (0 = start vector), then the
/// state components.  With `endpoints_only` only the final state of
/// each sample is written, which is the input format for external
/// embedding tools.
pub fn export_trajectory<S: Scalar>(
    params: &ModelParams<S>,
    ds: &Dataset<S>,
    samples: &[usize],
    endpoints_only: bool,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let chi = params.hidden_dim();
    write!(out, "sample\tlabel\tstep")?;
    for j in 0..chi {
        write!(out, "\th{j}")?;
    }
    writeln!(out)?;
    for &i in samples {
        if i >= ds.len() {
            return Err(Error::Consistency(format!(
                "sample {i} out of range for {} samples",
                ds.len()
            )));
        }
        let (_, trace) = params.forward_traced(ds.features_of(i))?;
        let states: Vec<&crate::linalg::Vector<S>> = if endpoints_only {
            vec![trace.endpoint()]
        } else {
            trace.states.iter().collect()
        };
        let base_step = if endpoints_only {
            trace.states.len() - 1
        } else {
            0
        };
        for (si, state) in states.iter().enumerate() {
            write!(out, "{i}\t{}\t{}", ds.label(i), base_step + si)?;
            for &v in state.as_slice() {
                write!(out, "\t{:.6}", v.as_f64())?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Mean pairwise Euclidean distance between final hidden states,
/// within classes versus across classes, over up to `per_class` samples
/// of each class.  On a trained model the within-class mean is the
/// smaller of the two.
pub fn endpoint_separation<S: Scalar>(
    params: &ModelParams<S>,
    ds: &Dataset<S>,
    per_class: usize,
) -> Result<(f64, f64)> {
    let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for i in 0..ds.len() {
        let c = ds.label(i);
        if chosen[c].len() < per_class {
            chosen[c].push(i);
        }
    }
    let mut endpoints: Vec<(usize, Vec<f64>)> = Vec::new();
    for (class, members) in chosen.iter().enumerate() {
        for &i in members {
            let (_, trace) = params.forward_traced(ds.features_of(i))?;
            let h: Vec<f64> = trace.endpoint().as_slice().iter().map(|v| v.as_f64()).collect();
            endpoints.push((class, h));
        }
    }
    if endpoints.len() < 2 {
        return Err(Error::Consistency(
            "endpoint separation needs at least two samples".into(),
        ));
    }
    let (mut within, mut cross) = ((0.0, 0usize), (0.0, 0usize));
    for a in 0..endpoints.len() {
        for b in a + 1..endpoints.len() {
            let dist = endpoints[a]
                .1
                .iter()
                .zip(&endpoints[b].1)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if endpoints[a].0 == endpoints[b].0 {
                within.0 += dist;
                within.1 += 1;
            } else {
                cross.0 += dist;
                cross.1 += 1;
            }
        }
    }
    if within.1 == 0 || cross.1 == 0 {
        return Err(Error::Consistency(
            "endpoint separation needs both same-class and cross-class pairs".into(),
        ));
    }
    Ok((within.0 / within.1 as f64, cross.0 / cross.1 as f64))
}

/// One row of an initialization-scale sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    /// 1-based epoch the accuracy was measured after.
    pub epoch: usize,
    pub test_acc: f64,
    /// True when the run aborted on non-finite values; `test_acc` is
    /// then the random-guess rate.
    pub diverged: bool,
}

/// Header of the sweep table.
pub const SWEEP_HEADER: &str = "epsilon\tepoch\ttest_acc";

pub fn write_sweep_report(rows: &[SweepRow], out: &mut dyn std::io::Write) -> Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(out, "{}\t{}\t{:.4}", r.epsilon, r.epoch, r.test_acc)?;
    }
    Ok(())
}

/// Train one fresh model per weight-noise scale and record held-out
/// accuracy at the checkpoint epochs.
///
/// Each sweep point runs on its own derived seed, so points are
/// independent jobs.  A run that produces non-finite values stops
/// early; its remaining checkpoints are reported at the random-guess
/// rate `1 / num_classes` and flagged.
pub fn init_sweep<S: Scalar>(
    spec: &ModelSpec,
    eps_values: &[f64],
    checkpoints: &[usize],
    cfg: &TrainConfig,
    train: &Dataset<S>,
    test: &Dataset<S>,
    mut progress: Option<&mut dyn FnMut(f64, usize, f64)>,
) -> Result<Vec<SweepRow>> {
    if eps_values.is_empty() {
        return Err(Error::Config("sweep needs at least one scale".into()));
    }
    if eps_values.iter().any(|e| *e < 0.0 || !e.is_finite()) {
        return Err(Error::Config(
            "sweep scales must be finite and non-negative".into(),
        ));
    }
    if checkpoints.is_empty() || checkpoints.windows(2).any(|w| w[0] >= w[1]) || checkpoints[0] == 0
    {
        return Err(Error::Config(
            "checkpoint epochs must be positive and strictly increasing".into(),
        ));
    }
    let seeds = SeedTree::new(cfg.seed);
    let chance = 1.0 / train.num_classes() as f64;
    let last_epoch = *checkpoints.last().expect("checked non-empty");
    let mut rows = Vec::with_capacity(eps_values.len() * checkpoints.len());
    for (pi, &eps) in eps_values.iter().enumerate() {
        let point_seed = seeds.derive("init-sweep", &[pi as u64]);
        let point_spec = ModelSpec {
            init_std: eps,
            ..spec.clone()
        };
        let point_cfg = TrainConfig {
            epochs: last_epoch,
            init_std: eps,
            seed: point_seed,
            ..cfg.clone()
        };
        let params = init_params::<S>(&point_spec, point_seed)?;
        let mut trainer = Trainer::new(params, point_cfg, train, test, None)?;
        let mut next = 0usize;
        'epochs: for epoch in 1..=last_epoch {
            match trainer.run_epoch() {
                Ok(metrics) => {
                    if next < checkpoints.len() && checkpoints[next] == epoch {
                        rows.push(SweepRow {
                            epsilon: eps,
                            epoch,
                            test_acc: metrics.test_acc,
                            diverged: false,
                        });
                        if let Some(cb) = progress.as_deref_mut() {
                            cb(eps, epoch, metrics.test_acc);
                        }
                        next += 1;
                    }
                }
                Err(Error::Diverged { .. }) => {
                    for &cp in &checkpoints[next..] {
                        rows.push(SweepRow {
                            epsilon: eps,
                            epoch: cp,
                            test_acc: chance,
                            diverged: true,
                        });
                        if let Some(cb) = progress.as_deref_mut() {
                            cb(eps, cp, chance);
                        }
                    }
                    next = checkpoints.len();
                    break 'epochs;
                }
                Err(other) => return Err(other),
            }
        }
        debug_assert_eq!(next, checkpoints.len());
    }
    Ok(rows)
}

/// Convenience wrapper: final evaluation-mode accuracy of a model.
pub fn test_accuracy<S: Scalar>(params: &ModelParams<S>, ds: &Dataset<S>) -> Result<f64> {
    Ok(evaluate(params, ds)?.accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::models::{FeatureMapKind, ModelKind, ModelSpec};
    use crate::training::test_support::toy;
    use approx::assert_relative_eq;

    fn core(c1: Matrix<f64>, c2: Matrix<f64>) -> MpsCore<f64> {
        MpsCore {
            channel1: c1,
            channel2: c2,
        }
    }

    #[test]
    fn identity_channel_scores_zero() {
        let c = core(Matrix::identity(3), Matrix::zeros(3, 3));
        let (q1, q2) = channel_norm(&c);
        assert_eq!(q1, 0.0);
        // All-zero channel misses the identity on the diagonal: 3/9.
        assert_relative_eq!(q2, 1.0 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn hand_evaluated_channel_norm() {
        let t2 = Matrix::from_vec(2, 2, vec![0.1, 0.1, 0.1, 0.1]).unwrap();
        let c = core(Matrix::identity(2), t2);
        let (q1, q2) = channel_norm(&c);
        assert_eq!(q1, 0.0);
        // (|0.1-1| + 0.1 + 0.1 + |0.1-1|) / 4 = 0.5
        assert_relative_eq!(q2, 0.5, max_relative = 1e-15);
    }

    #[test]
    fn channel_norm_is_permutation_covariant() {
        let c1 = Matrix::from_vec(3, 3, (0..9).map(|i| i as f64 * 0.1).collect()).unwrap();
        let c2 = Matrix::from_vec(3, 3, (0..9).map(|i| (8 - i) as f64 * 0.07).collect()).unwrap();
        let base = core(c1.clone(), c2.clone());
        // Apply the permutation (0 1 2) -> (2 0 1) to rows and columns
        // of both slices.
        let perm = [2usize, 0, 1];
        let permute = |m: &Matrix<f64>| {
            let mut out = Matrix::zeros(3, 3);
            for i in 0..3 {
                for j in 0..3 {
                    out.set(perm[i], perm[j], m.get(i, j));
                }
            }
            out
        };
        let permuted = core(permute(&c1), permute(&c2));
        let (a1, a2) = channel_norm(&base);
        let (b1, b2) = channel_norm(&permuted);
        assert_relative_eq!(a1, b1, max_relative = 1e-15);
        assert_relative_eq!(a2, b2, max_relative = 1e-15);
    }

    #[test]
    fn profile_of_simple_residual_model_uses_its_two_channel_form() {
        let spec = ModelSpec {
            init_std: 0.2,
            ..ModelSpec::new(ModelKind::SResMps, 5, 4, 3)
        };
        let params = init_params::<f64>(&spec, 3).unwrap();
        let profile = channel_norm_profile(&params).unwrap();
        assert_eq!(profile.len(), 5);
        // The rewriting puts the exact identity in channel 1.
        for (q1, q2) in &profile {
            assert_eq!(*q1, 0.0);
            assert!(*q2 > 0.0);
        }
        assert_eq!(channel2_dominance(&profile), 1.0);
    }

    #[test]
    fn activated_models_have_no_channel_profile() {
        let spec = ModelSpec::new(ModelKind::AResMps, 4, 3, 2);
        let params = init_params::<f64>(&spec, 0).unwrap();
        assert!(matches!(
            channel_norm_profile(&params),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn channel_report_format_is_pinned() {
        let profile = vec![(0.0f64, 0.5), (0.25, 0.125)];
        let mut buf = Vec::new();
        write_channel_report(&profile, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "layer\tq1\tq2\n0\t0.000000\t0.500000\n1\t0.250000\t0.125000\n"
        );
    }

    #[test]
    fn trajectory_of_zero_input_is_constant_ones() {
        // Zero pixels make every simple residual layer an identity.
        let spec = ModelSpec {
            init_std: 0.3,
            ..ModelSpec::new(ModelKind::SResMps, 4, 3, 2)
        };
        let params = init_params::<f64>(&spec, 1).unwrap();
        let ds = Dataset::from_parts(vec![0.0; 4], vec![0u8], 4, 2).unwrap();
        let mut buf = Vec::new();
        export_trajectory(&params, &ds, &[0], false, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 5, "header plus N+1 states");
        assert_eq!(lines[0], "sample\tlabel\tstep\th0\th1\th2");
        for (step, line) in lines[1..].iter().enumerate() {
            assert_eq!(
                *line,
                format!("0\t0\t{step}\t1.000000\t1.000000\t1.000000")
            );
        }
    }

    #[test]
    fn endpoint_mode_writes_one_row_per_sample() {
        let spec = ModelSpec::new(ModelKind::SResMps, 4, 3, 2);
        let params = init_params::<f64>(&spec, 2).unwrap();
        let ds = toy(6, 4, 2, 5);
        let mut buf = Vec::new();
        export_trajectory(&params, &ds, &[0, 3, 5], true, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3);
        for line in &lines[1..] {
            let step: usize = line.split('\t').nth(2).unwrap().parse().unwrap();
            assert_eq!(step, 4, "endpoint row carries the final step index");
        }
        assert!(export_trajectory(&params, &ds, &[9], true, &mut Vec::new()).is_err());
    }

    #[test]
    fn trained_model_separates_classes_at_the_endpoint() {
        let train = toy(120, 6, 2, 11);
        let test = toy(40, 6, 2, 12);
        let spec = ModelSpec::new(ModelKind::SResMps, 6, 8, 2);
        let params = init_params::<f64>(&spec, 7).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 20,
            learning_rate: 0.01,
            dropout: 0.0,
            seed: 7,
            hidden_dim: 8,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(params, cfg, &train, &test, None).unwrap();
        for _ in 0..20 {
            trainer.run_epoch().unwrap();
        }
        let (within, cross) = endpoint_separation(trainer.params(), &test, 10).unwrap();
        assert!(
            within < cross,
            "same-class endpoints should huddle: within {within} vs cross {cross}"
        );
    }

    #[test]
    fn sweep_records_every_checkpoint_and_is_deterministic() {
        let train = toy(80, 5, 2, 21);
        let test = toy(30, 5, 2, 22);
        let spec = ModelSpec::new(ModelKind::SResMps, 5, 4, 2);
        let cfg = TrainConfig {
            batch_size: 16,
            dropout: 0.0,
            seed: 3,
            hidden_dim: 4,
            ..TrainConfig::default()
        };
        let run = || {
            init_sweep(&spec, &[0.0, 1e-3], &[1, 3], &cfg, &train, &test, None).unwrap()
        };
        let rows = run();
        assert_eq!(rows.len(), 4);
        assert_eq!(
            rows.iter().map(|r| (r.epsilon, r.epoch)).collect::<Vec<_>>(),
            vec![(0.0, 1), (0.0, 3), (1e-3, 1), (1e-3, 3)]
        );
        assert!(rows.iter().all(|r| !r.diverged));
        assert_eq!(rows, run(), "same seed, same sweep");
    }

    #[test]
    fn diverging_sweep_points_report_the_guess_rate() {
        // A deep narrow model with huge weights overflows within one
        // epoch; the sweep must swallow the abort and keep going.
        let train = toy(40, 300, 2, 31);
        let test = toy(20, 300, 2, 32);
        let spec = ModelSpec {
            feature_map: FeatureMapKind::NormOne,
            ..ModelSpec::new(ModelKind::SResMps, 300, 4, 2)
        };
        let cfg = TrainConfig {
            batch_size: 20,
            dropout: 0.0,
            seed: 5,
            hidden_dim: 4,
            ..TrainConfig::default()
        };
        let rows = init_sweep(&spec, &[40.0, 1e-3], &[1, 2], &cfg, &train, &test, None).unwrap();
        assert_eq!(rows.len(), 4);
        let diverged: Vec<_> = rows.iter().filter(|r| r.epsilon == 40.0).collect();
        assert_eq!(diverged.len(), 2);
        for r in diverged {
            assert!(r.diverged);
            assert_eq!(r.test_acc, 0.5);
        }
        assert!(rows.iter().filter(|r| r.epsilon == 1e-3).all(|r| !r.diverged));
    }

    #[test]
    fn sweep_rejects_bad_inputs() {
        let train = toy(10, 4, 2, 1);
        let test = toy(10, 4, 2, 2);
        let spec = ModelSpec::new(ModelKind::SResMps, 4, 3, 2);
        let cfg = TrainConfig {
            hidden_dim: 3,
            ..TrainConfig::default()
        };
        for (eps, cps) in [
            (vec![], vec![1usize]),
            (vec![-0.1], vec![1]),
            (vec![0.1], vec![]),
            (vec![0.1], vec![0]),
            (vec![0.1], vec![2, 2]),
        ] {
            assert!(
                matches!(
                    init_sweep(&spec, &eps, &cps, &cfg, &train, &test, None),
                    Err(Error::Config(_))
                ),
                "eps {eps:?} checkpoints {cps:?}"
            );
        }
    }

    #[test]
    fn sweep_report_format_is_pinned() {
        let rows = vec![
            SweepRow {
                epsilon: 0.001,
                epoch: 10,
                test_acc: 0.8625,
                diverged: false,
            },
            SweepRow {
                epsilon: 0.5,
                epoch: 10,
                test_acc: 0.1,
                diverged: true,
            },
        ];
        let mut buf = Vec::new();
        write_sweep_report(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epsilon\tepoch\ttest_acc\n0.001\t10\t0.8625\n0.5\t10\t0.1000\n"
        );
    }
}
