//! Magnitude pruning of the per-pixel parameter stack.
//!
//! A [`Mask`] is congruent to the model's prunable tensors (everything
//! except the readout head) and marks each entry as live (1) or pruned
//! (0).  Masks are produced by global magnitude ranking — keep the `M`
//! entries of largest absolute value across the whole stack — and are
//! enforced throughout retraining: masked entries are exactly `0.0`
//! after every optimizer step, never approximately so.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{ModelParams, TensorRole};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::training::{EpochMetrics, TrainConfig, Trainer};

/// Keep/prune marks for the prunable tensor stack, in the crate-wide
/// pinned tensor order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    tensors: Vec<Vec<u8>>,
}

impl Mask {
    /// All-live mask congruent to `params`.
    pub fn all_live<S: Scalar>(params: &ModelParams<S>) -> Self {
        Mask {
            tensors: params
                .tensors()
                .into_iter()
                .filter(|(_, role)| *role == TensorRole::Residual)
                .map(|(t, _)| vec![1u8; t.len()])
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[u8]> {
        self.tensors.iter().map(|t| t.as_slice()).collect()
    }

    /// Number of live entries.
    pub fn live_count(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.iter().filter(|&&b| b != 0).count())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Verify this mask matches the prunable stack of `params`.
    pub fn check_congruent<S: Scalar>(&self, params: &ModelParams<S>) -> Result<()> {
        let shapes: Vec<usize> = params
            .tensors()
            .into_iter()
            .filter(|(_, role)| *role == TensorRole::Residual)
            .map(|(t, _)| t.len())
            .collect();
        let mine: Vec<usize> = self.tensors.iter().map(|t| t.len()).collect();
        if shapes != mine {
            return Err(Error::Consistency(format!(
                "mask shape {mine:?} does not match prunable stack {shapes:?}"
            )));
        }
        Ok(())
    }

    /// Zero every masked entry of the prunable stack in place.
    pub fn apply<S: Scalar>(&self, params: &mut ModelParams<S>) {
        let mut idx = 0;
        for (tensor, role) in params.tensors_mut() {
            if role != TensorRole::Residual {
                continue;
            }
            for (w, &keep) in tensor.iter_mut().zip(&self.tensors[idx]) {
                if keep == 0 {
                    *w = S::zero();
                }
            }
            idx += 1;
        }
    }
}

/// Mask keeping the `keep` entries of largest `|w|` across the whole
/// prunable stack.
///
/// Ties in magnitude are broken deterministically: earlier tensors (in
/// the pinned order), then earlier flat positions, win.
pub fn magnitude_mask<S: Scalar>(params: &ModelParams<S>, keep: usize) -> Result<Mask> {
    let residual: Vec<&[S]> = params
        .tensors()
        .into_iter()
        .filter(|(_, role)| *role == TensorRole::Residual)
        .map(|(t, _)| t)
        .collect();
    let total: usize = residual.iter().map(|t| t.len()).sum();
    if keep > total {
        return Err(Error::Domain(format!(
            "cannot keep {keep} of {total} prunable weights"
        )));
    }
    let mut ranked: Vec<(S, u32, u32)> = Vec::with_capacity(total);
    for (ti, t) in residual.iter().enumerate() {
        for (ei, w) in t.iter().enumerate() {
            ranked.push((w.abs(), ti as u32, ei as u32));
        }
    }
    // Sort by magnitude descending, position ascending for ties.
    ranked.sort_unstable_by(|a, b| {
        b.0.total_order(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut tensors: Vec<Vec<u8>> = residual.iter().map(|t| vec![0u8; t.len()]).collect();
    for &(_, ti, ei) in ranked.iter().take(keep) {
        tensors[ti as usize][ei as usize] = 1;
    }
    Ok(Mask { tensors })
}

/// One row of a pruning report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneStep {
    /// Live weights after this step.
    pub kept: usize,
    /// Evaluation-mode accuracy on the training set after retraining.
    pub train_acc: f64,
    /// Evaluation-mode accuracy on the test set after retraining.
    pub test_acc: f64,
}

/// Header of the pruning report table.
pub const PRUNE_HEADER: &str = "M\ttrain_acc\ttest_acc";

pub fn write_prune_report(steps: &[PruneStep], out: &mut dyn std::io::Write) -> Result<()> {
    writeln!(out, "{PRUNE_HEADER}")?;
    for s in steps {
        writeln!(out, "{}\t{:.4}\t{:.4}", s.kept, s.train_acc, s.test_acc)?;
    }
    Ok(())
}

/// Per-epoch callback for [`prune_and_retrain`]: receives the active
/// stage's kept-weight budget and the metrics of the epoch just run.
pub type PruneProgress<'a> = &'a mut dyn FnMut(usize, &EpochMetrics);

/// Iterative magnitude pruning: for each `M` in the (strictly
/// decreasing) schedule, re-rank the current weights, keep the top `M`,
/// retrain under the frozen mask for `retrain_epochs`, and record
/// accuracies.
///
/// Each retraining step uses a fresh optimizer and a shuffle seed
/// derived from `(cfg.seed, step index)`, so the whole schedule is a
/// pure function of its inputs.
pub fn prune_and_retrain<S: Scalar>(
    params: ModelParams<S>,
    schedule: &[usize],
    cfg: &TrainConfig,
    retrain_epochs: usize,
    train_ds: &Dataset<S>,
    test_ds: &Dataset<S>,
    mut progress: Option<PruneProgress<'_>>,
) -> Result<(ModelParams<S>, Vec<PruneStep>)> {
    if schedule.is_empty() {
        return Err(Error::Domain("empty pruning schedule".into()));
    }
    if retrain_epochs == 0 {
        return Err(Error::Domain("retrain epochs must be positive".into()));
    }
    for pair in schedule.windows(2) {
        if pair[1] >= pair[0] {
            return Err(Error::Domain(format!(
                "pruning schedule must strictly decrease ({} then {})",
                pair[0], pair[1]
            )));
        }
    }
    let seeds = SeedTree::new(cfg.seed);
    let mut current = params;
    let mut steps = Vec::with_capacity(schedule.len());
    for (i, &m) in schedule.iter().enumerate() {
        let mask = magnitude_mask(&current, m)?;
        let step_cfg = TrainConfig {
            epochs: retrain_epochs,
            seed: seeds.derive("prune-retrain", &[i as u64]),
            ..cfg.clone()
        };
        let mut trainer = Trainer::new(current, step_cfg, train_ds, test_ds, Some(mask))?;
        for _ in 0..retrain_epochs {
            let em = trainer.run_epoch()?;
            if let Some(f) = progress.as_deref_mut() {
                f(m, &em);
            }
        }
        current = trainer.into_params();
        let train_eval = crate::training::evaluate(&current, train_ds)?;
        let test_eval = crate::training::evaluate(&current, test_ds)?;
        steps.push(PruneStep {
            kept: m,
            train_acc: train_eval.accuracy,
            test_acc: test_eval.accuracy,
        });
    }
    Ok((current, steps))
}

/// Geometric schedule from the full stack size down to `floor_frac` of
/// it, in `steps` stages (deduplicated, strictly decreasing).
pub fn geometric_schedule(total: usize, floor_frac: f64, steps: usize) -> Result<Vec<usize>> {
    if !(0.0 < floor_frac && floor_frac < 1.0) {
        return Err(Error::Domain(format!(
            "schedule floor fraction {floor_frac} outside (0, 1)"
        )));
    }
    if steps == 0 || total == 0 {
        return Err(Error::Domain("schedule needs at least one step".into()));
    }
    let mut out = Vec::with_capacity(steps);
    for i in 1..=steps {
        let frac = floor_frac.powf(i as f64 / steps as f64);
        let m = ((total as f64) * frac).round().max(1.0) as usize;
        if out.last().is_none_or(|&last| m < last) {
            out.push(m);
        }
    }
    Ok(out)
}
