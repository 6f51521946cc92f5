//! One function per subcommand.

use std::path::PathBuf;

use clap::Args;

use resmps_core::checkpoint;
use resmps_core::diagnostics::{
    channel2_dominance, channel_norm_profile, export_trajectory, init_sweep as run_init_sweep,
    write_channel_report, write_sweep_report,
};
use resmps_core::expansion::{expansion_profile, retrain_truncated, write_expansion_report};
use resmps_core::models::{
    init_params, mps_from_sresmps, sresmps_from_mps, ModelKind, ModelParams, ModelSpec,
};
use resmps_core::pruning::{geometric_schedule, prune_and_retrain, write_prune_report};
use resmps_core::training::{evaluate, train as train_model, EpochMetrics, TrainOptions};
use resmps_core::{Error, ModelParams64, Result};

use crate::args::{
    parse_list, writer_to, ActivationArg, DataArgs, FeatureMapArg, HyperArgs, ModelArg, SplitArg,
};

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Which parameterization to train
    #[arg(long, value_enum, default_value = "sresmps")]
    pub model: ModelArg,
    /// Nonlinearity of the activated residual model
    #[arg(long, value_enum, default_value = "relu")]
    pub activation: ActivationArg,
    /// Feature map of the product-layer model
    #[arg(long, value_enum, default_value = "normone")]
    pub feature_map: FeatureMapArg,
    /// Where to save the trained checkpoint
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics TSV path (stdout when omitted)
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr
    #[arg(long)]
    pub quiet: bool,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.hyper.resolve()?;
    let data = a.data.load_both()?;
    let spec = ModelSpec {
        kind: a.model.into(),
        num_features: data.train.num_features(),
        hidden_dim: cfg.hidden_dim,
        num_classes: data.train.num_classes(),
        init_std: cfg.init_std,
        feature_map: a.feature_map.into(),
        activation: a.activation.into(),
        dropout: cfg.dropout,
    };
    let params = init_params::<f64>(&spec, cfg.seed)?;
    eprintln!(
        "training {} | {} features, width {}, {} classes | {} train / {} test samples",
        params.kind(),
        spec.num_features,
        spec.hidden_dim,
        spec.num_classes,
        data.train.len(),
        data.test.len()
    );
    let mut metrics_out = writer_to(a.metrics.as_deref())?;
    let total = cfg.epochs;
    let quiet = a.quiet;
    let log = move |m: &EpochMetrics| {
        if !quiet {
            eprintln!(
                "epoch {:>3}/{total} loss {:.6} train {:.4} test {:.4} ({:.1}s)",
                m.epoch, m.train_loss, m.train_acc, m.test_acc, m.seconds
            );
        }
        false
    };
    let (trained, metrics) = train_model(
        params,
        &data.train,
        &data.test,
        &cfg,
        None,
        TrainOptions {
            metrics_out: Some(&mut metrics_out),
            stop_when: Some(&log),
        },
    )?;
    metrics_out.flush()?;
    drop(metrics_out);
    if let Some(path) = &a.out {
        checkpoint::save(&trained, path)?;
        eprintln!("checkpoint written to {}", path.display());
    }
    if let Some(acc) = metrics.final_test_acc() {
        eprintln!("final test accuracy {acc:.4}");
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Which split to evaluate
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let params: ModelParams64 = checkpoint::load(&a.input)?;
    let ds = a.data.load_one(a.split)?;
    let report = evaluate(&params, &ds)?;
    println!("samples\t{}", ds.len());
    println!("loss\t{:.6}", report.loss);
    println!("accuracy\t{:.6}", report.accuracy);
    Ok(())
}

#[derive(Args)]
pub struct PruneArgs {
    /// Trained checkpoint to prune
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Comma-separated list of live-parameter targets (strictly
    /// decreasing); overrides the geometric schedule
    #[arg(long)]
    pub keep: Option<String>,
    /// Number of geometric schedule steps
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Schedule floor as a fraction of the residual parameter count
    #[arg(long, default_value_t = 0.01)]
    pub floor_frac: f64,
    /// Retraining epochs after each pruning step
    #[arg(long, default_value_t = 5)]
    pub retrain_epochs: usize,
    /// Report TSV path (stdout when omitted)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Where to save the final pruned checkpoint
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn prune(a: PruneArgs) -> Result<()> {
    let mut cfg = a.hyper.resolve()?;
    let params: ModelParams64 = checkpoint::load(&a.input)?;
    cfg.hidden_dim = params.hidden_dim();
    let data = a.data.load_both()?;
    let schedule = match &a.keep {
        Some(csv) => parse_list::<usize>(csv, "--keep")?,
        None => geometric_schedule(params.residual_param_count(), a.floor_frac, a.steps)?,
    };
    eprintln!(
        "pruning over {} steps: {:?}",
        schedule.len(),
        schedule
    );
    let mut progress = |kept: usize, m: &EpochMetrics| {
        eprintln!(
            "keep {kept} | retrain epoch {} test {:.4}",
            m.epoch, m.test_acc
        );
    };
    let (pruned, steps) = prune_and_retrain(
        params,
        &schedule,
        &cfg,
        a.retrain_epochs,
        &data.train,
        &data.test,
        Some(&mut progress),
    )?;
    let mut out = writer_to(a.report.as_deref())?;
    write_prune_report(&steps, &mut out)?;
    out.flush()?;
    if let Some(path) = &a.out {
        checkpoint::save(&pruned, path)?;
        eprintln!("pruned checkpoint written to {}", path.display());
    }
    Ok(())
}

#[derive(Args)]
pub struct ExpandArgs {
    /// Simple-residual checkpoint to expand
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Highest interaction order to retain
    #[arg(long)]
    pub kmax: usize,
    /// Split for the accuracy column
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Also train the order-kmax truncation for this many epochs and
    /// report its accuracy (appended to the report as a comment row)
    #[arg(long)]
    pub retrain_epochs: Option<usize>,
    /// Report TSV path (stdout when omitted)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn expand(a: ExpandArgs) -> Result<()> {
    let params: ModelParams64 = checkpoint::load(&a.input)?;
    let ds = a.data.load_one(a.split)?;
    let profile = expansion_profile(&params, &ds, a.kmax)?;
    let mut out = writer_to(a.report.as_deref())?;
    write_expansion_report(&profile, &mut out)?;
    if let Some(epochs) = a.retrain_epochs {
        let mut cfg = a.hyper.resolve()?;
        cfg.hidden_dim = params.hidden_dim();
        let data = a.data.load_both()?;
        eprintln!("retraining the order-{} truncation for {epochs} epochs", a.kmax);
        let (_, acc) = retrain_truncated(params, a.kmax, &cfg, epochs, &data.train, &data.test)?;
        writeln!(out, "# retrained kmax={} test_acc={acc:.6}", a.kmax)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Args)]
pub struct InitSweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Comma-separated initialization scales to sweep
    #[arg(long)]
    pub eps: String,
    /// Comma-separated epochs at which to record test accuracy
    #[arg(long, default_value = "10,20,50")]
    pub checkpoints: String,
    /// Which parameterization to sweep
    #[arg(long, value_enum, default_value = "sresmps")]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value = "relu")]
    pub activation: ActivationArg,
    #[arg(long, value_enum, default_value = "normone")]
    pub feature_map: FeatureMapArg,
    /// Report TSV path (stdout when omitted)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn init_sweep(a: InitSweepArgs) -> Result<()> {
    let cfg = a.hyper.resolve()?;
    let eps = parse_list::<f64>(&a.eps, "--eps")?;
    let checkpoints = parse_list::<usize>(&a.checkpoints, "--checkpoints")?;
    let data = a.data.load_both()?;
    let spec = ModelSpec {
        kind: a.model.into(),
        num_features: data.train.num_features(),
        hidden_dim: cfg.hidden_dim,
        num_classes: data.train.num_classes(),
        init_std: cfg.init_std,
        feature_map: a.feature_map.into(),
        activation: a.activation.into(),
        dropout: cfg.dropout,
    };
    let mut progress = |eps: f64, epoch: usize, acc: f64| {
        eprintln!("eps {eps} epoch {epoch} test {acc:.4}");
    };
    let rows = run_init_sweep(
        &spec,
        &eps,
        &checkpoints,
        &cfg,
        &data.train,
        &data.test,
        Some(&mut progress),
    )?;
    let mut out = writer_to(a.report.as_deref())?;
    write_sweep_report(&rows, &mut out)?;
    out.flush()?;
    Ok(())
}

#[derive(Args)]
pub struct DiagnoseArgs {
    /// Checkpoint to inspect
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Channel-norm TSV path (stdout when omitted)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write hidden-state paths of selected test samples to this TSV
    #[arg(long, requires = "data")]
    pub trajectory: Option<PathBuf>,
    /// Dataset directory (required for --trajectory)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Reduce each image to M pixels, matching the checkpoint
    #[arg(long, value_name = "M")]
    pub subset: Option<usize>,
    /// Comma-separated test-sample indices for --trajectory
    #[arg(long, default_value = "0,1,2,3,4,5,6,7")]
    pub samples: String,
    /// Write only the final hidden state of each sample
    #[arg(long)]
    pub endpoints_only: bool,
}

pub fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let params: ModelParams64 = checkpoint::load(&a.input)?;
    // The channel table is the default product; skip it only when the
    // invocation asks solely for a trajectory.
    if a.report.is_some() || a.trajectory.is_none() {
        let profile = channel_norm_profile(&params)?;
        let mut out = writer_to(a.report.as_deref())?;
        write_channel_report(&profile, &mut out)?;
        out.flush()?;
        eprintln!(
            "channel 2 dominates on {:.1}% of layers",
            100.0 * channel2_dominance(&profile)
        );
    }
    if let Some(path) = &a.trajectory {
        let dir = a.data.as_ref().expect("enforced by clap");
        let data_args = DataArgs {
            data: dir.clone(),
            limit_train: None,
            limit_test: None,
            subset: a.subset,
        };
        let ds = data_args.load_one(SplitArg::Test)?;
        let samples = parse_list::<usize>(&a.samples, "--samples")?;
        let mut out = writer_to(Some(path))?;
        export_trajectory(&params, &ds, &samples, a.endpoints_only, &mut out)?;
        out.flush()?;
        eprintln!(
            "trajectories of {} samples written to {}",
            samples.len(),
            path.display()
        );
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ConvertTarget {
    /// Two-channel product form with the (1, x) feature map
    Mps,
    /// Simple residual form (constant channel must be the identity)
    Sresmps,
}

#[derive(Args)]
pub struct ConvertArgs {
    /// Source checkpoint
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Target parameterization
    #[arg(long, value_enum)]
    pub to: ConvertTarget,
    /// Destination checkpoint
    #[arg(long)]
    pub out: PathBuf,
}

pub fn convert(a: ConvertArgs) -> Result<()> {
    let params: ModelParams64 = checkpoint::load(&a.input)?;
    let converted: ModelParams64 = match (&params, a.to) {
        (ModelParams::SResMps(p), ConvertTarget::Mps) => ModelParams::Mps(mps_from_sresmps(p)),
        (ModelParams::Mps(p), ConvertTarget::Sresmps) => {
            ModelParams::SResMps(sresmps_from_mps(p)?)
        }
        (ModelParams::SResMps(_), ConvertTarget::Sresmps)
        | (ModelParams::Mps(_), ConvertTarget::Mps) => {
            return Err(Error::Domain(
                "checkpoint is already in the requested form".into(),
            ));
        }
        (ModelParams::AResMps(_), _) => {
            return Err(Error::Domain(
                "activated models have no exact equivalent in another form".into(),
            ));
        }
    };
    checkpoint::save(&converted, &a.out)?;
    eprintln!(
        "{} rewritten as {} at {}",
        match params.kind() {
            ModelKind::SResMps => "residual model",
            ModelKind::Mps => "product model",
            ModelKind::AResMps => "activated model",
        },
        converted.kind(),
        a.out.display()
    );
    Ok(())
}
