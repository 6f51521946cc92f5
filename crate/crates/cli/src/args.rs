//! Shared flag groups and the plumbing that turns them into datasets
//! and training configurations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};

use resmps_core::config::load_config;
use resmps_core::data::{load_idx, subset_indices};
use resmps_core::models::{Activation, FeatureMapKind, ModelKind};
use resmps_core::training::{OptimizerKind, TrainConfig};
use resmps_core::{Dataset64, Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    /// Simple residual model: h' = h + x (h W)
    Sresmps,
    /// Activated residual model with two channels, bias, and dropout
    Aresmps,
    /// Standard two-channel product-layer model
    Mps,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Sresmps => ModelKind::SResMps,
            ModelArg::Aresmps => ModelKind::AResMps,
            ModelArg::Mps => ModelKind::Mps,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adam => OptimizerKind::Adam,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ActivationArg {
    /// Rectifier on the residual branch
    Relu,
    /// No nonlinearity
    None,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::None => Activation::Linear,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FeatureMapArg {
    /// Constant-plus-pixel channels (1, x)
    Affine,
    /// Complementary channels (x, 1 - x)
    Normone,
}

impl From<FeatureMapArg> for FeatureMapKind {
    fn from(f: FeatureMapArg) -> Self {
        match f {
            FeatureMapArg::Affine => FeatureMapKind::Affine,
            FeatureMapArg::Normone => FeatureMapKind::NormOne,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

/// Where the IDX files live and how much of them to use.
#[derive(Args)]
pub struct DataArgs {
    /// Directory holding train-images-idx3-ubyte[.gz],
    /// train-labels-idx1-ubyte[.gz], t10k-images-idx3-ubyte[.gz],
    /// t10k-labels-idx1-ubyte[.gz]
    #[arg(long)]
    pub data: PathBuf,
    /// Use only the first N training samples
    #[arg(long, value_name = "N")]
    pub limit_train: Option<usize>,
    /// Use only the first N test samples
    #[arg(long, value_name = "N")]
    pub limit_test: Option<usize>,
    /// Reduce each image to M pixels (central patch when M is a
    /// perfect square on square images, even stride otherwise)
    #[arg(long, value_name = "M")]
    pub subset: Option<usize>,
}

pub struct LoadedData {
    pub train: Dataset64,
    pub test: Dataset64,
}

fn resolve_idx(dir: &Path, base: &str) -> Result<PathBuf> {
    let gz = dir.join(format!("{base}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    let plain = dir.join(base);
    if plain.is_file() {
        return Ok(plain);
    }
    Err(Error::Format(format!(
        "no {base}[.gz] under {}",
        dir.display()
    )))
}

fn shrink(ds: Dataset64, limit: Option<usize>, keep: Option<&[usize]>) -> Result<Dataset64> {
    let ds = match limit {
        Some(n) => ds.limited(n),
        None => ds,
    };
    match keep {
        Some(k) => ds.select_features(k),
        None => Ok(ds),
    }
}

impl DataArgs {
    fn load_split(&self, split: SplitArg, keep: Option<&[usize]>) -> Result<Dataset64> {
        let (images, labels, limit) = match split {
            SplitArg::Train => (
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                self.limit_train,
            ),
            SplitArg::Test => (
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
                self.limit_test,
            ),
        };
        let ds = load_idx(
            &resolve_idx(&self.data, images)?,
            &resolve_idx(&self.data, labels)?,
        )?;
        shrink(ds, limit, keep)
    }

    fn keep_indices(&self, num_features: usize) -> Result<Option<Vec<usize>>> {
        match self.subset {
            None => Ok(None),
            Some(m) => Ok(Some(subset_indices(num_features, m)?)),
        }
    }

    /// Load both splits, applying limits and the pixel subset.
    pub fn load_both(&self) -> Result<LoadedData> {
        let train = self.load_split(SplitArg::Train, None)?;
        let keep = self.keep_indices(train.num_features())?;
        let train = match &keep {
            Some(k) => train.select_features(k)?,
            None => train,
        };
        let test = self.load_split(SplitArg::Test, keep.as_deref())?;
        if test.num_features() != train.num_features() {
            return Err(Error::Consistency(format!(
                "train and test images disagree: {} vs {} features",
                train.num_features(),
                test.num_features()
            )));
        }
        Ok(LoadedData { train, test })
    }

    /// Load a single split, applying its limit and the pixel subset.
    pub fn load_one(&self, split: SplitArg) -> Result<Dataset64> {
        let ds = self.load_split(split, None)?;
        let keep = self.keep_indices(ds.num_features())?;
        match keep {
            Some(k) => ds.select_features(&k),
            None => Ok(ds),
        }
    }
}

/// Training hyperparameters: defaults, overlaid by `--config`, overlaid
/// by explicit flags.
#[derive(Args)]
pub struct HyperArgs {
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for shuffling, initialization, and dropout
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden-state width (virtual bond dimension)
    #[arg(long)]
    pub chi: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Dropout rate on residual branches
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Standard deviation of the Gaussian weight initialization
    #[arg(long = "eps-init")]
    pub eps_init: Option<f64>,
}

impl HyperArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg = load_config(path)?.apply(cfg);
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.chi {
            cfg.hidden_dim = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.optimizer {
            cfg.optimizer = v.into();
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.eps_init {
            cfg.init_std = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A comma-separated list flag.
pub fn parse_list<T>(text: &str, what: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Error::Config(format!("{what}: bad entry {s:?}: {e}")))
        })
        .collect()
}

/// Buffered writer to a file, or to stdout when no path is given.
pub fn writer_to(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}
