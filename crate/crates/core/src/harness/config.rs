//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "arch": { "family": "nin", "widths": [8, 16, 16], "pooling": "s3pool-16-8" },
//!   "epochs": 20,
//!   "batch_size": 32,
//!   "lr": { "initial": 1.0, "drop_epoch": 15, "factor": 0.1 },
//!   "seed": 1,
//!   "dataset": { "kind": "synthetic", "train": 1000, "test": 500, "classes": 10 },
//!   "train_size": 1000,
//!   "normalize": false
//! }
//! ```
//!
//! `pooling` is `max`, `avg`, `zeiler` or `s3pool-G1-G2` with one grid size
//! per pooling layer. `family` is `nin`, `resnet` or `custom`; `custom`
//! takes an explicit `layers` list instead of `widths`/`pooling`. Unknown keys
//! are rejected everywhere.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model, PoolVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Nin,
    Resnet,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub widths: Vec<usize>,
    /// Kernel size of the first convolution in each of the three blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling: Option<String>,
    /// Dropout rate inserted after every pooling layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    /// Epochs after this one use `initial * factor`.
    #[serde(default)]
    pub drop_epoch: Option<usize>,
    #[serde(default = "default_factor")]
    pub factor: f64,
}

fn default_factor() -> f64 {
    0.1
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            drop_epoch: None,
            factor: default_factor(),
        }
    }
}

impl LrSchedule {
    /// Multiplier for 1-based `epoch`.
    pub fn at(&self, epoch: usize) -> f64 {
        match self.drop_epoch {
            Some(d) if epoch > d => self.initial * self.factor,
            _ => self.initial,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        train: usize,
        test: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    /// A directory with `data_batch_1.bin` .. `data_batch_5.bin` and
    /// `test_batch.bin`.
    Cifar10 {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_size: Option<usize>,
    },
}

fn default_classes() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    #[serde(default)]
    pub normalize: bool,
}

/// Parsed pooling choice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pooling {
    Plain(PoolVariant),
    S3pool(Vec<usize>),
}

impl Pooling {
    pub fn parse(s: &str) -> Result<Pooling> {
        match s {
            "max" => Ok(Pooling::Plain(PoolVariant::Max)),
            "avg" => Ok(Pooling::Plain(PoolVariant::Avg)),
            "zeiler" => Ok(Pooling::Plain(PoolVariant::Zeiler)),
            _ => {
                let rest = s
                    .strip_prefix("s3pool-")
                    .ok_or_else(|| Error::config(format!("unknown pooling {s:?}")))?;
                let grids = rest
                    .split('-')
                    .map(|g| g.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::config(format!("bad grid sizes in {s:?}")))?;
                Ok(Pooling::S3pool(grids))
            }
        }
    }

    fn layer(&self, index: usize) -> Result<LayerSpec> {
        let (variant, g) = match self {
            Pooling::Plain(v) => (*v, None),
            Pooling::S3pool(grids) => (PoolVariant::S3pool, Some(grids[index])),
        };
        Ok(LayerSpec::Pool { variant, k: 2, s: 2, g })
    }
}

impl ArchConfig {
    pub fn nin(widths: [usize; 3], pooling: &str) -> Self {
        Self {
            family: Family::Nin,
            widths: widths.to_vec(),
            kernels: None,
            pooling: Some(pooling.into()),
            dropout: None,
            layers: None,
        }
    }

    /// The layer list for `classes` outputs.
    pub fn layers(&self, classes: usize) -> Result<Vec<LayerSpec>> {
        if self.family == Family::Custom {
            if !self.widths.is_empty() || self.pooling.is_some() || self.dropout.is_some() || self.kernels.is_some() {
                return Err(Error::config("custom architectures take only `layers`"));
            }
            return self.layers.clone().ok_or_else(|| Error::config("custom architecture needs `layers`"));
        }
        if self.layers.is_some() {
            return Err(Error::config("`layers` is only valid with family \"custom\""));
        }
        let [a, b, c]: [usize; 3] = self
            .widths
            .as_slice()
            .try_into()
            .map_err(|_| Error::config("`widths` needs three entries"))?;
        let pooling = Pooling::parse(self.pooling.as_deref().ok_or_else(|| Error::config("`pooling` is required"))?)?;
        if let Pooling::S3pool(g) = &pooling {
            if g.len() != 2 {
                return Err(Error::config(format!("{} grid sizes for 2 pooling layers", g.len())));
            }
        }
        let cbr = |out: usize, size: usize| {
            [
                LayerSpec::Conv { out_channels: out, size },
                LayerSpec::BatchNorm {},
                LayerSpec::Relu {},
            ]
        };
        let pool = |i: usize, layers: &mut Vec<LayerSpec>| -> Result<()> {
            layers.push(pooling.layer(i)?);
            if let Some(rate) = self.dropout {
                layers.push(LayerSpec::Dropout { rate });
            }
            Ok(())
        };
        let mut layers = Vec::new();
        match self.family {
            Family::Nin => {
                let [k1, k2, k3] = self.kernels.unwrap_or([5, 5, 3]);
                layers.extend(cbr(a, k1));
                layers.extend(cbr(a, 1));
                pool(0, &mut layers)?;
                layers.extend(cbr(b, k2));
                layers.extend(cbr(b, 1));
                pool(1, &mut layers)?;
                layers.extend(cbr(c, k3));
            }
            Family::Resnet => {
                let [k1, k2, k3] = self.kernels.unwrap_or([3, 3, 3]);
                layers.extend(cbr(a, k1));
                layers.push(LayerSpec::Residual { size: 3 });
                pool(0, &mut layers)?;
                layers.extend(cbr(b, k2));
                layers.push(LayerSpec::Residual { size: 3 });
                pool(1, &mut layers)?;
                layers.extend(cbr(c, k3));
                layers.push(LayerSpec::Residual { size: 3 });
            }
            Family::Custom => unreachable!(),
        }
        layers.push(LayerSpec::Conv { out_channels: classes, size: 1 });
        layers.push(LayerSpec::GlobalAvgPool {});
        layers.push(LayerSpec::SoftmaxCe {});
        Ok(layers)
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let config: TrainConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn classes(&self) -> usize {
        match self.dataset {
            DatasetConfig::Synthetic { classes, .. } => classes,
            DatasetConfig::Cifar10 { .. } => 10,
        }
    }

    /// Checks everything that can be checked without data, including the
    /// architecture against a 3x32x32 input.
    pub fn validate(&self) -> Result<Vec<LayerSpec>> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if let Some(d) = self.lr.drop_epoch {
            if d > self.epochs {
                return Err(Error::config("drop_epoch exceeds epochs"));
            }
        }
        if !(self.lr.initial.is_finite() && self.lr.initial > 0.0 && self.lr.factor.is_finite() && self.lr.factor > 0.0) {
            return Err(Error::config("learning-rate multipliers must be positive"));
        }
        if self.train_size == Some(0) {
            return Err(Error::config("train_size must be at least 1"));
        }
        if let DatasetConfig::Synthetic { train, test, classes } = self.dataset {
            if classes == 0 || classes > crate::data::SHAPE_CLASSES {
                return Err(Error::config(format!("synthetic classes must be in 1..={}", crate::data::SHAPE_CLASSES)));
            }
            if train < classes || test < classes {
                return Err(Error::config("synthetic splits need at least one example per class"));
            }
        }
        let layers = self.arch.layers(self.classes())?;
        Model::build(&layers, [3, 32, 32], self.seed).map_err(|e| Error::config(e.to_string()))?;
        Ok(layers)
    }
}
