//! Seconds-per-epoch comparison of pooling variants under one architecture.
//! An epoch is a training pass plus a full test pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::train::{load_datasets, train_on, Datasets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub pooling: String,
    /// Fastest of the repeated one-epoch runs.
    pub seconds_per_epoch: f64,
    /// Relative to the first `max` row, or to the first row without one.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pooling,seconds_per_epoch,ratio\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.pooling, r.seconds_per_epoch, r.ratio));
        }
        out
    }

    pub fn ratio(&self, pooling: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.pooling == pooling).map(|r| r.ratio)
    }
}

/// Times one epoch of `config` for each pooling in `variants`, `repeats`
/// times in round-robin order, optionally capping the training set at
/// `batches` batches.
pub fn cmd_bench(config: &TrainConfig, variants: &[String], repeats: usize, batches: Option<usize>) -> Result<BenchReport> {
    if variants.is_empty() || repeats == 0 {
        return Err(Error::config("bench needs at least one variant and one repeat"));
    }
    let mut base = config.clone();
    base.epochs = 1;
    base.lr.drop_epoch = None;
    if let Some(b) = batches {
        base.train_size = Some(b * config.batch_size);
    }
    let configs: Vec<TrainConfig> = variants
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.arch.pooling = Some(v.clone());
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let data: Datasets = load_datasets(&base)?;
    // untimed warm-up of every variant
    for c in &configs {
        train_on(c, &data)?;
    }
    let mut best = vec![f64::INFINITY; configs.len()];
    for _ in 0..repeats {
        for (c, b) in configs.iter().zip(best.iter_mut()) {
            let secs = train_on(c, &data)?.metrics.epochs[0].seconds;
            *b = b.min(secs);
        }
    }
    let reference = variants.iter().position(|v| v == "max").map_or(best[0], |i| best[i]);
    let rows = variants
        .iter()
        .zip(best)
        .map(|(v, s)| BenchRow {
            pooling: v.clone(),
            seconds_per_epoch: s,
            ratio: s / reference,
        })
        .collect();
    Ok(BenchReport { rows })
}
