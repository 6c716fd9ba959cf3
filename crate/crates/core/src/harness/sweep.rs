//! Grid-size sweeps: one training run per S3Pool configuration and seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::train::{load_datasets, train_on};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Pooling name, e.g. `s3pool-16-8`.
    pub config: String,
    /// Seed-averaged final-epoch errors, in percent.
    pub train_error: f64,
    pub test_error: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("config,train_err,test_err\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.config, r.train_error, r.test_error));
    }
    out
}

/// `grids` entries are `G1-G2` (or full pooling names such as `max`). Every
/// configuration is validated before the first run starts.
pub fn cmd_sweep_grid(config: &TrainConfig, grids: &[String], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if grids.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs at least one configuration and one seed"));
    }
    let mut runs = Vec::new();
    for g in grids {
        let name = if g.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            format!("s3pool-{g}")
        } else {
            g.clone()
        };
        for &seed in seeds {
            let mut c = config.clone();
            c.arch.pooling = Some(name.clone());
            c.seed = seed;
            c.validate().map_err(|e| Error::config(format!("{name}: {e}")))?;
            runs.push((name.clone(), c));
        }
    }
    let mut rows: Vec<SweepRow> = Vec::new();
    for (name, c) in runs {
        let data = load_datasets(&c)?;
        let m = train_on(&c, &data)?.metrics;
        let share = 1.0 / seeds.len() as f64;
        match rows.iter_mut().find(|r| r.config == name) {
            Some(r) => {
                r.train_error += share * m.final_train_error;
                r.test_error += share * m.final_test_error;
            }
            None => rows.push(SweepRow {
                config: name,
                train_error: share * m.final_train_error,
                test_error: share * m.final_test_error,
            }),
        }
    }
    Ok(rows)
}
