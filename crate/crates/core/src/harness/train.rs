//! Training and evaluation runs.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{channel_stats, normalize, read_cifar10_binary, synth_translated_shapes, LabeledBatch};
use crate::error::{Error, Result};
use crate::nn::{argmax_classes, checkpoint, softmax_ce, Adadelta, AdadeltaConfig, Checkpoint, Model, Pass};
use crate::sampling::{RngStream, StreamKey};
use crate::tensor::Tensor4;

use super::config::{DatasetConfig, TrainConfig};

/// Stream ids outside the range used by layer indices.
const DATA_STREAM: u64 = 1 << 40;
const SHUFFLE_STREAM: u64 = DATA_STREAM + 1;
const EVAL_CHUNK: usize = 250;

pub struct Datasets {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}

pub fn load_datasets(config: &TrainConfig) -> Result<Datasets> {
    let (train, test) = match &config.dataset {
        DatasetConfig::Synthetic { train, test, classes } => {
            let key = |split| RngStream::new(config.seed, StreamKey::new(DATA_STREAM, split));
            (
                synth_translated_shapes(&mut key(0), *train, *classes)?,
                synth_translated_shapes(&mut key(1), *test, *classes)?,
            )
        }
        DatasetConfig::Cifar10 { dir, test_size } => {
            let mut parts = Vec::new();
            let mut remaining = config.train_size;
            for i in 1..=5 {
                if remaining == Some(0) {
                    break;
                }
                let path = dir.join(format!("data_batch_{i}.bin"));
                let part = read_cifar10_binary(&path, remaining)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
                remaining = remaining.map(|r| r - part.len());
                parts.push(part);
            }
            let images: Vec<Tensor4> = parts.iter().map(|p| p.images().clone()).collect();
            let labels = parts.iter().flat_map(|p| p.labels().iter().copied()).collect();
            let train = LabeledBatch::new(Tensor4::stack(&images)?, labels, 10)?;
            let path = dir.join("test_batch.bin");
            let test = read_cifar10_binary(&path, *test_size)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            (train, test)
        }
    };
    let train = match config.train_size {
        Some(n) => train.truncate(n)?,
        None => train,
    };
    Ok(Datasets { train, test })
}

/// Network inputs for both splits, normalized with training-set statistics
/// when the config asks for it.
fn inputs(config: &TrainConfig, data: &Datasets) -> Result<(Tensor4, Tensor4)> {
    if config.normalize {
        let (mean, std) = channel_stats(data.train.images());
        Ok((
            normalize(data.train.images(), &mean, &std)?,
            normalize(data.test.images(), &mean, &std)?,
        ))
    } else {
        Ok((data.train.images().clone(), data.test.images().clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Percent of misclassified training examples, counted from the
    /// train-mode forward passes of that epoch.
    pub train_error: f64,
    /// Percent misclassified in infer mode after the epoch.
    pub test_error: f64,
    /// Wall-clock time of the training pass plus the test pass.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub final_train_error: f64,
    pub final_test_error: f64,
    pub mean_seconds_per_epoch: f64,
}

impl RunMetrics {
    fn from_epochs(epochs: Vec<EpochMetrics>) -> Self {
        let last = epochs.last().expect("at least one epoch");
        Self {
            final_train_error: last.train_error,
            final_test_error: last.test_error,
            mean_seconds_per_epoch: epochs.iter().map(|e| e.seconds).sum::<f64>() / epochs.len() as f64,
            epochs,
        }
    }

    /// `epoch,split,error,seconds`, one row per split and epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,error,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!("{},train,{},{}\n", e.epoch, e.train_error, e.seconds));
            out.push_str(&format!("{},test,{},{}\n", e.epoch, e.test_error, e.seconds));
        }
        out
    }
}

/// Parses [`RunMetrics::to_csv`] output back into `(epoch, split, error,
/// seconds)` rows.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(usize, String, f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,split,error,seconds") {
        return Err(Error::format("unexpected metrics header"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(format!("bad metrics row {line:?}"));
            if f.len() != 4 || !(f[1] == "train" || f[1] == "test") {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].to_string(),
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

pub fn error_percent(predictions: &[usize], labels: &[usize]) -> f64 {
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    100.0 * wrong as f64 / labels.len() as f64
}

/// Top-1 error of `model` in infer mode.
pub fn evaluate(model: &Model, images: &Tensor4, labels: &[usize]) -> Result<f64> {
    let n = images.dims().n();
    let mut predictions = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let (logits, _) = model.forward(&images.select_items(&idx)?, &Pass::infer())?;
        predictions.extend(argmax_classes(&logits));
    }
    Ok(error_percent(&predictions, labels))
}

pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub checkpoint: Checkpoint,
}

fn permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = RngStream::new(seed, StreamKey::new(SHUFFLE_STREAM, epoch as u64));
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.below(i as u64 + 1) as usize);
    }
    p
}

pub fn train_on(config: &TrainConfig, data: &Datasets) -> Result<TrainOutcome> {
    let layers = config.validate()?;
    let (train_x, test_x) = inputs(config, data)?;
    let d = train_x.dims();
    let mut model = Model::build(&layers, [d.c(), d.h(), d.w()], config.seed).map_err(|e| Error::config(e.to_string()))?;
    if model.classes() != data.train.classes() {
        return Err(Error::config(format!(
            "model has {} outputs for a {}-class dataset",
            model.classes(),
            data.train.classes()
        )));
    }
    let mut optimizer = Adadelta::new(
        AdadeltaConfig {
            lr: config.lr.initial,
            ..Default::default()
        },
        model.params(),
    );
    let labels = data.train.labels();
    let mut step = 0u64;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        optimizer.set_lr(config.lr.at(epoch));
        let order = permutation(config.seed, epoch, labels.len());
        let mut wrong = 0usize;
        for batch in order.chunks(config.batch_size) {
            let x = train_x.select_items(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (logits, tapes) = model.forward(&x, &Pass::train(config.seed, step))?;
            wrong += argmax_classes(&logits).iter().zip(&y).filter(|(p, l)| p != l).count();
            let (_, grad) = softmax_ce(&logits, &y)?;
            let grads = model.backward(&tapes, &grad)?;
            optimizer.step(model.params_mut(), &grads)?;
            model.commit_batch_stats(&tapes, batch.len());
            step += 1;
        }
        let test_error = evaluate(&model, &test_x, data.test.labels())?;
        epochs.push(EpochMetrics {
            epoch,
            train_error: 100.0 * wrong as f64 / labels.len() as f64,
            test_error,
            seconds: started.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
        });
    }
    Ok(TrainOutcome {
        metrics: RunMetrics::from_epochs(epochs),
        checkpoint: Checkpoint { model, optimizer, step },
    })
}

pub fn cmd_train(config: &TrainConfig, out: &Path) -> Result<RunMetrics> {
    config.validate()?;
    let data = load_datasets(config)?;
    let outcome = train_on(config, &data)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.csv"), outcome.metrics.to_csv())?;
    let summary = serde_json::json!({ "config": config, "metrics": outcome.metrics });
    std::fs::write(out.join("results.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    checkpoint::save(&out.join("model.ckpt"), &outcome.checkpoint)?;
    Ok(outcome.metrics)
}

/// Infer-mode test error of a saved model on the test split described by
/// `config`.
pub fn cmd_eval(checkpoint_path: &Path, config: &TrainConfig) -> Result<f64> {
    let ck = checkpoint::load(checkpoint_path)?;
    let data = load_datasets(config)?;
    let (_, test_x) = inputs(config, &data)?;
    evaluate(&ck.model, &test_x, data.test.labels())
}
