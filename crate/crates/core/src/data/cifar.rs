//! CIFAR-10 binary batches: records of one label byte followed by 1024 red,
//! 1024 green and 1024 blue bytes in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

use super::LabeledBatch;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;

pub fn parse_cifar10(bytes: &[u8], max_records: Option<usize>) -> Result<LabeledBatch> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(format!(
            "truncated record: {} bytes is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let available = bytes.len() / CIFAR_RECORD;
    let n = max_records.map_or(available, |m| m.min(available));
    if n == 0 {
        return Err(Error::format("no records"));
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for record in bytes.chunks_exact(CIFAR_RECORD).take(n) {
        let label = record[0] as usize;
        if label >= CLASSES {
            return Err(Error::LabelOutOfRange { label, classes: CLASSES });
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let images = Tensor4::from_vec(Dims::new(n, 3, 32, 32)?, data)?;
    LabeledBatch::new(images, labels, CLASSES)
}

pub fn read_cifar10_binary(path: &Path, max_records: Option<usize>) -> Result<LabeledBatch> {
    parse_cifar10(&std::fs::read(path)?, max_records)
}
