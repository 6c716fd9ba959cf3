//! Datasets and image codecs.

pub mod cifar;
pub mod pnm;
pub mod synth;

pub use cifar::{parse_cifar10, read_cifar10_binary, CIFAR_RECORD};
pub use pnm::{decode_pnm, encode_pnm, image_to_tensor, read_pnm, tensor_to_image, write_pnm, Image, PixelKind};
pub use synth::{synth_translated_shapes, SHAPE_CLASSES};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Reduction, Tensor4};

/// Images in `[0, 1]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    images: Tensor4,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledBatch {
    pub fn new(images: Tensor4, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != images.dims().n() {
            return Err(Error::format(format!(
                "{} labels for {} images",
                labels.len(),
                images.dims().n()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format("pixel values must lie in [0, 1]"));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn images(&self) -> &Tensor4 {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<LabeledBatch> {
        let images = self.images.select_items(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            images,
            labels,
            classes: self.classes,
        })
    }

    /// The first `n` examples, or all of them.
    pub fn truncate(&self, n: usize) -> Result<LabeledBatch> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// Per-channel mean and standard deviation over a whole image tensor.
pub fn channel_stats(images: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let over = [Axis::N, Axis::H, Axis::W];
    let mean = images.reduce(Reduction::Mean, &over).expect("axes given").into_vec();
    let c = images.dims().c();
    let mut var = vec![0.0; c];
    for n in 0..images.dims().n() {
        for (ch, v) in var.iter_mut().enumerate() {
            *v += images.plane(n, ch).iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    let count = (images.dims().n() * images.dims().plane()) as f64;
    let std = var.into_iter().map(|v| (v / count).sqrt()).collect();
    (mean, std)
}

/// `(x - mean[c]) / std[c]`; channels with zero spread are only centred.
pub fn normalize(images: &Tensor4, mean: &[f64], std: &[f64]) -> Result<Tensor4> {
    let d = images.dims();
    if mean.len() != d.c() || std.len() != d.c() {
        return Err(Error::format("normalization statistics do not match the channel count"));
    }
    Ok(Tensor4::from_fn(d, |n, c, y, x| {
        let v = images.get(n, c, y, x).expect("in range");
        let s = if std[c] > 0.0 { std[c] } else { 1.0 };
        (v - mean[c]) / s
    }))
}
