//! Synthetic shape images: one of up to ten 10x10 glyphs drawn at a random
//! position of a 32x32 canvas, with random per-channel ink and background
//! noise. Labels are balanced and shuffled.

use crate::error::{Error, Result};
use crate::sampling::RngStream;
use crate::tensor::{Dims, Tensor4};

use super::LabeledBatch;

pub const SHAPE_CLASSES: usize = 10;
pub const SYNTH_SIDE: usize = 32;
const GLYPH: usize = 10;

/// Generation knobs; the defaults are what [`synth_translated_shapes`] uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    /// Background samples are uniform on `[0, noise]`.
    pub noise: f64,
    /// Ink intensity per channel is uniform on `[min_ink, 1]`.
    pub min_ink: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            noise: 0.3,
            min_ink: 0.5,
        }
    }
}

fn ink(class: usize, u: usize, v: usize) -> bool {
    let (ui, vi) = (u as i64, v as i64);
    let hbar = (4..=5).contains(&u);
    let vbar = (4..=5).contains(&v);
    let diag = (ui - vi).abs() <= 1;
    let anti = (ui + vi - 9).abs() <= 1;
    match class {
        0 => hbar,
        1 => vbar,
        2 => hbar || vbar,
        3 => diag || anti,
        4 => u <= 1 || u >= 8 || v <= 1 || v >= 8,
        5 => (2..=7).contains(&u) && (2..=7).contains(&v),
        6 => diag,
        7 => anti,
        8 => u <= 1 || vbar,
        9 => v <= 1 || u >= 8,
        _ => unreachable!("class checked by caller"),
    }
}

pub fn synth_translated_shapes(rng: &mut RngStream, n: usize, classes: usize) -> Result<LabeledBatch> {
    synth_translated_shapes_with(rng, n, classes, &SynthParams::default())
}

pub fn synth_translated_shapes_with(
    rng: &mut RngStream,
    n: usize,
    classes: usize,
    params: &SynthParams,
) -> Result<LabeledBatch> {
    if classes == 0 || classes > SHAPE_CLASSES {
        return Err(Error::config(format!("classes must be in 1..={SHAPE_CLASSES}")));
    }
    if n < classes {
        return Err(Error::config(format!("{n} examples cannot cover {classes} classes")));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        labels.swap(i, j);
    }
    let side = SYNTH_SIDE;
    let plane = side * side;
    let mut data = vec![0.0; n * 3 * plane];
    for (item, &label) in labels.iter().enumerate() {
        let img = &mut data[item * 3 * plane..(item + 1) * 3 * plane];
        for v in img.iter_mut() {
            *v = rng.next_f64() * params.noise;
        }
        let top = rng.below((side - GLYPH + 1) as u64) as usize;
        let left = rng.below((side - GLYPH + 1) as u64) as usize;
        let colour: [f64; 3] = std::array::from_fn(|_| params.min_ink + (1.0 - params.min_ink) * rng.next_f64());
        for u in 0..GLYPH {
            for v in 0..GLYPH {
                if ink(label, u, v) {
                    for (c, ink) in colour.iter().enumerate() {
                        let at = c * plane + (top + u) * side + left + v;
                        img[at] = (img[at] + ink).min(1.0);
                    }
                }
            }
        }
    }
    let images = Tensor4::from_vec(Dims::new(n, 3, side, side)?, data)?;
    LabeledBatch::new(images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::StreamKey;

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, StreamKey::default())
    }

    #[test]
    fn one_per_class_and_balanced() {
        let b = synth_translated_shapes(&mut rng(1), 10, 10).unwrap();
        let mut l = b.labels().to_vec();
        l.sort_unstable();
        assert_eq!(l, (0..10).collect::<Vec<_>>());
        let b = synth_translated_shapes(&mut rng(1), 103, 4).unwrap();
        let counts: Vec<usize> = (0..4).map(|k| b.labels().iter().filter(|&&l| l == k).count()).collect();
        assert!(counts.iter().all(|&c| c == 25 || c == 26), "{counts:?}");
        assert_eq!(b.images().dims().as_array(), [103, 3, 32, 32]);
    }

    #[test]
    fn seed_determines_dataset() {
        let a = synth_translated_shapes(&mut rng(5), 20, 10).unwrap();
        assert_eq!(a, synth_translated_shapes(&mut rng(5), 20, 10).unwrap());
        assert_ne!(a, synth_translated_shapes(&mut rng(6), 20, 10).unwrap());
    }

    #[test]
    fn argument_errors() {
        assert!(synth_translated_shapes(&mut rng(0), 3, 4).is_err());
        assert!(synth_translated_shapes(&mut rng(0), 30, 11).is_err());
        assert!(synth_translated_shapes(&mut rng(0), 30, 0).is_err());
    }

    #[test]
    fn glyphs_are_distinct() {
        let masks: Vec<Vec<bool>> = (0..SHAPE_CLASSES)
            .map(|k| (0..GLYPH * GLYPH).map(|i| ink(k, i / GLYPH, i % GLYPH)).collect())
            .collect();
        for a in 0..SHAPE_CLASSES {
            assert!(masks[a].iter().any(|&b| b));
            for b in a + 1..SHAPE_CLASSES {
                assert_ne!(masks[a], masks[b]);
            }
        }
    }
}
