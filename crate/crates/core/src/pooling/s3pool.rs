use crate::error::{Error, Result};
use crate::sampling::{expectation_weights, sample_grid_indices, PoolGeom, RngStream, SampleIndices};
use crate::tensor::{Dims, Tensor4};

use super::{avg_pool, max_pool_backward, max_pool_stride1, uniform_downsample, InferRule, MaxTape, Mode};

/// Everything the S3Pool backward pass needs: the stride-1 argmax and the
/// sampled rows/columns of every batch item.
#[derive(Clone, Debug)]
pub struct S3PoolTape {
    max: MaxTape,
    indices: Vec<SampleIndices>,
}

impl S3PoolTape {
    pub fn indices(&self) -> &[SampleIndices] {
        &self.indices
    }

    pub fn max_tape(&self) -> &MaxTape {
        &self.max
    }
}

fn gather_items(o: &Tensor4, indices: &[SampleIndices]) -> Tensor4 {
    let d = o.dims();
    let (oh, ow) = (indices[0].rows.len(), indices[0].cols.len());
    let out_dims = Dims::derived(d.n(), d.c(), oh, ow);
    let mut data = Vec::with_capacity(out_dims.len());
    for (n, idx) in indices.iter().enumerate() {
        for c in 0..d.c() {
            let plane = o.plane(n, c);
            for &r in &idx.rows {
                let row = &plane[(r - 1) * d.w()..r * d.w()];
                data.extend(idx.cols.iter().map(|&col| row[col - 1]));
            }
        }
    }
    Tensor4::from_vec(out_dims, data).expect("gather length matches dims")
}

/// Random row/column gather. Batch item `n` draws from lane `n` of `rng`.
pub fn stochastic_downsample(
    o: &Tensor4,
    geom: &PoolGeom,
    rng: &RngStream,
) -> Result<(Tensor4, Vec<SampleIndices>)> {
    let d = o.dims();
    geom.check_map(d.h(), d.w())?;
    let indices = (0..d.n())
        .map(|n| sample_grid_indices(&rng.lane(n as u64), d.h(), d.w(), geom))
        .collect::<Result<Vec<_>>>()?;
    Ok((gather_items(o, &indices), indices))
}

/// S3Pool: stride-1 max pooling followed by stochastic downsampling in
/// train mode, or by `s` x `s` average pooling in infer mode.
pub fn s3pool_forward(
    x: &Tensor4,
    geom: &PoolGeom,
    rng: &RngStream,
    mode: Mode,
) -> Result<(Tensor4, Option<S3PoolTape>)> {
    match mode {
        Mode::Train => {
            geom.check_map(x.dims().h(), x.dims().w())?;
            let (o, max) = max_pool_stride1(x, geom.k())?;
            let (z, indices) = stochastic_downsample(&o, geom, rng)?;
            Ok((z, Some(S3PoolTape { max, indices })))
        }
        Mode::Infer => Ok((s3pool_infer(x, geom, InferRule::Average)?, None)),
    }
}

/// Deterministic inference output under the chosen rule.
pub fn s3pool_infer(x: &Tensor4, geom: &PoolGeom, rule: InferRule) -> Result<Tensor4> {
    geom.check_map(x.dims().h(), x.dims().w())?;
    let (o, _) = max_pool_stride1(x, geom.k())?;
    match rule {
        InferRule::Average => avg_pool(&o, geom.s(), geom.s()),
        InferRule::TopLeft => uniform_downsample(&o, geom.s()),
        InferRule::Expectation => expectation_of(&o, geom),
    }
}

/// Exact expectation of the train-mode output over all sampling patterns.
pub fn exact_expectation_infer(x: &Tensor4, geom: &PoolGeom) -> Result<Tensor4> {
    s3pool_infer(x, geom, InferRule::Expectation)
}

fn expectation_of(o: &Tensor4, geom: &PoolGeom) -> Result<Tensor4> {
    let d = o.dims();
    let (g, m) = (geom.g(), geom.per_grid());
    let weights = (1..=m)
        .map(|pos| expectation_weights(geom, pos).map(|w| w.to_f64()))
        .collect::<Result<Vec<_>>>()?;
    let out_dims = Dims::derived(d.n(), d.c(), d.h() / geom.s(), d.w() / geom.s());
    let mut data = Vec::with_capacity(out_dims.len());
    for n in 0..d.n() {
        for c in 0..d.c() {
            let plane = o.plane(n, c);
            for i in 0..out_dims.h() {
                let (row_block, hi) = (i / m, &weights[i % m]);
                for j in 0..out_dims.w() {
                    let (col_block, hj) = (j / m, &weights[j % m]);
                    let mut acc = 0.0;
                    for (a, &wa) in hi.iter().enumerate().filter(|(_, &w)| w != 0.0) {
                        let row = &plane[(row_block * g + a) * d.w() + col_block * g..];
                        for (b, &wb) in hj.iter().enumerate() {
                            acc += wa * wb * row[b];
                        }
                    }
                    data.push(acc);
                }
            }
        }
    }
    Tensor4::from_vec(out_dims, data)
}

/// Gradient of the train-mode forward pass with its sampled indices frozen.
pub fn s3pool_backward(grad_z: &Tensor4, tape: Option<&S3PoolTape>) -> Result<Tensor4> {
    let tape = tape.ok_or(Error::MissingTape)?;
    let o_dims = tape.max.input_dims();
    let (oh, ow) = (tape.indices[0].rows.len(), tape.indices[0].cols.len());
    let expected = Dims::derived(o_dims.n(), o_dims.c(), oh, ow);
    if grad_z.dims() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            found: grad_z.dims(),
        });
    }
    let mut grad_o = Tensor4::zeros(o_dims);
    let w = o_dims.w();
    for (n, idx) in tape.indices.iter().enumerate() {
        for c in 0..o_dims.c() {
            let src = grad_z.plane(n, c);
            let dst = grad_o.plane_mut(n, c);
            for (i, &r) in idx.rows.iter().enumerate() {
                for (j, &col) in idx.cols.iter().enumerate() {
                    dst[(r - 1) * w + col - 1] += src[i * ow + j];
                }
            }
        }
    }
    max_pool_backward(&grad_o, &tape.max)
}

/// The train-mode forward pass linearized at the taped point: argmax winners
/// and sampled indices are held fixed, so the map is linear in `x`.
pub fn s3pool_apply_frozen(x: &Tensor4, tape: &S3PoolTape) -> Result<Tensor4> {
    let d = tape.max.input_dims();
    if x.dims() != d {
        return Err(Error::ShapeMismatch {
            expected: d,
            found: x.dims(),
        });
    }
    let o_data = tape.max.offsets().iter().map(|&at| x.data()[at]).collect();
    let o = Tensor4::from_vec(d, o_data)?;
    Ok(gather_items(&o, &tape.indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::max_pool_standard;
    use crate::sampling::StreamKey;

    fn rng(step: u64) -> RngStream {
        RngStream::new(11, StreamKey::new(0, step))
    }

    fn seeded_map(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
        let mut r = RngStream::new(seed, StreamKey::new(99, 0));
        Tensor4::from_fn(Dims::new(n, c, h, w).unwrap(), |_, _, _, _| r.next_f64() * 2.0 - 1.0)
    }

    #[test]
    fn stride_one_downsample_is_identity() {
        let o = seeded_map(2, 3, 8, 4, 1);
        let geom = PoolGeom::new(1, 1, 4).unwrap();
        let (z, _) = stochastic_downsample(&o, &geom, &rng(0)).unwrap();
        assert_eq!(z, o);
    }

    #[test]
    fn single_element_choices_are_uniform() {
        let o = Tensor4::from_vec(Dims::new(1, 1, 2, 2).unwrap(), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let geom = PoolGeom::new(1, 2, 2).unwrap();
        let mut counts = [0usize; 4];
        for step in 0..8000 {
            let (z, _) = stochastic_downsample(&o, &geom, &rng(step)).unwrap();
            counts[z.data()[0] as usize] += 1;
        }
        // mean 2000, sd ~39
        assert!(counts.iter().all(|&c| (1840..=2160).contains(&c)), "{counts:?}");
    }

    #[test]
    fn replay_and_variation() {
        let x = seeded_map(1, 2, 8, 8, 2);
        let geom = PoolGeom::new(2, 2, 8).unwrap();
        let a = s3pool_forward(&x, &geom, &rng(5), Mode::Train).unwrap().0;
        let b = s3pool_forward(&x, &geom, &rng(5), Mode::Train).unwrap().0;
        assert_eq!(a, b);
        let differing = (0..20)
            .filter(|&s| s3pool_forward(&x, &geom, &rng(100 + s), Mode::Train).unwrap().0 != a)
            .count();
        assert!(differing >= 15);
    }

    #[test]
    fn constant_input_constant_output() {
        let x = Tensor4::full(Dims::new(2, 2, 8, 8).unwrap(), 0.75);
        let geom = PoolGeom::new(2, 2, 4).unwrap();
        for step in 0..10 {
            let (z, _) = s3pool_forward(&x, &geom, &rng(step), Mode::Train).unwrap();
            assert!(z.data().iter().all(|&v| v == 0.75));
        }
        let e = exact_expectation_infer(&x, &geom).unwrap();
        assert!(e.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn infer_modes() {
        let x = seeded_map(1, 1, 8, 8, 3);
        let geom = PoolGeom::new(2, 2, 2).unwrap();
        let (avg, tape) = s3pool_forward(&x, &geom, &rng(0), Mode::Infer).unwrap();
        assert!(tape.is_none());
        let exact = exact_expectation_infer(&x, &geom).unwrap();
        assert!(avg.max_abs_diff(&exact).unwrap() < 1e-12);
        let top_left = s3pool_infer(&x, &geom, InferRule::TopLeft).unwrap();
        assert_eq!(top_left, max_pool_standard(&x, 2, 2).unwrap().0);
    }

    #[test]
    fn divisibility_enforced() {
        let x = seeded_map(1, 1, 12, 8, 4);
        let geom = PoolGeom::new(2, 2, 8).unwrap();
        assert!(s3pool_forward(&x, &geom, &rng(0), Mode::Train).is_err());
        assert!(s3pool_forward(&x, &geom, &rng(0), Mode::Infer).is_err());
        assert!(exact_expectation_infer(&x, &geom).is_err());
    }

    #[test]
    fn backward_basics() {
        let x = seeded_map(1, 2, 4, 4, 5);
        let identity = PoolGeom::new(1, 1, 2).unwrap();
        let (_, tape) = s3pool_forward(&x, &identity, &rng(0), Mode::Train).unwrap();
        let gz = seeded_map(1, 2, 4, 4, 6);
        assert_eq!(s3pool_backward(&gz, tape.as_ref()).unwrap(), gz);

        let geom = PoolGeom::new(2, 2, 4).unwrap();
        let (z, tape) = s3pool_forward(&x, &geom, &rng(1), Mode::Train).unwrap();
        let zero = Tensor4::zeros(z.dims());
        assert!(s3pool_backward(&zero, tape.as_ref()).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(s3pool_backward(&zero, None), Err(Error::MissingTape)));
    }

    #[test]
    fn frozen_forward_reproduces_output() {
        let x = seeded_map(2, 2, 8, 8, 7);
        let geom = PoolGeom::new(3, 2, 4).unwrap();
        let (z, tape) = s3pool_forward(&x, &geom, &rng(2), Mode::Train).unwrap();
        assert_eq!(s3pool_apply_frozen(&x, tape.as_ref().unwrap()).unwrap(), z);
    }

    #[test]
    fn batch_items_draw_independently() {
        let x = Tensor4::from_fn(Dims::new(16, 1, 8, 8).unwrap(), |_, _, y, x| (10 * y + x) as f64);
        let geom = PoolGeom::new(1, 2, 8).unwrap();
        let (_, idx) = stochastic_downsample(&x, &geom, &rng(3)).unwrap();
        let distinct: std::collections::HashSet<_> = idx.iter().map(|i| i.rows.clone()).collect();
        assert!(distinct.len() > 8);
    }
}
