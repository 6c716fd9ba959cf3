use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

use super::{check_window, strided_dims, window};

/// Argmax bookkeeping of a max-pooling forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxTape {
    input: Dims,
    output: Dims,
    /// Buffer offset into the input of the winner of each output element.
    argmax: Vec<usize>,
}

impl MaxTape {
    pub fn input_dims(&self) -> Dims {
        self.input
    }

    pub fn output_dims(&self) -> Dims {
        self.output
    }

    /// Winning input position `(y, x)`, 1-based, for output element
    /// `(n, c, y, x)` (also 1-based spatially).
    pub fn argmax(&self, n: usize, c: usize, y: usize, x: usize) -> (usize, usize) {
        let o = self.output;
        let slot = ((n * o.c() + c) * o.h() + (y - 1)) * o.w() + (x - 1);
        let within = self.argmax[slot] % self.input.plane();
        (within / self.input.w() + 1, within % self.input.w() + 1)
    }

    pub(crate) fn offsets(&self) -> &[usize] {
        &self.argmax
    }
}

/// Windowed max over `[(i-1)s+1, (i-1)s+k]` per axis, truncated at the
/// border. Shared by the stride-1 and the fused form.
fn windowed_max(x: &Tensor4, k: usize, s: usize, out_dims: Dims) -> (Tensor4, MaxTape) {
    let d = x.dims();
    let (h, w) = (d.h(), d.w());
    let mut out = Vec::with_capacity(out_dims.len());
    let mut argmax = Vec::with_capacity(out_dims.len());
    for n in 0..d.n() {
        for c in 0..d.c() {
            let base = (n * d.c() + c) * d.plane();
            let plane = x.plane(n, c);
            for i in 0..out_dims.h() {
                let rows = window(i * s, k, h);
                for j in 0..out_dims.w() {
                    let cols = window(j * s, k, w);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = rows.start * w + cols.start;
                    for y in rows.clone() {
                        for xx in cols.clone() {
                            let v = plane[y * w + xx];
                            // Strict comparison keeps the first row-major winner.
                            if v > best {
                                best = v;
                                best_at = y * w + xx;
                            }
                        }
                    }
                    out.push(plane[best_at]);
                    argmax.push(base + best_at);
                }
            }
        }
    }
    let tape = MaxTape {
        input: d,
        output: out_dims,
        argmax,
    };
    (Tensor4::from_vec(out_dims, out).expect("output length matches dims"), tape)
}

/// Stride-1 max pooling; the output has the spatial size of the input.
pub fn max_pool_stride1(x: &Tensor4, k: usize) -> Result<(Tensor4, MaxTape)> {
    check_window(k)?;
    Ok(windowed_max(x, k, 1, x.dims()))
}

/// Max pooling with window `k` and stride `s` computed directly.
pub fn max_pool_standard(x: &Tensor4, k: usize, s: usize) -> Result<(Tensor4, MaxTape)> {
    check_window(k)?;
    let out_dims = strided_dims(x.dims(), s)?;
    Ok(windowed_max(x, k, s, out_dims))
}

/// Routes `grad` to the recorded argmax positions.
pub fn max_pool_backward(grad: &Tensor4, tape: &MaxTape) -> Result<Tensor4> {
    if grad.dims() != tape.output {
        return Err(Error::ShapeMismatch {
            expected: tape.output,
            found: grad.dims(),
        });
    }
    let mut gx = Tensor4::zeros(tape.input);
    let buf = gx.data_mut();
    for (&at, &g) in tape.argmax.iter().zip(grad.data()) {
        buf[at] += g;
    }
    Ok(gx)
}

/// Keeps the top-left element of every disjoint `s` x `s` window.
pub fn uniform_downsample(o: &Tensor4, s: usize) -> Result<Tensor4> {
    let out = strided_dims(o.dims(), s)?;
    let rows: Vec<usize> = (0..out.h()).map(|i| i * s + 1).collect();
    let cols: Vec<usize> = (0..out.w()).map(|j| j * s + 1).collect();
    o.slice_rows_cols(&rows, &cols)
}

/// Average pooling with window `k` and stride `s`. Truncated border windows
/// average over the elements they actually cover.
pub fn avg_pool(x: &Tensor4, k: usize, s: usize) -> Result<Tensor4> {
    check_window(k)?;
    let d = x.dims();
    let out_dims = strided_dims(d, s)?;
    let (h, w) = (d.h(), d.w());
    let mut out = Vec::with_capacity(out_dims.len());
    for n in 0..d.n() {
        for c in 0..d.c() {
            let plane = x.plane(n, c);
            for i in 0..out_dims.h() {
                let rows = window(i * s, k, h);
                for j in 0..out_dims.w() {
                    let cols = window(j * s, k, w);
                    let count = (rows.len() * cols.len()) as f64;
                    let mut acc = 0.0;
                    for y in rows.clone() {
                        acc += plane[y * w + cols.start..y * w + cols.end].iter().sum::<f64>();
                    }
                    out.push(acc / count);
                }
            }
        }
    }
    Tensor4::from_vec(out_dims, out)
}

pub fn avg_pool_backward(grad: &Tensor4, input: Dims, k: usize, s: usize) -> Result<Tensor4> {
    check_window(k)?;
    let out_dims = strided_dims(input, s)?;
    if grad.dims() != out_dims {
        return Err(Error::ShapeMismatch {
            expected: out_dims,
            found: grad.dims(),
        });
    }
    let (h, w) = (input.h(), input.w());
    let mut gx = Tensor4::zeros(input);
    for n in 0..input.n() {
        for c in 0..input.c() {
            let g = grad.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for i in 0..out_dims.h() {
                let rows = window(i * s, k, h);
                for j in 0..out_dims.w() {
                    let cols = window(j * s, k, w);
                    let share = g[i * out_dims.w() + j] / (rows.len() * cols.len()) as f64;
                    for y in rows.clone() {
                        for v in &mut dst[y * w + cols.start..y * w + cols.end] {
                            *v += share;
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(h: usize, w: usize, v: &[f64]) -> Tensor4 {
        Tensor4::from_vec(Dims::new(1, 1, h, w).unwrap(), v.to_vec()).unwrap()
    }

    #[test]
    fn stride1_clamped_windows() {
        let x = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let (o, tape) = max_pool_stride1(&x, 2).unwrap();
        assert_eq!(o.data(), &[4.0, 4.0, 4.0, 4.0]);
        assert_eq!(tape.argmax(0, 0, 2, 1), (2, 2));
        // Asymmetric case checked by hand: windows truncated at the bottom/right.
        let x = t(3, 3, &[5.0, 1.0, 0.0, 2.0, 3.0, 9.0, 4.0, 8.0, 6.0]);
        let (o, _) = max_pool_stride1(&x, 2).unwrap();
        assert_eq!(o.data(), &[5.0, 9.0, 9.0, 8.0, 9.0, 9.0, 8.0, 8.0, 6.0]);
    }

    #[test]
    fn stride1_identities() {
        let c = Tensor4::full(Dims::new(2, 3, 5, 4).unwrap(), 1.5);
        for k in 1..5 {
            assert_eq!(max_pool_stride1(&c, k).unwrap().0, c);
        }
        let x = t(2, 3, &[3.0, -1.0, 4.0, 1.0, -5.0, 9.0]);
        assert_eq!(max_pool_stride1(&x, 1).unwrap().0, x);
        assert!(max_pool_stride1(&x, 0).is_err());
    }

    #[test]
    fn ties_pick_first_row_major() {
        let x = t(2, 2, &[7.0, 7.0, 7.0, 7.0]);
        let (_, tape) = max_pool_standard(&x, 2, 2).unwrap();
        assert_eq!(tape.argmax(0, 0, 1, 1), (1, 1));
    }

    #[test]
    fn uniform_downsample_top_left() {
        let x = Tensor4::from_fn(Dims::new(1, 1, 4, 4).unwrap(), |_, _, y, x| (10 * y + x) as f64);
        assert_eq!(uniform_downsample(&x, 2).unwrap().data(), &[11.0, 13.0, 31.0, 33.0]);
        assert_eq!(uniform_downsample(&x, 1).unwrap(), x);
        let odd = t(3, 2, &[0.0; 6]);
        assert!(uniform_downsample(&odd, 2).is_err());
    }

    #[test]
    fn standard_and_average() {
        let x = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(max_pool_standard(&x, 2, 2).unwrap().0.data(), &[4.0]);
        assert_eq!(avg_pool(&x, 2, 2).unwrap().data(), &[2.5]);
        assert_eq!(max_pool_standard(&x, 1, 1).unwrap().0, x);
        assert_eq!(avg_pool(&x, 1, 1).unwrap(), x);
        assert!(avg_pool(&t(3, 3, &[0.0; 9]), 2, 2).is_err());
    }

    #[test]
    fn avg_truncated_border() {
        // k=3, s=2 on 4x4: the second window along each axis covers 2 cells.
        let x = Tensor4::from_fn(Dims::new(1, 1, 4, 4).unwrap(), |_, _, y, x| (4 * (y - 1) + x) as f64);
        let a = avg_pool(&x, 3, 2).unwrap();
        // window rows 1..3 cols 3..4: values 3,4,7,8,11,12 -> 7.5
        assert_eq!(a.get(0, 0, 1, 2).unwrap(), 7.5);
        // rows 3..4 cols 3..4: 11,12,15,16 -> 13.5
        assert_eq!(a.get(0, 0, 2, 2).unwrap(), 13.5);
    }

    #[test]
    fn max_backward_routes_to_winner() {
        let x = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let (_, tape) = max_pool_standard(&x, 2, 2).unwrap();
        let g = max_pool_backward(&t(1, 1, &[5.0]), &tape).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 5.0]);
        assert!(max_pool_backward(&x, &tape).is_err());
    }

    fn random_map() -> impl Strategy<Value = Tensor4> {
        (1usize..3, 1usize..3, 1usize..5, 1usize..5).prop_flat_map(|(n, c, hh, ww)| {
            let (h, w) = (2 * hh, 2 * ww);
            prop::collection::vec(-5.0f64..5.0, n * c * h * w)
                .prop_map(move |v| Tensor4::from_vec(Dims::new(n, c, h, w).unwrap(), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn fused_equals_two_step(x in random_map(), k in 1usize..4) {
            let fused = max_pool_standard(&x, k, 2).unwrap().0;
            let two_step = uniform_downsample(&max_pool_stride1(&x, k).unwrap().0, 2).unwrap();
            prop_assert_eq!(fused, two_step);
        }

        #[test]
        fn argmax_inside_clamped_window(x in random_map(), k in 1usize..4) {
            let d = x.dims();
            let (o, tape) = max_pool_stride1(&x, k).unwrap();
            for n in 0..d.n() { for c in 0..d.c() { for y in 1..=d.h() { for xx in 1..=d.w() {
                let (ay, ax) = tape.argmax(n, c, y, xx);
                prop_assert!(ay >= y && ay < y + k && ay <= d.h());
                prop_assert!(ax >= xx && ax < xx + k && ax <= d.w());
                prop_assert_eq!(x.get(n, c, ay, ax).unwrap(), o.get(n, c, y, xx).unwrap());
            }}}}
        }

        #[test]
        fn avg_backward_is_adjoint(x in random_map(), k in 1usize..4) {
            let z = avg_pool(&x, k, 2).unwrap();
            let g = z.map(|v| (v * 1.7).sin());
            let gx = avg_pool_backward(&g, x.dims(), k, 2).unwrap();
            let lhs = z.dot(&g).unwrap();
            let rhs = x.dot(&gx).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
