//! 2-D cross-correlation with zero padding, lowered to GEMM through im2col.
//!
//! Batch items are processed in parallel; weight gradients are computed per
//! item and then summed in batch order so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Row-major `c = a * b + beta * c` where `a` is `m x k` and `b` is `k x n`.
/// `a_t` / `b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every element the strides can touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvShape {
    c_in: usize,
    c_out: usize,
    d: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvShape {
    fn new(x: Dims, weight: Dims, pad: usize) -> Result<Self> {
        let [c_out, c_in, d, d2] = weight.as_array();
        if d != d2 || c_in != x.c() {
            return Err(Error::ShapeMismatch {
                expected: Dims::derived(c_out, x.c(), d, d),
                found: weight,
            });
        }
        let (hp, wp) = (x.h() + 2 * pad, x.w() + 2 * pad);
        if d > hp || d > wp {
            return Err(Error::Architecture(format!(
                "kernel {d}x{d} does not fit the padded {hp}x{wp} input"
            )));
        }
        Ok(Self {
            c_in,
            c_out,
            d,
            pad,
            h: x.h(),
            w: x.w(),
            oh: hp - d + 1,
            ow: wp - d + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.d * self.d
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.d == 1 && self.pad == 0
    }

    /// Unrolls one item (`c_in * h * w` values) into a `patch x pixels` matrix.
    fn im2col(&self, item: &[f64], cols: &mut [f64]) {
        let (d, pad, h, w, oh, ow) = (self.d, self.pad as isize, self.h, self.w, self.oh, self.ow);
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &item[c * h * w..(c + 1) * h * w];
            for ky in 0..d {
                for kx in 0..d {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let y = oy as isize + ky as isize - pad;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if y < 0 || y >= h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * w..(y as usize + 1) * w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let x = ox as isize + kx as isize - pad;
                            *v = if x < 0 || x >= w as isize { 0.0 } else { src[x as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`ConvShape::im2col`], accumulating into `item`.
    fn col2im(&self, cols: &[f64], item: &mut [f64]) {
        let (d, pad, h, w, oh, ow) = (self.d, self.pad as isize, self.h, self.w, self.oh, self.ow);
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &mut item[c * h * w..(c + 1) * h * w];
            for ky in 0..d {
                for kx in 0..d {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let y = oy as isize + ky as isize - pad;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * w..(y as usize + 1) * w];
                        for ox in 0..ow {
                            let x = ox as isize + kx as isize - pad;
                            if x >= 0 && x < w as isize {
                                dst[x as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to its input, kernel and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weight: Tensor4,
    pub bias: Tensor4,
}

fn check_bias(bias: &Tensor4, c_out: usize) -> Result<()> {
    if bias.dims().as_array() != [1, c_out, 1, 1] {
        return Err(Error::ShapeMismatch {
            expected: Dims::derived(1, c_out, 1, 1),
            found: bias.dims(),
        });
    }
    Ok(())
}

/// `y[n, o] = bias[o] + sum_{c, ky, kx} weight[o, c, ky, kx] * xpad[n, c, y+ky, x+kx]`.
/// `weight` has dims `(c_out, c_in, d, d)` and `bias` `(1, c_out, 1, 1)`.
pub fn conv2d_forward(x: &Tensor4, weight: &Tensor4, bias: &Tensor4, pad: usize) -> Result<Tensor4> {
    let shape = ConvShape::new(x.dims(), weight.dims(), pad)?;
    check_bias(bias, shape.c_out)?;
    let n = x.dims().n();
    let out_dims = Dims::derived(n, shape.c_out, shape.oh, shape.ow);
    let per_item = shape.c_out * shape.pixels();
    let mut out = vec![0.0; out_dims.len()];
    out.par_chunks_mut(per_item).enumerate().for_each(|(i, y)| {
        for (o, plane) in y.chunks_mut(shape.pixels()).enumerate() {
            plane.fill(bias.data()[o]);
        }
        let item = x.item_slice(i);
        if shape.is_pointwise() {
            gemm(shape.c_out, shape.patch(), shape.pixels(), weight.data(), false, item, false, 1.0, y);
        } else {
            let mut cols = vec![0.0; shape.patch() * shape.pixels()];
            shape.im2col(item, &mut cols);
            gemm(shape.c_out, shape.patch(), shape.pixels(), weight.data(), false, &cols, false, 1.0, y);
        }
    });
    Tensor4::from_vec(out_dims, out)
}

pub fn conv2d_backward(x: &Tensor4, weight: &Tensor4, grad_y: &Tensor4, pad: usize) -> Result<ConvGrads> {
    let shape = ConvShape::new(x.dims(), weight.dims(), pad)?;
    let n = x.dims().n();
    let out_dims = Dims::derived(n, shape.c_out, shape.oh, shape.ow);
    if grad_y.dims() != out_dims {
        return Err(Error::ShapeMismatch {
            expected: out_dims,
            found: grad_y.dims(),
        });
    }
    let (patch, pixels) = (shape.patch(), shape.pixels());
    let per_item: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let item = x.item_slice(i);
            let gy = grad_y.item_slice(i);
            let mut gw = vec![0.0; shape.c_out * patch];
            let mut gx = vec![0.0; item.len()];
            if shape.is_pointwise() {
                gemm(shape.c_out, pixels, patch, gy, false, item, true, 0.0, &mut gw);
                gemm(patch, shape.c_out, pixels, weight.data(), true, gy, false, 0.0, &mut gx);
            } else {
                let mut cols = vec![0.0; patch * pixels];
                shape.im2col(item, &mut cols);
                gemm(shape.c_out, pixels, patch, gy, false, &cols, true, 0.0, &mut gw);
                gemm(patch, shape.c_out, pixels, weight.data(), true, gy, false, 0.0, &mut cols);
                shape.col2im(&cols, &mut gx);
            }
            let gb = gy.chunks(pixels).map(|p| p.iter().sum()).collect();
            (gx, gw, gb)
        })
        .collect();

    let mut gx = Vec::with_capacity(x.dims().len());
    let mut gw = vec![0.0; shape.c_out * patch];
    let mut gb = vec![0.0; shape.c_out];
    for (item_gx, item_gw, item_gb) in per_item {
        gx.extend_from_slice(&item_gx);
        for (a, b) in gw.iter_mut().zip(&item_gw) {
            *a += b;
        }
        for (a, b) in gb.iter_mut().zip(&item_gb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: Tensor4::from_vec(x.dims(), gx)?,
        weight: Tensor4::from_vec(weight.dims(), gw)?,
        bias: Tensor4::from_vec(Dims::derived(1, shape.c_out, 1, 1), gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{RngStream, StreamKey};

    fn random(dims: [usize; 4], seed: u64) -> Tensor4 {
        let mut r = RngStream::new(seed, StreamKey::new(7, 7));
        Tensor4::from_fn(Dims::try_from(dims).unwrap(), |_, _, _, _| r.next_f64() * 2.0 - 1.0)
    }

    /// Direct quadruple loop used as the reference.
    fn naive(x: &Tensor4, w: &Tensor4, b: &Tensor4, pad: usize) -> Tensor4 {
        let [n, c_in, h, wd] = x.dims().as_array();
        let [c_out, _, d, _] = w.dims().as_array();
        let (oh, ow) = (h + 2 * pad - d + 1, wd + 2 * pad - d + 1);
        Tensor4::from_fn(Dims::new(n, c_out, oh, ow).unwrap(), |n, o, y, xx| {
            let mut acc = b.data()[o];
            for c in 0..c_in {
                for ky in 0..d {
                    for kx in 0..d {
                        let iy = (y - 1 + ky) as isize - pad as isize;
                        let ix = (xx - 1 + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.get(o, c, ky + 1, kx + 1).unwrap()
                                * x.get(n, c, iy as usize + 1, ix as usize + 1).unwrap();
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_direct_loop() {
        for (d, pad) in [(1, 0), (3, 1), (5, 2), (3, 0), (2, 1)] {
            let x = random([2, 3, 6, 5], 1);
            let w = random([4, 3, d, d], 2);
            let b = random([1, 4, 1, 1], 3);
            let fast = conv2d_forward(&x, &w, &b, pad).unwrap();
            let slow = naive(&x, &w, &b, pad);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "d={d} pad={pad}");
        }
    }

    #[test]
    fn pointwise_doubling_and_delta_identity() {
        let x = random([1, 1, 4, 4], 4);
        let two = Tensor4::full(Dims::new(1, 1, 1, 1).unwrap(), 2.0);
        let zero_bias = Tensor4::zeros(Dims::new(1, 1, 1, 1).unwrap());
        assert_eq!(conv2d_forward(&x, &two, &zero_bias, 0).unwrap(), x.scale(2.0));
        let mut delta = Tensor4::zeros(Dims::new(1, 1, 3, 3).unwrap());
        delta.data_mut()[4] = 1.0;
        assert_eq!(conv2d_forward(&x, &delta, &zero_bias, 1).unwrap(), x);
    }

    #[test]
    fn shape_errors() {
        let x = random([1, 2, 4, 4], 5);
        let w = random([3, 1, 3, 3], 6);
        let b = Tensor4::zeros(Dims::new(1, 3, 1, 1).unwrap());
        assert!(conv2d_forward(&x, &w, &b, 1).is_err());
        let big = random([3, 2, 7, 7], 6);
        assert!(conv2d_forward(&x, &big, &b, 1).is_err());
        let w_ok = random([3, 2, 3, 3], 6);
        let bad_bias = Tensor4::zeros(Dims::new(1, 2, 1, 1).unwrap());
        assert!(conv2d_forward(&x, &w_ok, &bad_bias, 1).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let x = random([1, 2, 5, 5], 7);
        let w = random([3, 2, 3, 3], 8);
        let b = random([1, 3, 1, 1], 9);
        let r = random([1, 3, 5, 5], 10);
        let loss = |x: &Tensor4, w: &Tensor4, b: &Tensor4| conv2d_forward(x, w, b, 1).unwrap().dot(&r).unwrap();
        let g = conv2d_backward(&x, &w, &r, 1).unwrap();
        let h = 1e-5;
        let check = |analytic: &Tensor4, numeric: Vec<f64>| {
            let num = Tensor4::from_vec(analytic.dims(), numeric).unwrap();
            let err = analytic.sub(&num).unwrap().dot(&analytic.sub(&num).unwrap()).unwrap().sqrt();
            let scale = analytic.dot(analytic).unwrap().sqrt().max(1e-12);
            assert!(err / scale < 1e-4, "relative error {}", err / scale);
        };
        let mut num = Vec::new();
        for i in 0..x.dims().len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            num.push((loss(&p, &w, &b) - loss(&m, &w, &b)) / (2.0 * h));
        }
        check(&g.input, num);
        let mut num = Vec::new();
        for i in 0..w.dims().len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            num.push((loss(&x, &p, &b) - loss(&x, &m, &b)) / (2.0 * h));
        }
        check(&g.weight, num);
        let mut num = Vec::new();
        for i in 0..3 {
            let (mut p, mut m) = (b.clone(), b.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            num.push((loss(&x, &w, &p) - loss(&x, &w, &m)) / (2.0 * h));
        }
        check(&g.bias, num);
    }
}
