//! Dense rank-4 tensors in (batch, channel, height, width) order.
//!
//! Spatial coordinates in the public API are 1-based: row `y` ranges over
//! `1..=h` and column `x` over `1..=w`. Batch and channel coordinates are
//! ordinary 0-based offsets. The buffer itself is contiguous row-major.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validated tensor dimensions. Every axis is at least one and the total
/// element count fits in `usize`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 4]", into = "[usize; 4]")]
pub struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let raw = [n, c, h, w];
        if raw.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDims(raw));
        }
        let len = raw
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::InvalidDims(raw))?;
        // Keep the byte size addressable as well.
        if len.checked_mul(std::mem::size_of::<f64>()).is_none() || len > isize::MAX as usize / 8 {
            return Err(Error::InvalidDims(raw));
        }
        Ok(Self { n, c, h, w })
    }

    /// Constructor for dimensions derived from already valid ones.
    pub(crate) fn derived(n: usize, c: usize, h: usize, w: usize) -> Self {
        debug_assert!(n > 0 && c > 0 && h > 0 && w > 0);
        Self { n, c, h, w }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Always false: a valid `Dims` has at least one element.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of elements in one spatial plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_spatial(&self, h: usize, w: usize) -> Result<Self> {
        Dims::new(self.n, self.c, h, w)
    }

    pub fn with_batch(&self, n: usize) -> Result<Self> {
        Dims::new(n, self.c, self.h, self.w)
    }
}

impl TryFrom<[usize; 4]> for Dims {
    type Error = Error;

    fn try_from(d: [usize; 4]) -> Result<Self> {
        Dims::new(d[0], d[1], d[2], d[3])
    }
}

impl From<Dims> for [usize; 4] {
    fn from(d: Dims) -> Self {
        d.as_array()
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Axis selector for reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    N,
    C,
    H,
    W,
}

impl Axis {
    fn position(self) -> usize {
        match self {
            Axis::N => 0,
            Axis::C => 1,
            Axis::H => 2,
            Axis::W => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Max,
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::BufferLength {
                len: data.len(),
                dims,
            });
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position, with
    /// 1-based `y` and `x`.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 1..=dims.h {
                    for x in 1..=dims.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Buffer offset of `(n, c, y, x)` with 1-based spatial coordinates.
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> Result<usize> {
        let d = self.dims;
        if n >= d.n {
            return Err(Error::IndexOutOfRange { index: n, bound: d.n - 1 });
        }
        if c >= d.c {
            return Err(Error::IndexOutOfRange { index: c, bound: d.c - 1 });
        }
        check_spatial(y, d.h)?;
        check_spatial(x, d.w)?;
        Ok(((n * d.c + c) * d.h + (y - 1)) * d.w + (x - 1))
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> Result<f64> {
        Ok(self.data[self.offset(n, c, y, x)?])
    }

    /// Contiguous spatial plane of batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub(crate) fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of batch item `n`, contiguous.
    pub fn item_slice(&self, n: usize) -> &[f64] {
        let len = self.dims.c * self.dims.plane();
        &self.data[n * len..(n + 1) * len]
    }

    /// Copy of batch item `n` as a tensor with batch size one.
    pub fn item(&self, n: usize) -> Result<Tensor4> {
        if n >= self.dims.n {
            return Err(Error::IndexOutOfRange { index: n, bound: self.dims.n - 1 });
        }
        let dims = Dims::derived(1, self.dims.c, self.dims.h, self.dims.w);
        Ok(Tensor4 {
            dims,
            data: self.item_slice(n).to_vec(),
        })
    }

    /// Concatenates tensors along the batch axis. All parts must agree on
    /// channel and spatial dimensions.
    pub fn stack(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts.first().ok_or(Error::EmptyIndexList)?;
        let d = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if (p.dims.c, p.dims.h, p.dims.w) != (d.c, d.h, d.w) {
                return Err(Error::ShapeMismatch { expected: d, found: p.dims });
            }
            n += p.dims.n;
            data.extend_from_slice(&p.data);
        }
        Tensor4::from_vec(Dims::new(n, d.c, d.h, d.w)?, data)
    }

    /// Items `indices` (0-based) gathered along the batch axis.
    pub fn select_items(&self, indices: &[usize]) -> Result<Tensor4> {
        if indices.is_empty() {
            return Err(Error::EmptyIndexList);
        }
        let mut data = Vec::with_capacity(indices.len() * self.item_slice(0).len());
        for &i in indices {
            if i >= self.dims.n {
                return Err(Error::IndexOutOfRange { index: i, bound: self.dims.n - 1 });
            }
            data.extend_from_slice(self.item_slice(i));
        }
        Tensor4::from_vec(self.dims.with_batch(indices.len())?, data)
    }

    pub fn reshape(self, dims: Dims) -> Result<Tensor4> {
        Tensor4::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                expected: self.dims,
                found: other.dims,
            });
        }
        Ok(Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor4 {
        self.map(|v| v * factor)
    }

    pub fn add_scalar(&self, value: f64) -> Tensor4 {
        self.map(|v| v + value)
    }

    /// In-place `self += other`.
    pub(crate) fn accumulate(&mut self, other: &Tensor4) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                expected: self.dims,
                found: other.dims,
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Inner product over all elements.
    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                expected: self.dims,
                found: other.dims,
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        let d = self.sub(other)?;
        Ok(d.data.iter().fold(0.0, |m, v| m.max(v.abs())))
    }

    /// Reduces over `axes`, keeping reduced axes as singletons.
    pub fn reduce(&self, op: Reduction, axes: &[Axis]) -> Result<Tensor4> {
        if axes.is_empty() {
            return Err(Error::EmptyReduction);
        }
        let src = self.dims.as_array();
        let mut keep = [true; 4];
        for a in axes {
            keep[a.position()] = false;
        }
        let out_shape: [usize; 4] = std::array::from_fn(|i| if keep[i] { src[i] } else { 1 });
        let out_dims = Dims::derived(out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
        let init = match op {
            Reduction::Max => f64::NEG_INFINITY,
            Reduction::Mean | Reduction::Sum => 0.0,
        };
        let mut out = vec![init; out_dims.len()];
        let mut idx = 0;
        for n in 0..src[0] {
            for c in 0..src[1] {
                for y in 0..src[2] {
                    for x in 0..src[3] {
                        let full = [n, c, y, x];
                        let o: [usize; 4] = std::array::from_fn(|i| if keep[i] { full[i] } else { 0 });
                        let slot = ((o[0] * out_shape[1] + o[1]) * out_shape[2] + o[2]) * out_shape[3] + o[3];
                        let v = self.data[idx];
                        match op {
                            Reduction::Max => out[slot] = out[slot].max(v),
                            Reduction::Mean | Reduction::Sum => out[slot] += v,
                        }
                        idx += 1;
                    }
                }
            }
        }
        if op == Reduction::Mean {
            let count = (self.dims.len() / out_dims.len()) as f64;
            for v in &mut out {
                *v /= count;
            }
        }
        Ok(Tensor4 { dims: out_dims, data: out })
    }

    /// Gathers the given rows and columns (1-based) of every plane:
    /// `out[n, c, i, j] = self[n, c, rows[i], cols[j]]`.
    pub fn slice_rows_cols(&self, rows: &[usize], cols: &[usize]) -> Result<Tensor4> {
        check_index_list(rows, self.dims.h)?;
        check_index_list(cols, self.dims.w)?;
        let out_dims = Dims::derived(self.dims.n, self.dims.c, rows.len(), cols.len());
        let mut data = Vec::with_capacity(out_dims.len());
        let w = self.dims.w;
        for n in 0..self.dims.n {
            for c in 0..self.dims.c {
                let plane = self.plane(n, c);
                for &r in rows {
                    let row = &plane[(r - 1) * w..r * w];
                    data.extend(cols.iter().map(|&col| row[col - 1]));
                }
            }
        }
        Ok(Tensor4 { dims: out_dims, data })
    }

    /// Adjoint of [`Tensor4::slice_rows_cols`]: a zero tensor of
    /// `target` dims with `self[n, c, i, j]` added at `(rows[i], cols[j])`.
    pub fn scatter_add_rows_cols(&self, rows: &[usize], cols: &[usize], target: Dims) -> Result<Tensor4> {
        if self.dims.h != rows.len()
            || self.dims.w != cols.len()
            || self.dims.n != target.n
            || self.dims.c != target.c
        {
            return Err(Error::ShapeMismatch {
                expected: Dims::derived(target.n, target.c, rows.len().max(1), cols.len().max(1)),
                found: self.dims,
            });
        }
        check_index_list(rows, target.h)?;
        check_index_list(cols, target.w)?;
        let mut out = Tensor4::zeros(target);
        let tw = target.w;
        for n in 0..target.n {
            for c in 0..target.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for (i, &r) in rows.iter().enumerate() {
                    for (j, &col) in cols.iter().enumerate() {
                        dst[(r - 1) * tw + (col - 1)] += src[i * cols.len() + j];
                    }
                }
            }
        }
        Ok(out)
    }
}

fn check_spatial(index: usize, bound: usize) -> Result<()> {
    if index == 0 || index > bound {
        return Err(Error::IndexOutOfRange { index, bound });
    }
    Ok(())
}

fn check_index_list(list: &[usize], bound: usize) -> Result<()> {
    if list.is_empty() {
        return Err(Error::EmptyIndexList);
    }
    list.iter().try_for_each(|&i| check_spatial(i, bound))
}
