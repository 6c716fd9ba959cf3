//! Randomness and combinatorics behind stochastic spatial downsampling.
//!
//! A feature map of height `h` is cut into `h / g` disjoint horizontal
//! strips of `g` rows. From every strip, `g / s` rows are drawn uniformly
//! without replacement and kept in increasing order; columns are drawn the
//! same way, independently. The result is a [`SampleIndices`] value that the
//! pooling operators use as a gather pattern.

mod combinatorics;
pub mod oracle;
mod rng;

pub use combinatorics::{binomial_exact, expectation_weights, ExpectationWeights, MAX_GRID};
pub use rng::{RngStream, StreamKey};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pooling hyperparameters: window `k`, stride `s` and grid size `g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGeom")]
pub struct PoolGeom {
    k: usize,
    s: usize,
    g: usize,
}

#[derive(Deserialize)]
struct RawGeom {
    k: usize,
    s: usize,
    g: usize,
}

impl TryFrom<RawGeom> for PoolGeom {
    type Error = Error;
    fn try_from(r: RawGeom) -> Result<Self> {
        PoolGeom::new(r.k, r.s, r.g)
    }
}

impl PoolGeom {
    pub fn new(k: usize, s: usize, g: usize) -> Result<Self> {
        if k == 0 || s == 0 {
            return Err(Error::geometry(format!("window {k} and stride {s} must be >= 1")));
        }
        if g < s || g % s != 0 {
            return Err(Error::geometry(format!(
                "grid size {g} must be a multiple of the stride {s}"
            )));
        }
        Ok(Self { k, s, g })
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn s(&self) -> usize {
        self.s
    }
    pub fn g(&self) -> usize {
        self.g
    }

    /// Rows (or columns) kept per grid strip.
    pub fn per_grid(&self) -> usize {
        self.g / self.s
    }

    /// Checks that the grid tiles an `h` x `w` map exactly.
    pub fn check_map(&self, h: usize, w: usize) -> Result<()> {
        if h % self.g != 0 || w % self.g != 0 {
            return Err(Error::geometry(format!(
                "grid size {} does not divide the {h}x{w} feature map",
                self.g
            )));
        }
        Ok(())
    }
}

/// Sorted, 1-based row and column indices chosen by one downsampling draw.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleIndices {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl SampleIndices {
    /// Checks the per-strip and global ordering invariants against `geom`.
    pub fn is_valid_for(&self, h: usize, w: usize, geom: &PoolGeom) -> bool {
        valid_axis(&self.rows, h, geom) && valid_axis(&self.cols, w, geom)
    }
}

fn valid_axis(idx: &[usize], extent: usize, geom: &PoolGeom) -> bool {
    let g = geom.g();
    let m = geom.per_grid();
    if extent % g != 0 || idx.len() != extent / geom.s() {
        return false;
    }
    if idx.windows(2).any(|p| p[0] >= p[1]) {
        return false;
    }
    idx.chunks(m).enumerate().all(|(p, chunk)| {
        let (lo, hi) = (p * g + 1, (p + 1) * g);
        chunk.iter().all(|&i| (lo..=hi).contains(&i))
    })
}

/// Draws `m` distinct integers uniformly from `[a, b]` and returns them in
/// increasing order. Every `m`-subset is equally likely.
pub fn sample_sorted_without_replacement(
    rng: &mut RngStream,
    a: usize,
    b: usize,
    m: usize,
) -> Result<Vec<usize>> {
    if b < a {
        return Err(Error::Sampling(format!("empty interval [{a}, {b}]")));
    }
    let size = b - a + 1;
    if m == 0 || m > size {
        return Err(Error::Sampling(format!(
            "cannot draw {m} values from an interval of {size}"
        )));
    }
    // Partial Fisher-Yates: the first m slots of a uniform permutation.
    let mut pool: Vec<usize> = (a..=b).collect();
    for i in 0..m {
        let j = i + rng.below((size - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(m);
    pool.sort_unstable();
    Ok(pool)
}

const COLUMN_STREAM: u64 = 1 << 63;

/// Draws the row and column pattern for an `h` x `w` map. Each strip uses its
/// own substream of `rng`, so the call does not advance `rng` and repeating
/// it reproduces the same indices.
pub fn sample_grid_indices(rng: &RngStream, h: usize, w: usize, geom: &PoolGeom) -> Result<SampleIndices> {
    geom.check_map(h, w)?;
    let g = geom.g();
    let m = geom.per_grid();
    let axis = |extent: usize, tag: u64| -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(extent / geom.s());
        for p in 0..extent / g {
            let mut sub = rng.substream(tag | p as u64);
            out.extend(sample_sorted_without_replacement(&mut sub, p * g + 1, (p + 1) * g, m)?);
        }
        Ok(out)
    };
    Ok(SampleIndices {
        rows: axis(h, 0)?,
        cols: axis(w, COLUMN_STREAM)?,
    })
}
