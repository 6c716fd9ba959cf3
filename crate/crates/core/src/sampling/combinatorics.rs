use crate::error::{Error, Result};

use super::PoolGeom;

/// Largest grid size for which exact weights are computed.
pub const MAX_GRID: usize = 64;

/// Exact `C(n, k)` for `0 <= k <= n <= 64`.
pub fn binomial_exact(n: u64, k: u64) -> Result<u64> {
    if k > n || n > MAX_GRID as u64 {
        return Err(Error::BinomialRange { n, k });
    }
    let k = k.min(n - k);
    // acc stays equal to C(n - k + i, i), so every division is exact.
    let mut acc: u128 = 1;
    for i in 1..=k as u128 {
        acc = acc * (n as u128 - k as u128 + i) / i;
    }
    Ok(acc as u64)
}

/// Marginal distribution of the `pos`-th smallest of `g / s` indices drawn
/// without replacement from `1..=g`, as exact fractions over a common
/// denominator `C(g, g/s)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpectationWeights {
    numerators: Vec<u64>,
    denominator: u64,
}

impl ExpectationWeights {
    pub fn from_parts(numerators: Vec<u64>, denominator: u64) -> Self {
        Self {
            numerators,
            denominator,
        }
    }

    /// Numerators indexed by `a - 1` for `a` in `1..=g`.
    pub fn numerators(&self) -> &[u64] {
        &self.numerators
    }

    pub fn denominator(&self) -> u64 {
        self.denominator
    }

    /// Weight of offset `a` (1-based) as a float.
    pub fn weight(&self, a: usize) -> f64 {
        self.numerators[a - 1] as f64 / self.denominator as f64
    }

    pub fn to_f64(&self) -> Vec<f64> {
        let d = self.denominator as f64;
        self.numerators.iter().map(|&n| n as f64 / d).collect()
    }

    /// Exact check that the weights sum to one.
    pub fn sums_to_one(&self) -> bool {
        self.numerators.iter().map(|&n| n as u128).sum::<u128>() == self.denominator as u128
    }

    /// Exact rational equality with `other`, independent of denominators.
    pub fn exactly_equals(&self, other: &ExpectationWeights) -> bool {
        self.numerators.len() == other.numerators.len()
            && self.numerators.iter().zip(&other.numerators).all(|(&a, &b)| {
                a as u128 * other.denominator as u128 == b as u128 * self.denominator as u128
            })
    }
}

/// `h_a = C(a-1, pos-1) C(g-a, m-pos) / C(g, m)` for `a` in `1..=g`, where
/// `m = g / s` and `pos` is the within-strip output position in `1..=m`.
pub fn expectation_weights(geom: &PoolGeom, pos: usize) -> Result<ExpectationWeights> {
    let g = geom.g();
    let m = geom.per_grid();
    if g > MAX_GRID {
        return Err(Error::geometry(format!(
            "exact expectation supports grid sizes up to {MAX_GRID}, got {g}"
        )));
    }
    if pos == 0 || pos > m {
        return Err(Error::geometry(format!("within-grid position {pos} outside 1..={m}")));
    }
    let denominator = binomial_exact(g as u64, m as u64)?;
    let numerators = (1..=g)
        .map(|a| {
            if a < pos || a > g - m + pos {
                return Ok(0);
            }
            let left = binomial_exact((a - 1) as u64, (pos - 1) as u64)?;
            let right = binomial_exact((g - a) as u64, (m - pos) as u64)?;
            Ok((left as u128 * right as u128) as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpectationWeights {
        numerators,
        denominator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomials() {
        assert_eq!(binomial_exact(0, 0).unwrap(), 1);
        assert_eq!(binomial_exact(4, 2).unwrap(), 6);
        assert_eq!(binomial_exact(8, 4).unwrap(), 70);
        assert_eq!(binomial_exact(64, 32).unwrap(), 1_832_624_140_942_590_534);
        assert_eq!(binomial_exact(64, 1).unwrap(), 64);
        assert!(binomial_exact(3, 4).is_err());
        assert!(binomial_exact(65, 1).is_err());
    }

    #[test]
    fn pascal_rule() {
        for n in 1..=64u64 {
            for k in 1..n {
                let lhs = binomial_exact(n, k).unwrap() as u128;
                let rhs = binomial_exact(n - 1, k - 1).unwrap() as u128 + binomial_exact(n - 1, k).unwrap() as u128;
                assert_eq!(lhs, rhs, "C({n},{k})");
            }
        }
    }

    #[test]
    fn weights_g4_s2() {
        let geom = PoolGeom::new(2, 2, 4).unwrap();
        let first = expectation_weights(&geom, 1).unwrap();
        assert_eq!(first.denominator(), 6);
        assert_eq!(first.numerators(), &[3, 2, 1, 0]);
        let second = expectation_weights(&geom, 2).unwrap();
        assert_eq!(second.numerators(), &[0, 1, 2, 3]);
        assert!(expectation_weights(&geom, 3).is_err());
        assert!(expectation_weights(&geom, 0).is_err());
    }

    #[test]
    fn weights_reduce_to_uniform_when_grid_equals_stride() {
        for s in 1..=8 {
            let geom = PoolGeom::new(2, s, s).unwrap();
            let w = expectation_weights(&geom, 1).unwrap();
            let uniform = ExpectationWeights::from_parts(vec![1; s], s as u64);
            assert!(w.exactly_equals(&uniform), "s = {s}");
        }
    }

    #[test]
    fn weights_sum_to_one_and_vanish_outside_support() {
        for g in [2usize, 4, 6, 8, 16, 32, 64] {
            for s in (1..=g).filter(|s| g % s == 0) {
                let geom = PoolGeom::new(1, s, g).unwrap();
                let m = geom.per_grid();
                for pos in 1..=m {
                    let w = expectation_weights(&geom, pos).unwrap();
                    assert!(w.sums_to_one(), "g={g} s={s} pos={pos}");
                    for a in 1..=g {
                        if a < pos || a > g - m + pos {
                            assert_eq!(w.numerators()[a - 1], 0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_grid_rejected() {
        let geom = PoolGeom::new(2, 2, 128).unwrap();
        assert!(expectation_weights(&geom, 1).is_err());
    }
}
