//! Brute-force references for the sampler and its expectation weights.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

use super::{binomial_exact, ExpectationWeights, PoolGeom};

/// Largest number of subsets [`enumerate_grid_subsets`] will materialize.
pub const MAX_SUBSETS: u64 = 1_000_000;

/// All sorted `g/s`-subsets of `1..=g`, in lexicographic order.
pub fn enumerate_grid_subsets(g: usize, s: usize) -> Result<Vec<Vec<usize>>> {
    let geom = PoolGeom::new(1, s, g)?;
    let m = geom.per_grid();
    let total = binomial_exact(g as u64, m as u64)?;
    if total > MAX_SUBSETS {
        return Err(Error::Sampling(format!(
            "C({g}, {m}) = {total} subsets exceeds the enumeration limit of {MAX_SUBSETS}"
        )));
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut current: Vec<usize> = (1..=m).collect();
    loop {
        out.push(current.clone());
        // Advance to the next combination: bump the rightmost slot that can move.
        let Some(i) = (0..m).rev().find(|&i| current[i] < g - m + i + 1) else {
            break;
        };
        current[i] += 1;
        for j in i + 1..m {
            current[j] = current[j - 1] + 1;
        }
    }
    Ok(out)
}

/// Marginal distribution of the `pos`-th smallest selected index, counted
/// over every subset.
pub fn brute_force_weights(g: usize, s: usize, pos: usize) -> Result<ExpectationWeights> {
    let subsets = enumerate_grid_subsets(g, s)?;
    let mut counts = vec![0u64; g];
    for subset in &subsets {
        let v = *subset
            .get(pos.wrapping_sub(1))
            .ok_or_else(|| Error::Sampling(format!("position {pos} outside 1..={}", subset.len())))?;
        counts[v - 1] += 1;
    }
    Ok(ExpectationWeights::from_parts(counts, subsets.len() as u64))
}

/// Pearson goodness-of-fit against equal cell probabilities.
#[derive(Clone, Copy, Debug)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

pub fn chi_square_uniform(counts: &[u64]) -> Result<ChiSquareResult> {
    if counts.len() < 2 {
        return Err(Error::Sampling("chi-square needs at least two cells".into()));
    }
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let statistic = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum::<f64>();
    let dof = counts.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Sampling(e.to_string()))?;
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value: 1.0 - dist.cdf(statistic),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::expectation_weights;

    #[test]
    fn small_enumerations() {
        assert_eq!(enumerate_grid_subsets(2, 2).unwrap(), vec![vec![1], vec![2]]);
        assert_eq!(enumerate_grid_subsets(4, 4).unwrap(), vec![vec![1], vec![2], vec![3], vec![4]]);
        let six = enumerate_grid_subsets(4, 2).unwrap();
        assert_eq!(
            six,
            vec![vec![1, 2], vec![1, 3], vec![1, 4], vec![2, 3], vec![2, 4], vec![3, 4]]
        );
        assert_eq!(enumerate_grid_subsets(3, 1).unwrap(), vec![vec![1, 2, 3]]);
    }

    #[test]
    fn enumeration_is_exhaustive_and_distinct() {
        for (g, s) in [(6, 2), (6, 3), (8, 2), (8, 4), (12, 3)] {
            let all = enumerate_grid_subsets(g, s).unwrap();
            assert_eq!(all.len() as u64, binomial_exact(g as u64, (g / s) as u64).unwrap());
            let mut dedup = all.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), all.len());
            assert!(all.iter().all(|v| v.windows(2).all(|p| p[0] < p[1])));
        }
    }

    #[test]
    fn explosion_guard() {
        assert!(enumerate_grid_subsets(32, 2).is_err());
        assert!(enumerate_grid_subsets(4, 3).is_err());
    }

    #[test]
    fn closed_form_matches_brute_force() {
        for g in 1..=8 {
            for s in (1..=g).filter(|s| g % s == 0) {
                let geom = PoolGeom::new(1, s, g).unwrap();
                for pos in 1..=g / s {
                    let closed = expectation_weights(&geom, pos).unwrap();
                    let brute = brute_force_weights(g, s, pos).unwrap();
                    assert!(closed.exactly_equals(&brute), "g={g} s={s} pos={pos}");
                }
            }
        }
    }

    #[test]
    fn chi_square_basics() {
        let flat = chi_square_uniform(&[100, 100, 100, 100]).unwrap();
        assert_eq!(flat.statistic, 0.0);
        assert!((flat.p_value - 1.0).abs() < 1e-12);
        let skew = chi_square_uniform(&[400, 0, 0, 0]).unwrap();
        assert!(skew.p_value < 1e-10);
        assert!(chi_square_uniform(&[5]).is_err());
    }
}
