//! Two-sided Mann–Whitney U test.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Below this size of the smaller group the null distribution is
/// enumerated exactly.
pub const EXACT_BELOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Average ranks (1-based) of the pooled sample, doubled so ties stay
/// integral, plus the tie-group sizes.
fn doubled_ranks(pooled: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 averaged, doubled: (i + 1) + (j + 1).
        let r2 = (i + j + 2) as u64;
        for &k in &idx[i..=j] {
            ranks[k] = r2;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Parameter("both samples must be nonempty".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Data("samples must be finite".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_ranks(&pooled);
    let r2: u64 = ranks[..na].iter().sum();
    let u = r2 as f64 / 2.0 - (na * (na + 1)) as f64 / 2.0;

    if na.min(nb) < EXACT_BELOW {
        return Ok(MannWhitney { u, p_value: exact_p(&ranks, na, r2), exact: true });
    }
    let mu = (na * nb) as f64 / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1)) as f64;
    let var = (na * nb) as f64 / 12.0 * ((n + 1) as f64 - tie_term);
    if var <= 0.0 {
        return Ok(MannWhitney { u, p_value: 1.0, exact: false });
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    let p = (2.0 * (1.0 - normal.cdf(z))).min(1.0);
    Ok(MannWhitney { u, p_value: p, exact: false })
}

/// P(|R − μ| ≥ |r − μ|) over all equally likely assignments of `na` of
/// the pooled (doubled) ranks to the first group.
fn exact_p(ranks: &[u64], na: usize, observed: u64) -> f64 {
    let max_sum: u64 = ranks.iter().sum();
    let width = max_sum as usize + 1;
    // counts[k][s]: subsets of size k with doubled rank sum s.
    let mut counts = vec![vec![0u128; width]; na + 1];
    counts[0][0] = 1;
    for &r in ranks {
        for k in (1..=na).rev() {
            let (lo, hi) = counts.split_at_mut(k);
            let prev = &lo[k - 1];
            let cur = &mut hi[0];
            for s in (r as usize..width).rev() {
                cur[s] += prev[s - r as usize];
            }
        }
    }
    let n = ranks.len() as u64;
    // Mean of the doubled sum is na·(n + 1).
    let mu2 = na as i128 * (n as i128 + 1);
    let dev = (observed as i128 - mu2).abs();
    let (mut extreme, mut total) = (0u128, 0u128);
    for (s, &c) in counts[na].iter().enumerate() {
        total += c;
        if (s as i128 - mu2).abs() >= dev {
            extreme += c;
        }
    }
    extreme as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn classic_example() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!((r.p_value - 0.1).abs() < 1e-15);
        assert!(r.exact);
    }

    #[test]
    fn identical_samples_have_p_one() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mann_whitney_u(&a, &a).unwrap().p_value, 1.0);
        let big: Vec<f64> = (0..20).map(|k| k as f64).collect();
        assert!(mann_whitney_u(&big, &big).unwrap().p_value > 0.95);
        assert_eq!(mann_whitney_u(&[2.0; 10], &[2.0; 10]).unwrap().p_value, 1.0);
    }

    #[test]
    fn normal_approximation_for_large_groups() {
        let a: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let b: Vec<f64> = (0..20).map(|k| k as f64 + 10.5).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.0 && r.p_value < 0.01);
    }

    #[test]
    fn empty_sample_rejected() {
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn swapping_samples_keeps_p(a in prop::collection::vec(0u8..6, 1..9), b in prop::collection::vec(0u8..6, 1..9)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let ab = mann_whitney_u(&a, &b).unwrap();
            let ba = mann_whitney_u(&b, &a).unwrap();
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
            prop_assert!((ab.u + ba.u - (a.len() * b.len()) as f64).abs() < 1e-9);
            prop_assert!(ab.p_value > 0.0 && ab.p_value <= 1.0);
        }
    }
}
