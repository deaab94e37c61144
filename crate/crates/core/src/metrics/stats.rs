use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("samples", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::Insufficient("correlation needs at least 2 samples".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Insufficient("a constant sample has no correlation".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("samples", a.len(), b.len()));
    }
    pearson(&ranks(a), &ranks(b))
}

/// Integer-valued histogram with a robust Laplace fit.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub counts: BTreeMap<i32, u64>,
    pub total: u64,
    /// Median, the location estimate.
    pub mu_hat: f64,
    /// Mean absolute deviation from the median, the scale estimate.
    pub b_hat: f64,
    pub zero_fraction: f64,
}

impl Histogram {
    pub fn from_values(values: &[f32]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Insufficient("histogram of no values".into()));
        }
        let mut counts = BTreeMap::new();
        for v in values {
            *counts.entry(v.round() as i32).or_insert(0u64) += 1;
        }
        let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mu_hat = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        let b_hat = sorted.iter().map(|v| (v - mu_hat).abs()).sum::<f64>() / n as f64;
        let zeros = counts.get(&0).copied().unwrap_or(0);
        Ok(Histogram { counts, total: n as u64, mu_hat, b_hat, zero_fraction: zeros as f64 / n as f64 })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::from_values(t.data())
    }

    /// Empirical probability of bin `k`.
    pub fn prob(&self, k: i32) -> f64 {
        self.counts.get(&k).copied().unwrap_or(0) as f64 / self.total as f64
    }

    /// Probability of bin `k` under the fitted discretized Laplacian.
    pub fn fitted_prob(&self, k: i32) -> f64 {
        let b = self.b_hat.max(1e-9);
        crate::entropy::laplace_mass(k as f64, self.mu_hat, b.ln())
    }

    /// `(value, count)` rows for CSV output.
    pub fn rows(&self) -> impl Iterator<Item = (i32, u64)> + '_ {
        self.counts.iter().map(|(k, c)| (*k, *c))
    }
}

/// Largest gap between the cumulative bin distributions of two histograms.
pub fn ks_distance(a: &Histogram, b: &Histogram) -> f64 {
    let keys: std::collections::BTreeSet<i32> = a.counts.keys().chain(b.counts.keys()).copied().collect();
    let (mut ca, mut cb, mut best) = (0.0, 0.0, 0.0f64);
    for k in keys {
        ca += a.prob(k);
        cb += b.prob(k);
        best = best.max((ca - cb).abs());
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_known_values() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&a, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // d = (1, -1, 0, 0, 0): 1 - 6*2/(5*24)
        let r = spearman(&a, &[2.0, 1.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-12);
        assert!(spearman(&a, &[1.0; 5]).is_err());
    }

    #[test]
    fn histogram_fit() {
        let v = [0.0, 0.0, 0.0, 1.0, -1.0, 2.0, -2.0];
        let h = Histogram::from_values(&v).unwrap();
        assert_eq!(h.mu_hat, 0.0);
        assert!((h.b_hat - 6.0 / 7.0).abs() < 1e-12);
        assert!((h.zero_fraction - 3.0 / 7.0).abs() < 1e-12);
        let s: f64 = (-40..=40).map(|k| h.fitted_prob(k)).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ks_of_identical_and_disjoint() {
        let a = Histogram::from_values(&[0.0, 1.0, 1.0]).unwrap();
        let b = Histogram::from_values(&[5.0, 6.0]).unwrap();
        assert_eq!(ks_distance(&a, &a), 0.0);
        assert!((ks_distance(&a, &b) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn spearman_is_bounded_and_monotone_invariant(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..40)) {
            let a: Vec<f64> = v.iter().map(|p| p.0).collect();
            let b: Vec<f64> = v.iter().map(|p| p.1).collect();
            if let Ok(r) = spearman(&a, &b) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
                let cubed: Vec<f64> = a.iter().map(|x| x * x * x).collect();
                prop_assert!((spearman(&cubed, &b).unwrap() - r).abs() < 1e-9);
            }
        }
    }
}
