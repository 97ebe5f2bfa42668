//! Small descriptive statistics used by the estimators and reports.

use alloc::vec;
use alloc::vec::Vec;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by `n`).
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Population variance as the mean squared pairwise difference,
/// `sum_{j<l} (x_j - x_l)^2 / n^2`. Only differences of inputs enter, so a
/// shift that is exact in floating point leaves the result bit-identical.
pub fn pairwise_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (j, &a) in xs.iter().enumerate() {
        for &b in &xs[j + 1..] {
            acc += (a - b) * (a - b);
        }
    }
    acc / (n * n) as f64
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / libm::sqrt(sxx * syy)
}

/// Spearman rank correlation (Pearson on average ranks). Degenerate ranks
/// give 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[1.0, 4.0, 9.0, 100.0]) - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0; 4], &[1.0; 4]), 0.0);
    }

    #[test]
    fn variance() {
        assert_eq!(population_variance(&[0.0, 2.0]), 1.0);
        assert!((population_variance(&[-1.0, 1.0, 1.0, 1.0]) - 0.75).abs() < 1e-15);
        assert_eq!(pairwise_variance(&[0.0, 2.0]), 1.0);
        assert_eq!(pairwise_variance(&[-1.0, 1.0, 1.0, 1.0]), 0.75);
        assert_eq!(pairwise_variance(&[]), 0.0);
        assert_eq!(pairwise_variance(&[5.0]), 0.0);
    }
}
