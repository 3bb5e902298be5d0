//! Small statistical helpers shared by the solvers and the verification
//! harness: deterministic reductions, moment summaries and least-squares
//! slope fits.
//!
//! Every reduction over a path ensemble goes through [`pairwise_sum`] so
//! that results do not depend on traversal order or chunking.

/// Pairwise (cascade) summation in a fixed order.
///
/// Error grows like O(log n) in the number of terms instead of O(n) for a
/// running sum, and the result is a pure function of the slice contents.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BASE: usize = 32;
    if values.len() <= BASE {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Sample mean together with its standard error.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n < 2 {
        return (mean(values), 0.0);
    }
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (m, (var / n as f64).sqrt())
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    pairwise_sum(&sq) / (n as f64 - 1.0)
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let mx = mean(x);
    let my = mean(y);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Observed convergence order: slope of log(err) against log(h).
///
/// Non-positive errors are clamped to `1e-300` so that a numerically zero
/// error reads as very fast convergence rather than a NaN.
pub fn observed_order(h: &[f64], err: &[f64]) -> f64 {
    let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = err.iter().map(|v| v.max(1e-300).ln()).collect();
    slope(&lx, &ly)
}

/// Two-sided Kolmogorov-Smirnov statistic of `sample` against the CDF `cdf`.
pub fn ks_statistic(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(|a, b| a.partial_cmp(b).expect("NaN in KS sample"));
    let n = sample.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// Asymptotic KS critical value at significance `alpha` for `n` samples.
pub fn ks_critical(alpha: f64, n: usize) -> f64 {
    // c(alpha) = sqrt(-ln(alpha/2)/2)
    ((-(alpha / 2.0).ln()) / 2.0).sqrt() / (n as f64).sqrt()
}

/// Dot product without allocation.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Euclidean norm of a coordinate vector (the `H`-norm on the truncation).
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean distance.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += (x - y) * (x - y);
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let v = [1.0, 2.0, 3.5, -1.25];
        assert_eq!(pairwise_sum(&v), 5.25);
    }

    #[test]
    fn pairwise_is_chunking_independent() {
        let v: Vec<f64> = (0..1000).map(|i| ((i * 37 % 101) as f64).sin()).collect();
        let s1 = pairwise_sum(&v);
        let s2 = pairwise_sum(&v);
        assert_eq!(s1, s2);
        let naive: f64 = v.iter().sum();
        assert!((s1 - naive).abs() < 1e-9);
    }

    #[test]
    fn slope_recovers_linear_trend() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 4.0, 6.0, 8.0];
        assert!((slope(&x, &y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn observed_order_of_quadratic_error_is_two() {
        let h = [0.1, 0.05, 0.025];
        let e: Vec<f64> = h.iter().map(|v| 3.0 * v * v).collect();
        assert!((observed_order(&h, &e) - 2.0).abs() < 1e-10);
    }

    #[test]
    fn ks_statistic_small_for_uniform_grid() {
        // Midpoints of n equal bins against the uniform CDF: D = 1/(2n).
        let n = 1000;
        let mut s: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d = ks_statistic(&mut s, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.5 / n as f64).abs() < 1e-12);
    }
}
