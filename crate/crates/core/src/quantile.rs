//! The single empirical quantile convention used throughout the crate.
//!
//! The `q`-quantile of `n` sorted values is the order statistic at 1-based
//! index `ceil(q * n)`, i.e. the smallest value whose empirical fraction is at
//! least `q`.

/// 1-based order-statistic index of the `q`-quantile of `n` values.
///
/// A relative slack of `1e-12` absorbs rounding in `q * n` so that, e.g.,
/// `0.997 * 1000` maps to 997 rather than 998.
pub fn quantile_index(q: f64, n: usize) -> usize {
    assert!(n > 0, "quantile of an empty sample");
    let x = q * n as f64;
    let k = (x - x.abs() * 1e-12 - 1e-12).ceil();
    (k.max(1.0) as usize).min(n)
}

/// `q`-quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    sorted[quantile_index(q, sorted.len()) - 1]
}

/// `q`-quantile of an unsorted sample, reordering `values` in place.
pub fn quantile_select(values: &mut [f64], q: f64) -> f64 {
    let k = quantile_index(q, values.len()) - 1;
    *values.select_nth_unstable_by(k, f64::total_cmp).1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_arithmetic() {
        assert_eq!(quantile_index(1.0 - 0.003, 1000), 997);
        assert_eq!(quantile_index(0.997, 1000), 997);
        assert_eq!(quantile_index(0.5, 10), 5);
        assert_eq!(quantile_index(0.51, 10), 6);
        assert_eq!(quantile_index(1e-9, 10), 1);
        assert_eq!(quantile_index(1.0, 10), 10);
        assert_eq!(quantile_index(1.0 - 0.003, 300), 300);
    }

    #[test]
    fn select_agrees_with_sort() {
        let mut v: Vec<f64> = (0..101).map(|i| ((i * 37) % 101) as f64).collect();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        for q in [0.01, 0.25, 0.5, 0.9, 0.997, 1.0] {
            assert_eq!(quantile_select(&mut v, q), quantile_sorted(&s, q));
        }
    }
}
