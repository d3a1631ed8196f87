//! Reference distribution of in-control residuals with exponential tails.
//!
//! The body is the empirical cdf `F` of a residual sample. Below `r_p` and
//! above `r_{1-p}` it is replaced by exponential tails whose rates are the
//! maximum likelihood estimates from the `q_l` / `q_u` tail observations, so
//! the cdf is strictly inside `(0, 1)` for every finite residual.

use crate::error::{Error, Result};
use crate::quantile::quantile_sorted;

/// Default number of observations per tail used for rate estimation.
pub const DEFAULT_TAIL_COUNT: f64 = 400.0;
/// Default count behind the patch probability `p = 5 / M`.
pub const DEFAULT_PATCH_COUNT: f64 = 5.0;

/// Largest double below one; keeps `eval` strictly inside the unit interval.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCdf {
    sorted: Vec<f64>,
    q_lower: f64,
    q_upper: f64,
    p: f64,
    lambda_lower: f64,
    lambda_upper: f64,
    r_p: f64,
    r_1mp: f64,
    r_ql: f64,
    r_1mqu: f64,
}

impl ReferenceCdf {
    /// Fit with `q_l = q_u = 400 / M` and `p = 5 / M`, clamped so that
    /// `p <= q` for small samples.
    pub fn fit_default(residuals: Vec<f64>) -> Result<Self> {
        let m = residuals.len() as f64;
        if m == 0.0 {
            return Err(Error::InsufficientTail("empty residual sample".into()));
        }
        let q = (DEFAULT_TAIL_COUNT / m).min(0.25);
        let p = (DEFAULT_PATCH_COUNT / m).min(q);
        Self::fit(residuals, q, q, p)
    }

    pub fn fit(mut residuals: Vec<f64>, q_lower: f64, q_upper: f64, p: f64) -> Result<Self> {
        for (name, q) in [("q_lower", q_lower), ("q_upper", q_upper)] {
            if !(q > 0.0 && q < 0.5) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 0.5), got {q}")));
            }
        }
        if !(p > 0.0 && p <= q_lower.min(q_upper)) {
            return Err(Error::InvalidConfig(format!("p must lie in (0, min(q_l, q_u)], got {p}")));
        }
        if residuals.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidConfig("residuals must be finite".into()));
        }
        let n = residuals.len();
        if (n as f64) * q_lower.min(q_upper) < 1.0 - 1e-9 {
            return Err(Error::InsufficientTail(format!(
                "{n} residuals give fewer than one observation per tail at q = {}",
                q_lower.min(q_upper)
            )));
        }
        residuals.sort_unstable_by(f64::total_cmp);
        let sorted = residuals;

        let r_ql = quantile_sorted(&sorted, q_lower);
        let r_1mqu = quantile_sorted(&sorted, 1.0 - q_upper);
        let r_p = quantile_sorted(&sorted, p);
        let r_1mp = quantile_sorted(&sorted, 1.0 - p);

        let lower_end = sorted.partition_point(|&r| r <= r_ql);
        let lower_mean = sorted[..lower_end].iter().sum::<f64>() / lower_end as f64;
        let upper_start = sorted.partition_point(|&r| r < r_1mqu);
        let upper = &sorted[upper_start..];
        let upper_mean = upper.iter().sum::<f64>() / upper.len() as f64;

        let lambda_lower = r_ql - lower_mean;
        let lambda_upper = upper_mean - r_1mqu;
        if !(lambda_lower > 0.0) {
            return Err(Error::DegenerateTail("lower"));
        }
        if !(lambda_upper > 0.0) {
            return Err(Error::DegenerateTail("upper"));
        }
        debug_assert!(r_p <= r_ql && r_1mp >= r_1mqu);

        Ok(ReferenceCdf { sorted, q_lower, q_upper, p, lambda_lower, lambda_upper, r_p, r_1mp, r_ql, r_1mqu })
    }

    /// Rebuild from persisted parts. The sorted sample is trusted as given
    /// apart from an ordering check.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        sorted: Vec<f64>,
        q_lower: f64,
        q_upper: f64,
        p: f64,
        lambda_lower: f64,
        lambda_upper: f64,
        r_p: f64,
        r_1mp: f64,
        r_ql: f64,
        r_1mqu: f64,
    ) -> Result<Self> {
        if sorted.is_empty() || sorted.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::Format("reference residuals are not sorted".into()));
        }
        if !(lambda_lower > 0.0 && lambda_upper > 0.0 && p > 0.0 && p < 0.5) {
            return Err(Error::Format("invalid reference tail parameters".into()));
        }
        Ok(ReferenceCdf { sorted, q_lower, q_upper, p, lambda_lower, lambda_upper, r_p, r_1mp, r_ql, r_1mqu })
    }

    pub fn sorted_residuals(&self) -> &[f64] {
        &self.sorted
    }
    pub fn count(&self) -> usize {
        self.sorted.len()
    }
    pub fn q_lower(&self) -> f64 {
        self.q_lower
    }
    pub fn q_upper(&self) -> f64 {
        self.q_upper
    }
    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn lambda_lower(&self) -> f64 {
        self.lambda_lower
    }
    pub fn lambda_upper(&self) -> f64 {
        self.lambda_upper
    }
    pub fn r_p(&self) -> f64 {
        self.r_p
    }
    pub fn r_1mp(&self) -> f64 {
        self.r_1mp
    }
    pub fn r_ql(&self) -> f64 {
        self.r_ql
    }
    pub fn r_1mqu(&self) -> f64 {
        self.r_1mqu
    }

    /// Empirical fraction of the reference sample that is `<= r`, clamped to
    /// `[p, 1 - p]`, with the count computed from `le = #{sorted <= r}`.
    #[inline]
    fn body(&self, le: usize) -> (f64, f64) {
        let n = self.sorted.len() as f64;
        let f = (le as f64 / n).clamp(self.p, 1.0 - self.p);
        let s = ((self.sorted.len() - le) as f64 / n).clamp(self.p, 1.0 - self.p);
        (f, s)
    }

    #[inline]
    fn branches(&self, r: f64, le: impl FnOnce() -> usize) -> (f64, f64) {
        let (cdf, surv) = if r <= self.r_p {
            let c = self.p * ((r - self.r_p) / self.lambda_lower).exp();
            (c, 1.0 - c)
        } else if r >= self.r_1mp {
            let s = self.p * (-(r - self.r_1mp) / self.lambda_upper).exp();
            (1.0 - s, s)
        } else {
            self.body(le())
        };
        (cdf.clamp(f64::MIN_POSITIVE, ONE_MINUS), surv.clamp(f64::MIN_POSITIVE, ONE_MINUS))
    }

    /// The tail-patched cdf at `r`.
    pub fn eval(&self, r: f64) -> f64 {
        self.branches(r, || self.sorted.partition_point(|&x| x <= r)).0
    }

    /// `1 - eval(r)`, computed without cancellation in the upper tail.
    pub fn survival(&self, r: f64) -> f64 {
        self.branches(r, || self.sorted.partition_point(|&x| x <= r)).1
    }

    /// `(ln cdf, ln survival)` for each value of an ascending slice.
    ///
    /// Walks the reference sample once with a galloping search, so the cost
    /// is close to linear in the two sample sizes.
    pub(crate) fn log_pairs_sorted(&self, ascending: &[f64]) -> Vec<(f64, f64)> {
        let reference = &self.sorted;
        let mut pos = 0usize;
        ascending
            .iter()
            .map(|&r| {
                let (c, s) = self.branches(r, || {
                    // Smallest index with reference[idx] > r, starting from pos.
                    let mut step = 1usize;
                    let mut hi = pos;
                    while hi < reference.len() && reference[hi] <= r {
                        pos = hi + 1;
                        hi = pos + step;
                        step *= 2;
                    }
                    let hi = hi.min(reference.len());
                    pos += reference[pos..hi].partition_point(|&x| x <= r);
                    pos
                });
                (c.ln(), s.ln())
            })
            .collect()
    }
}
