//! Epanechnikov window weights and the windowed sums built on them.

use rayon::prelude::*;

/// Epanechnikov weight at lag `(h, m)` for window width `w`.
pub fn kernel_weight(h: i64, m: i64, w: usize) -> f64 {
    let radius = (w as f64 + 1.0) / 2.0;
    let d2 = (h * h + m * m) as f64;
    let r2 = radius * radius;
    if d2 <= r2 {
        0.75 * (1.0 - d2 / r2)
    } else {
        0.0
    }
}

/// One row of the kernel support: lags `(dh, -half..=half)`.
#[derive(Debug, Clone, Copy)]
struct Run {
    dh: isize,
    half: usize,
    /// Weight at `m = 0`; the weight at `m` is `a - b * m^2`.
    a: f64,
}

/// Strictly positive support of the kernel for a given `w`, with its weight sum.
#[derive(Debug, Clone)]
pub(crate) struct Kernel {
    w: usize,
    reach: usize,
    runs: Vec<Run>,
    b: f64,
    weights: Vec<(isize, isize, f64)>,
    sum: f64,
}

/// Kernels up to this width are applied point by point; wider ones use
/// per-row moment prefix sums.
const DIRECT_MAX_W: usize = 9;

impl Kernel {
    pub(crate) fn new(w: usize) -> Kernel {
        let radius = (w as f64 + 1.0) / 2.0;
        let r2 = radius * radius;
        let reach = (w - 1) / 2;
        let mut runs = Vec::new();
        let mut weights = Vec::new();
        for dh in -(reach as isize)..=reach as isize {
            let mut half = 0usize;
            while half < reach && kernel_weight(dh as i64, half as i64 + 1, w) > 0.0 {
                half += 1;
            }
            if kernel_weight(dh as i64, 0, w) > 0.0 {
                runs.push(Run { dh, half, a: 0.75 * (1.0 - (dh * dh) as f64 / r2) });
                for m in -(half as isize)..=half as isize {
                    weights.push((dh, m, kernel_weight(dh as i64, m as i64, w)));
                }
            }
        }
        let sum = weights.iter().map(|t| t.2).sum();
        Kernel { w, reach, runs, b: 0.75 / r2, weights, sum }
    }

    pub(crate) fn reach(&self) -> usize {
        self.reach
    }

    /// Support points `(dh, dm, weight)`.
    pub(crate) fn points(&self) -> &[(isize, isize, f64)] {
        &self.weights
    }

    pub(crate) fn sum(&self) -> f64 {
        self.sum
    }

    /// Kernel-weighted sums of `src` (a `src_cols`-wide plane) at the output
    /// rectangle `rows x cols` whose top-left pixel sits at `(r0, c0)` of
    /// `src`. The caller guarantees the support stays inside `src`.
    pub(crate) fn weighted_sums(&self, src: &[f64], src_cols: usize, r0: usize, c0: usize, rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        if self.w <= DIRECT_MAX_W {
            out.par_chunks_mut(cols.max(1)).enumerate().for_each(|(i, line)| {
                let r = r0 + i;
                for (j, o) in line.iter_mut().enumerate() {
                    let c = c0 + j;
                    let mut acc = 0.0;
                    for &(dh, dm, k) in &self.weights {
                        acc += k * src[(r as isize - dh) as usize * src_cols + (c as isize - dm) as usize];
                    }
                    *o = acc;
                }
            });
            return out;
        }
        // Row moment prefix sums over the columns the output can touch.
        let reach = self.reach;
        let lo_col = c0 - reach;
        let span = cols + 2 * reach;
        let lo_row = r0 - reach;
        let n_rows = rows + 2 * reach;
        let mut prefix = vec![[0.0f64; 3]; n_rows * (span + 1)];
        prefix.par_chunks_mut(span + 1).enumerate().for_each(|(i, pre)| {
            let line = &src[(lo_row + i) * src_cols + lo_col..][..span];
            let mut s = [0.0; 3];
            for (j, &v) in line.iter().enumerate() {
                let x = j as f64;
                s[0] += v;
                s[1] += x * v;
                s[2] += x * x * v;
                pre[j + 1] = s;
            }
        });
        out.par_chunks_mut(cols.max(1)).enumerate().for_each(|(i, line)| {
            for (j, o) in line.iter_mut().enumerate() {
                let centre = (j + reach) as f64;
                let mut acc = 0.0;
                for run in &self.runs {
                    let pre = &prefix[(i as isize + reach as isize - run.dh) as usize * (span + 1)..][..span + 1];
                    // Columns j + reach - m for |m| <= half.
                    let a = pre[j + reach - run.half];
                    let z = pre[j + reach + run.half + 1];
                    let s0 = z[0] - a[0];
                    let s1 = z[1] - a[1];
                    let s2 = z[2] - a[2];
                    let m2 = s2 - 2.0 * centre * s1 + centre * centre * s0;
                    acc += run.a * s0 - self.b * m2;
                }
                *o = acc;
            }
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_identities() {
        assert_eq!(kernel_weight(0, 0, 5), 0.75);
        assert_eq!(kernel_weight(3, 0, 5), 0.0);
        for w in [3usize, 5, 15, 25] {
            let reach = (w as i64 + 1) / 2 + 1;
            for h in -reach..=reach {
                for m in -reach..=reach {
                    let k = kernel_weight(h, m, w);
                    assert_eq!(k, kernel_weight(-h, -m, w));
                    assert_eq!(k, kernel_weight(m, h, w));
                    assert!(k >= 0.0);
                }
            }
        }
    }

    #[test]
    fn support_table_matches_weight_function() {
        for w in [3usize, 5, 7, 15, 25] {
            let k = Kernel::new(w);
            let half = (w as i64 + 1) / 2;
            let mut expected = 0.0;
            let mut count = 0;
            for h in -half..=half {
                for m in -half..=half {
                    let v = kernel_weight(h, m, w);
                    if v > 0.0 {
                        expected += v;
                        count += 1;
                        assert!(h.unsigned_abs() as usize <= k.reach() && m.unsigned_abs() as usize <= k.reach());
                    }
                }
            }
            assert_eq!(k.weights.len(), count);
            assert!((k.sum() - expected).abs() < 1e-12);
        }
    }

    fn naive(src: &[f64], cols: usize, r: usize, c: usize, w: usize) -> f64 {
        let half = (w as i64 + 1) / 2;
        let mut acc = 0.0;
        for h in -half..=half {
            for m in -half..=half {
                let k = kernel_weight(h, m, w);
                if k > 0.0 {
                    acc += k * src[(r as i64 - h) as usize * cols + (c as i64 - m) as usize];
                }
            }
        }
        acc
    }

    #[test]
    fn both_paths_match_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (rows, cols) = (60, 70);
        let src: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        for w in [3usize, 5, 9, 11, 15, 25] {
            let k = Kernel::new(w);
            let reach = k.reach();
            let (r0, c0) = (reach + 2, reach + 1);
            let (h, wd) = (rows - 2 * reach - 3, cols - 2 * reach - 2);
            let got = k.weighted_sums(&src, cols, r0, c0, h, wd);
            for i in 0..h {
                for j in 0..wd {
                    let want = naive(&src, cols, r0 + i, c0 + j, w);
                    assert!((got[i * wd + j] - want).abs() < 1e-10, "w={w} ({i},{j})");
                }
            }
        }
    }
}
