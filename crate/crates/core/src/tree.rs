//! Regression-tree model of the in-control conditional mean of a pixel given
//! its causal neighborhood.
//!
//! Splits are searched over a fixed per-predictor grid of candidate
//! thresholds: midpoints of consecutive distinct values, or 255 quantile
//! midpoints when a predictor has more than 256 distinct values. Predictor
//! values are pre-binned against that grid once, so split search at a node is
//! a histogram pass over its rows.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{build_training_matrix, GreyImage, NeighborhoodSpec, TrainingMatrix};

/// Most candidate thresholds per predictor.
pub const MAX_THRESHOLDS: usize = 2 * (GRID_SLOTS - 1);

/// Slots in each of the quantile and value grids.
const GRID_SLOTS: usize = 256;

/// Stopping rules and cross-validation settings for tree fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub min_leaf_size: usize,
    pub max_depth: usize,
    /// Absolute SSE decrease a split must reach. `None` means `1e-7` times the
    /// SSE of the root node.
    pub min_split_improvement: Option<f64>,
    pub cv_folds: usize,
    pub l_candidates: Vec<usize>,
    /// Candidates whose CV SSE is within `min * (1 + tol)` are treated as tied
    /// with the minimum; the smallest tied `l` is chosen.
    pub cv_tie_tolerance: f64,
    /// Seed for the CV fold shuffle.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            min_leaf_size: 30,
            max_depth: 20,
            min_split_improvement: None,
            cv_folds: 5,
            l_candidates: (1..=20).collect(),
            cv_tie_tolerance: 0.0,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_leaf_size == 0 {
            return Err(Error::InvalidConfig("min_leaf_size must be at least 1".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::InvalidConfig("cv_folds must be at least 2".into()));
        }
        if let Some(m) = self.min_split_improvement {
            if !(m >= 0.0) {
                return Err(Error::InvalidConfig("min_split_improvement must be non-negative".into()));
            }
        }
        if !(self.cv_tie_tolerance >= 0.0) {
            return Err(Error::InvalidConfig("cv_tie_tolerance must be non-negative".into()));
        }
        if self.l_candidates.iter().any(|&l| l == 0) {
            return Err(Error::InvalidConfig("neighborhood candidates must be positive".into()));
        }
        Ok(())
    }
}

/// One node of the flat node table. The root is node 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split { predictor: u32, threshold: f64, left: u32, right: u32 },
    Leaf { prediction: f64, count: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    n_predictors: usize,
    spec: Option<NeighborhoodSpec>,
}

impl RegressionTree {
    /// Build from a node table, checking that every child exists and the
    /// table forms a tree rooted at node 0.
    pub fn from_nodes(nodes: Vec<Node>, n_predictors: usize, spec: Option<NeighborhoodSpec>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Format("tree has no nodes".into()));
        }
        if let Some(s) = spec {
            if s.n_predictors() != n_predictors {
                return Err(Error::Format(format!(
                    "l = {} implies {} predictors, table says {n_predictors}",
                    s.l(),
                    s.n_predictors()
                )));
            }
        }
        let mut seen = vec![false; nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Format(format!("node {i} reached twice")));
            }
            if let Node::Split { predictor, threshold, left, right } = nodes[i] {
                if predictor as usize >= n_predictors || !threshold.is_finite() {
                    return Err(Error::Format(format!("node {i} has an invalid split")));
                }
                for c in [left, right] {
                    if c as usize >= nodes.len() || c as usize == i {
                        return Err(Error::Format(format!("node {i} has a dangling child")));
                    }
                    stack.push(c as usize);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("tree contains unreachable nodes".into()));
        }
        Ok(RegressionTree { nodes, n_predictors, spec })
    }

    pub fn single_leaf(prediction: f64, count: u64, n_predictors: usize, spec: Option<NeighborhoodSpec>) -> Self {
        RegressionTree { nodes: vec![Node::Leaf { prediction, count }], n_predictors, spec }
    }

    #[inline]
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    #[inline]
    pub fn n_predictors(&self) -> usize {
        self.n_predictors
    }

    #[inline]
    pub fn spec(&self) -> Option<NeighborhoodSpec> {
        self.spec
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left as usize).max(go(nodes, right as usize)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_predictors {
            return Err(Error::mismatch(format!("{} predictors", self.n_predictors), x.len()));
        }
        Ok(self.predict_with(|p| x[p]))
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split { predictor, threshold, left, right } => {
                    i = if x[predictor as usize] <= threshold { left } else { right } as usize;
                }
            }
        }
    }

    #[inline]
    fn predict_with(&self, value: impl Fn(usize) -> f64) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { prediction, .. } => return prediction,
                Node::Split { predictor, threshold, left, right } => {
                    i = if value(predictor as usize) <= threshold { left } else { right } as usize;
                }
            }
        }
    }
}

/// Residuals `pixel - prediction` over the interior of a source image.
///
/// Value `(i, j)` corresponds to source pixel `(i + offset_row, j + offset_col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualImage {
    pub values: GreyImage,
    pub offset_row: usize,
    pub offset_col: usize,
    pub source_rows: usize,
    pub source_cols: usize,
}

impl ResidualImage {
    /// Wrap a bare residual surface that is its own source image.
    pub fn standalone(values: GreyImage) -> Self {
        let (source_rows, source_cols) = (values.rows(), values.cols());
        ResidualImage { values, offset_row: 0, offset_col: 0, source_rows, source_cols }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.values.cols()
    }
}

/// Residual image of `img` (already standardized) under `tree`.
pub fn residual_image(tree: &RegressionTree, img: &GreyImage) -> Result<ResidualImage> {
    let spec = tree
        .spec()
        .ok_or_else(|| Error::ConfigMismatch("tree was not trained on an image neighborhood".into()))?;
    let (irows, icols) = spec.check_fits(img)?;
    let l = spec.l();
    let offsets = spec.flat_offsets(img.cols());
    let px = img.pixels();
    let cols = img.cols();
    let mut values = vec![0.0; irows * icols];
    values.par_chunks_mut(icols).enumerate().for_each(|(ir, out)| {
        let row = ir + l;
        for (ic, o) in out.iter_mut().enumerate() {
            let center = row * cols + ic + l;
            let pred = tree.predict_with(|p| px[(center as isize + offsets[p]) as usize]);
            *o = px[center] - pred;
        }
    });
    Ok(ResidualImage {
        values: GreyImage::new(irows, icols, values)?,
        offset_row: l,
        offset_col: l,
        source_rows: img.rows(),
        source_cols: img.cols(),
    })
}

// ---------------------------------------------------------------------------
// Fitting

/// Column-major binned predictors plus the threshold grid for each column.
struct Design {
    n_rows: usize,
    n_predictors: usize,
    bins: Vec<u16>,
    thresholds: Vec<Vec<f64>>,
    response: Vec<f64>,
}

/// Candidate thresholds for one predictor column: midpoints at evenly spaced
/// quantiles plus midpoints at evenly spaced values, so sparse tails still get
/// cut points. Columns with few distinct values use every midpoint.
fn threshold_grid(values: &mut [f64]) -> Vec<f64> {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    let mut distinct = 0usize;
    let mut last = f64::NAN;
    for &v in values.iter() {
        if v != last {
            distinct += 1;
            last = v;
            if distinct > MAX_THRESHOLDS + 1 {
                break;
            }
        }
    }
    let mid = |lo: f64, hi: f64| {
        let t = lo + (hi - lo) * 0.5;
        if t >= hi {
            lo
        } else {
            t
        }
    };
    let mut out: Vec<f64> = Vec::with_capacity(MAX_THRESHOLDS);
    if distinct <= MAX_THRESHOLDS + 1 {
        for w in values.windows(2) {
            if w[1] != w[0] {
                out.push(mid(w[0], w[1]));
            }
        }
        return out;
    }
    // Cut just above the largest value `<= v`.
    let cut_after = |pos: usize, out: &mut Vec<f64>| {
        if pos > 0 && pos < n {
            out.push(mid(values[pos - 1], values[pos]));
        }
    };
    let slots = GRID_SLOTS;
    for k in 1..slots {
        let v = values[(k * n).div_ceil(slots).max(1) - 1];
        cut_after(values.partition_point(|&x| x <= v), &mut out);
    }
    let (lo, hi) = (values[0], values[n - 1]);
    for k in 1..slots {
        let v = lo + (hi - lo) * k as f64 / slots as f64;
        cut_after(values.partition_point(|&x| x <= v), &mut out);
    }
    out.sort_unstable_by(f64::total_cmp);
    out.dedup();
    out
}

impl Design {
    /// `fill(p, buf)` must write predictor `p` for every row into `buf`.
    fn build(response: Vec<f64>, n_predictors: usize, fill: impl Fn(usize, &mut [f64]) + Sync) -> Design {
        let n_rows = response.len();
        let mut bins = vec![0u16; n_rows * n_predictors];
        let thresholds: Vec<Vec<f64>> = bins
            .par_chunks_mut(n_rows.max(1))
            .enumerate()
            .map(|(p, col)| {
                let mut values = vec![0.0; n_rows];
                fill(p, &mut values);
                let mut sorted = values.clone();
                let grid = threshold_grid(&mut sorted);
                for (b, &v) in col.iter_mut().zip(&values) {
                    *b = grid.partition_point(|&t| t < v) as u16;
                }
                grid
            })
            .collect();
        Design { n_rows, n_predictors, bins, thresholds, response }
    }

    fn from_matrix(data: &TrainingMatrix) -> Design {
        let p = data.n_predictors();
        let preds = data.predictors();
        Design::build(data.response().to_vec(), p, |j, buf| {
            for (r, b) in buf.iter_mut().enumerate() {
                *b = preds[r * p + j];
            }
        })
    }

    /// Design over explicit flat pixel locations of `img`.
    fn from_locations(img: &GreyImage, spec: NeighborhoodSpec, locations: &[usize]) -> Design {
        let px = img.pixels();
        let offsets = spec.flat_offsets(img.cols());
        let response = locations.iter().map(|&c| px[c]).collect();
        Design::build(response, spec.n_predictors(), |j, buf| {
            let off = offsets[j];
            for (b, &c) in buf.iter_mut().zip(locations) {
                *b = px[(c as isize + off) as usize];
            }
        })
    }

    #[inline]
    fn column(&self, p: usize) -> &[u16] {
        &self.bins[p * self.n_rows..(p + 1) * self.n_rows]
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    predictor: usize,
    bin: usize,
    gain: f64,
}

struct Grower<'a> {
    design: &'a Design,
    min_leaf: usize,
    max_depth: usize,
    min_gain: f64,
    nodes: Vec<Node>,
}

/// Rows x predictors below which split search stays on the calling thread.
const PAR_WORK: usize = 1 << 16;

impl Grower<'_> {
    fn best_split_for(&self, p: usize, rows: &[u32], n: usize, sum: f64) -> Option<Candidate> {
        let grid = &self.design.thresholds[p];
        if grid.is_empty() {
            return None;
        }
        let col = self.design.column(p);
        let y = &self.design.response;
        let mut counts = [0u32; MAX_THRESHOLDS + 1];
        let mut sums = [0.0f64; MAX_THRESHOLDS + 1];
        for &r in rows {
            let b = col[r as usize] as usize;
            counts[b] += 1;
            sums[b] += y[r as usize];
        }
        let nf = n as f64;
        let base = sum * sum / nf;
        let mut best: Option<Candidate> = None;
        let (mut nl, mut sl) = (0usize, 0.0f64);
        for b in 0..grid.len() {
            nl += counts[b] as usize;
            sl += sums[b];
            let nr = n - nl;
            if nl < self.min_leaf {
                continue;
            }
            if nr < self.min_leaf {
                break;
            }
            let sr = sum - sl;
            let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - base;
            if best.map_or(true, |c| gain > c.gain) {
                best = Some(Candidate { predictor: p, bin: b, gain });
            }
        }
        best
    }

    fn best_split(&self, rows: &[u32], sum: f64) -> Option<Candidate> {
        let n = rows.len();
        let per_predictor: Vec<Option<Candidate>> = if n * self.design.n_predictors >= PAR_WORK {
            (0..self.design.n_predictors)
                .into_par_iter()
                .map(|p| self.best_split_for(p, rows, n, sum))
                .collect()
        } else {
            (0..self.design.n_predictors).map(|p| self.best_split_for(p, rows, n, sum)).collect()
        };
        // Sequential reduction: strict `>` keeps the lowest predictor index on
        // ties, and within a predictor the lowest threshold already won.
        per_predictor
            .into_iter()
            .flatten()
            .fold(None, |acc: Option<Candidate>, c| match acc {
                Some(a) if c.gain > a.gain => Some(c),
                None => Some(c),
                keep => keep,
            })
    }

    fn grow(&mut self, rows: &mut [u32], depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        let y = &self.design.response;
        let n = rows.len();
        let sum: f64 = rows.iter().map(|&r| y[r as usize]).sum();
        let leaf = Node::Leaf { prediction: sum / n as f64, count: n as u64 };
        self.nodes.push(leaf);
        if depth >= self.max_depth || n < 2 * self.min_leaf {
            return id;
        }
        let Some(best) = self.best_split(rows, sum) else {
            return id;
        };
        if !(best.gain > 0.0) || best.gain < self.min_gain {
            return id;
        }
        let col = self.design.column(best.predictor);
        let (mut left, mut right): (Vec<u32>, Vec<u32>) =
            rows.iter().partition(|&&r| (col[r as usize] as usize) <= best.bin);
        let threshold = self.design.thresholds[best.predictor][best.bin];
        let l = self.grow(&mut left, depth + 1);
        let r = self.grow(&mut right, depth + 1);
        self.nodes[id as usize] = Node::Split { predictor: best.predictor as u32, threshold, left: l, right: r };
        id
    }
}

fn fit_rows(design: &Design, rows: &mut [u32], cfg: &FitConfig) -> Vec<Node> {
    let min_gain = match cfg.min_split_improvement {
        Some(m) => m,
        None => {
            let y = &design.response;
            let n = rows.len() as f64;
            let mean = rows.iter().map(|&r| y[r as usize]).sum::<f64>() / n;
            1e-7 * rows.iter().map(|&r| (y[r as usize] - mean).powi(2)).sum::<f64>()
        }
    };
    let mut g = Grower {
        design,
        min_leaf: cfg.min_leaf_size,
        max_depth: cfg.max_depth,
        min_gain,
        nodes: Vec::new(),
    };
    g.grow(rows, 0);
    g.nodes
}

/// Greedy CART fit with SSE (variance-reduction) splitting.
///
/// Constant responses produce a valid single-leaf tree.
pub fn fit_tree(data: &TrainingMatrix, cfg: &FitConfig) -> Result<RegressionTree> {
    cfg.validate()?;
    if data.n_rows() < 2 * cfg.min_leaf_size {
        return Err(Error::InvalidConfig(format!(
            "{} training rows is fewer than 2 * min_leaf_size = {}",
            data.n_rows(),
            2 * cfg.min_leaf_size
        )));
    }
    let design = Design::from_matrix(data);
    debug_assert_eq!(design.n_rows, data.n_rows());
    let mut rows: Vec<u32> = (0..data.n_rows() as u32).collect();
    let nodes = fit_rows(&design, &mut rows, cfg);
    Ok(RegressionTree { nodes, n_predictors: data.n_predictors(), spec: data.spec() })
}

// ---------------------------------------------------------------------------
// Neighborhood selection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub l: usize,
    /// Held-out SSE summed over all folds.
    pub cv_sse: f64,
    /// `cv_sse` divided by the number of held-out rows.
    pub cv_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub chosen_l: usize,
    /// Number of response pixels shared by every evaluated candidate.
    pub n_rows: usize,
    pub folds: usize,
    pub entries: Vec<CvEntry>,
    pub skipped: Vec<usize>,
}

/// Choose `l` by k-fold cross-validation over `cfg.l_candidates`.
///
/// Every candidate is scored on the same response pixels (the interior for
/// the largest usable candidate) and the same seeded folds, so their SSEs are
/// directly comparable.
pub fn select_neighborhood(img: &GreyImage, cfg: &FitConfig) -> Result<CvReport> {
    cfg.validate()?;
    if cfg.l_candidates.is_empty() {
        return Err(Error::InvalidConfig("no neighborhood candidates given".into()));
    }
    let mut candidates = cfg.l_candidates.clone();
    candidates.sort_unstable();
    candidates.dedup();

    let mut usable = Vec::new();
    let mut skipped = Vec::new();
    for &l in &candidates {
        let spec = NeighborhoodSpec::new(l)?;
        match spec.interior_dims(img.rows(), img.cols()) {
            Some((r, c)) if r * c >= 2 * cfg.min_leaf_size * cfg.cv_folds => usable.push(spec),
            _ => {
                warn!("skipping neighborhood l = {l}: image {}x{} is too small", img.rows(), img.cols());
                skipped.push(l);
            }
        }
    }
    let Some(&largest) = usable.last() else {
        return Err(Error::too_small(img.rows(), img.cols(), "no neighborhood candidate fits the image"));
    };
    let lm = largest.l();
    let cols = img.cols();
    let locations: Vec<usize> =
        (lm..img.rows()).flat_map(|r| (lm..cols - lm).map(move |c| r * cols + c)).collect();
    let n = locations.len();

    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut fold_of = vec![0u8; n];
    for (pos, &row) in order.iter().enumerate() {
        fold_of[row as usize] = (pos % cfg.cv_folds) as u8;
    }

    let mut entries = Vec::with_capacity(usable.len());
    for spec in usable {
        let design = Design::from_locations(img, spec, &locations);
        let offsets = spec.flat_offsets(cols);
        let px = img.pixels();
        let mut sse = 0.0;
        for fold in 0..cfg.cv_folds {
            let mut train: Vec<u32> = (0..n as u32).filter(|&r| fold_of[r as usize] as usize != fold).collect();
            let nodes = fit_rows(&design, &mut train, cfg);
            let tree = RegressionTree { nodes, n_predictors: spec.n_predictors(), spec: Some(spec) };
            sse += (0..n)
                .filter(|&r| fold_of[r] as usize == fold)
                .map(|r| {
                    let center = locations[r] as isize;
                    let pred = tree.predict_with(|p| px[(center + offsets[p]) as usize]);
                    (design.response[r] - pred).powi(2)
                })
                .sum::<f64>();
        }
        entries.push(CvEntry { l: spec.l(), cv_sse: sse, cv_mse: sse / n as f64 });
    }

    let min = entries.iter().map(|e| e.cv_sse).fold(f64::INFINITY, f64::min);
    let band = min * (1.0 + cfg.cv_tie_tolerance);
    let chosen_l = entries.iter().find(|e| e.cv_sse <= band).map(|e| e.l).expect("at least one entry");
    Ok(CvReport { chosen_l, n_rows: n, folds: cfg.cv_folds, entries, skipped })
}

/// Fit a tree for a fixed neighborhood on every interior pixel of `img`.
pub fn fit_on_image(img: &GreyImage, spec: NeighborhoodSpec, cfg: &FitConfig) -> Result<RegressionTree> {
    let data = build_training_matrix(img, spec)?;
    fit_tree(&data, cfg)
}
