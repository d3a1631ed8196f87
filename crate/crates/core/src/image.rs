//! Greyscale images, standardization and causal raster-scan neighborhoods.
//!
//! All coordinates are 0-based `(row, col)`. Pixels are stored row-major.
//! The same [`GreyImage`] type carries raw intensities, standardized images,
//! residual surfaces and statistic surfaces.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A row-major 2-D array of real-valued pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct GreyImage {
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
}

impl GreyImage {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidConfig(format!("image dimensions must be positive, got {rows}x{cols}")));
        }
        if pixels.len() != rows * cols {
            return Err(Error::mismatch(format!("{} pixels", rows * cols), format!("{} pixels", pixels.len())));
        }
        Ok(GreyImage { rows, cols, pixels })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "image dimensions must be positive");
        GreyImage { rows, cols, pixels: vec![value; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                pixels.push(f(r, c));
            }
        }
        GreyImage { rows, cols, pixels }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.pixels[row * self.cols..(row + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GreyImage {
        GreyImage { rows: self.rows, cols: self.cols, pixels: self.pixels.iter().map(|&v| f(v)).collect() }
    }

    /// Copy of the rectangle starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> Result<GreyImage> {
        if rows == 0 || cols == 0 || row + rows > self.rows || col + cols > self.cols {
            return Err(Error::mismatch(
                format!("crop inside {}x{}", self.rows, self.cols),
                format!("{rows}x{cols} at ({row}, {col})"),
            ));
        }
        let mut pixels = Vec::with_capacity(rows * cols);
        for r in row..row + rows {
            pixels.extend_from_slice(&self.row(r)[col..col + cols]);
        }
        Ok(GreyImage { rows, cols, pixels })
    }

    /// Population mean and standard deviation (divisor = pixel count).
    pub fn mean_sd(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().sum::<f64>() / n;
        let var = self.pixels.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Subtract the pixel mean and divide by the population standard deviation.
    pub fn standardize(&self) -> Result<GreyImage> {
        if self.pixels.len() < 2 {
            return Err(Error::too_small(self.rows, self.cols, "standardization needs at least 2 pixels"));
        }
        let (mean, sd) = self.mean_sd();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::ZeroVariance);
        }
        Ok(self.map(|v| (v - mean) / sd))
    }

    /// SHA-256 over the dimensions and the little-endian pixel bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Causal neighborhood made of `l` full rows of width `2l + 1` above the
/// response pixel plus `l` pixels to its left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NeighborhoodSpec {
    l: usize,
}

impl NeighborhoodSpec {
    pub fn new(l: usize) -> Result<Self> {
        if l == 0 {
            return Err(Error::InvalidConfig("neighborhood size l must be at least 1".into()));
        }
        Ok(NeighborhoodSpec { l })
    }

    #[inline]
    pub fn l(&self) -> usize {
        self.l
    }

    #[inline]
    pub fn n_predictors(&self) -> usize {
        2 * self.l * self.l + 2 * self.l
    }

    /// Predictor offsets `(d_row, d_col)` in predictor order: row offsets
    /// `-l..=-1`, each scanning column offsets `-l..=l`, then the same row at
    /// column offsets `-l..=-1`.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let l = self.l as isize;
        let mut out = Vec::with_capacity(self.n_predictors());
        for dr in -l..=-1 {
            for dc in -l..=l {
                out.push((dr, dc));
            }
        }
        for dc in -l..=-1 {
            out.push((0, dc));
        }
        out
    }

    /// Flat pixel offsets for an image with `cols` columns, in predictor order.
    pub(crate) fn flat_offsets(&self, cols: usize) -> Vec<isize> {
        self.offsets().into_iter().map(|(dr, dc)| dr * cols as isize + dc).collect()
    }

    /// Dimensions `(rows - l, cols - 2l)` of the interior, if non-empty.
    pub fn interior_dims(&self, rows: usize, cols: usize) -> Option<(usize, usize)> {
        if rows > self.l && cols > 2 * self.l {
            Some((rows - self.l, cols - 2 * self.l))
        } else {
            None
        }
    }

    pub(crate) fn check_fits(&self, img: &GreyImage) -> Result<(usize, usize)> {
        self.interior_dims(img.rows(), img.cols()).ok_or_else(|| {
            Error::too_small(img.rows(), img.cols(), format!("interior is empty for neighborhood l = {}", self.l))
        })
    }
}

/// Predictor vector of the pixel at `(row, col)`.
pub fn neighborhood_of(img: &GreyImage, row: usize, col: usize, spec: NeighborhoodSpec) -> Result<Vec<f64>> {
    let l = spec.l();
    if row < l || row >= img.rows() || col < l || col + l >= img.cols() {
        return Err(Error::OutOfInteriorBounds { row, col, l });
    }
    Ok(spec
        .offsets()
        .into_iter()
        .map(|(dr, dc)| img.get((row as isize + dr) as usize, (col as isize + dc) as usize))
        .collect())
}

/// Response/predictor table built from every interior pixel in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMatrix {
    spec: Option<NeighborhoodSpec>,
    n_rows: usize,
    n_predictors: usize,
    response: Vec<f64>,
    /// Row-major `n_rows x n_predictors`.
    predictors: Vec<f64>,
}

impl TrainingMatrix {
    /// Matrix from explicit columns, not tied to an image neighborhood.
    pub fn from_columns(n_predictors: usize, response: Vec<f64>, predictors: Vec<f64>) -> Result<Self> {
        if n_predictors == 0 || predictors.len() != response.len() * n_predictors {
            return Err(Error::mismatch(
                format!("{} predictor cells", response.len() * n_predictors),
                format!("{}", predictors.len()),
            ));
        }
        Ok(TrainingMatrix { spec: None, n_rows: response.len(), n_predictors, response, predictors })
    }

    /// The neighborhood the matrix was extracted with, if it came from an image.
    #[inline]
    pub fn spec(&self) -> Option<NeighborhoodSpec> {
        self.spec
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_predictors(&self) -> usize {
        self.n_predictors
    }

    #[inline]
    pub fn response(&self) -> &[f64] {
        &self.response
    }

    #[inline]
    pub fn predictors(&self) -> &[f64] {
        &self.predictors
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        let p = self.n_predictors;
        &self.predictors[r * p..(r + 1) * p]
    }
}

/// One training row per interior pixel, raster order.
pub fn build_training_matrix(img: &GreyImage, spec: NeighborhoodSpec) -> Result<TrainingMatrix> {
    let (irows, icols) = spec.check_fits(img)?;
    let l = spec.l();
    let p = spec.n_predictors();
    let offsets = spec.flat_offsets(img.cols());
    let px = img.pixels();
    let n_rows = irows * icols;

    let mut response = vec![0.0; n_rows];
    let mut predictors = vec![0.0; n_rows * p];
    response
        .par_chunks_mut(icols)
        .zip(predictors.par_chunks_mut(icols * p))
        .enumerate()
        .for_each(|(ir, (resp, preds))| {
            let row = ir + l;
            for ic in 0..icols {
                let center = row * img.cols() + ic + l;
                resp[ic] = px[center];
                let dst = &mut preds[ic * p..(ic + 1) * p];
                for (d, &off) in dst.iter_mut().zip(&offsets) {
                    *d = px[(center as isize + off) as usize];
                }
            }
        });
    Ok(TrainingMatrix { spec: Some(spec), n_rows, n_predictors: p, response, predictors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rows: usize, cols: usize, seed: u64) -> GreyImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GreyImage::from_fn(rows, cols, |_, _| rng.random_range(0.0..255.0))
    }

    #[test]
    fn standardize_two_by_two() {
        let img = GreyImage::new(2, 2, vec![0.0, 0.0, 255.0, 255.0]).unwrap();
        let s = img.standardize().unwrap();
        assert_eq!(s.pixels(), &[-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let s = random_image(7, 9, 1).standardize().unwrap();
        let again = s.standardize().unwrap();
        for (a, b) in s.pixels().iter().zip(again.pixels()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn standardize_moments_recomputed_independently() {
        let s = random_image(3, 3, 7).standardize().unwrap();
        // Recompute with a plain loop in a different summation order.
        let mut sum = 0.0;
        for v in s.pixels().iter().rev() {
            sum += v;
        }
        let mean = sum / 9.0;
        let mut ss = 0.0;
        for v in s.pixels().iter().rev() {
            ss += (v - mean).powi(2);
        }
        assert!(mean.abs() < 1e-9);
        assert!(((ss / 9.0).sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn standardize_rejects_constant() {
        let img = GreyImage::filled(4, 4, 3.0);
        assert!(matches!(img.standardize(), Err(Error::ZeroVariance)));
        let one = GreyImage::filled(1, 1, 3.0);
        assert!(matches!(one.standardize(), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn neighborhood_l1_order() {
        let img = GreyImage::from_fn(3, 3, |r, c| (r * 3 + c) as f64);
        let spec = NeighborhoodSpec::new(1).unwrap();
        let v = neighborhood_of(&img, 1, 1, spec).unwrap();
        // (-1,-1), (-1,0), (-1,+1), (0,-1)
        assert_eq!(v, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn neighborhood_l2_has_twelve_elements() {
        let img = random_image(6, 6, 2);
        let spec = NeighborhoodSpec::new(2).unwrap();
        assert_eq!(spec.n_predictors(), 12);
        assert_eq!(neighborhood_of(&img, 2, 2, spec).unwrap().len(), 12);
    }

    #[test]
    fn neighborhood_constant_image() {
        let img = GreyImage::filled(3, 3, 4.5);
        let spec = NeighborhoodSpec::new(1).unwrap();
        assert_eq!(neighborhood_of(&img, 1, 1, spec).unwrap(), vec![4.5; 4]);
    }

    #[test]
    fn neighborhood_out_of_bounds() {
        let img = GreyImage::filled(3, 3, 0.0);
        let spec = NeighborhoodSpec::new(1).unwrap();
        for (r, c) in [(0, 1), (1, 0), (1, 2), (3, 1)] {
            assert!(matches!(neighborhood_of(&img, r, c, spec), Err(Error::OutOfInteriorBounds { .. })));
        }
        assert!(NeighborhoodSpec::new(0).is_err());
    }

    #[test]
    fn training_matrix_sizes() {
        let spec = NeighborhoodSpec::new(15).unwrap();
        assert_eq!(spec.interior_dims(500, 500), Some((485, 470)));
        assert_eq!(485 * 470, 227_950);
        assert_eq!(spec.n_predictors(), 480);

        let img = random_image(3, 3, 3);
        let m = build_training_matrix(&img, NeighborhoodSpec::new(1).unwrap()).unwrap();
        assert_eq!(m.n_rows(), 2);

        let small = random_image(2, 2, 3);
        assert!(matches!(
            build_training_matrix(&small, NeighborhoodSpec::new(1).unwrap()),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn training_matrix_cells_match_direct_lookup() {
        let img = random_image(20, 20, 11);
        let spec = NeighborhoodSpec::new(2).unwrap();
        let m = build_training_matrix(&img, spec).unwrap();
        assert_eq!(m.n_rows(), 18 * 16);
        let offsets = spec.offsets();
        let mut r = 0;
        for row in 2..20 {
            for col in 2..18 {
                assert_eq!(m.response()[r], img.get(row, col));
                for (j, &(dr, dc)) in offsets.iter().enumerate() {
                    let expect = img.get((row as isize + dr) as usize, (col as isize + dc) as usize);
                    assert_eq!(m.row(r)[j], expect);
                }
                r += 1;
            }
        }
    }

    proptest! {
        #[test]
        fn row_count_identity(rows in 1usize..30, cols in 1usize..30, l in 1usize..6) {
            let img = GreyImage::filled(rows, cols, 1.0);
            let spec = NeighborhoodSpec::new(l).unwrap();
            match build_training_matrix(&img, spec) {
                Ok(m) => {
                    prop_assert_eq!(m.n_rows(), (rows - l) * (cols - 2 * l));
                    prop_assert_eq!(m.predictors().len(), m.n_rows() * (2 * l * l + 2 * l));
                }
                Err(_) => prop_assert!(rows <= l || cols <= 2 * l),
            }
        }

        #[test]
        fn standardize_affine_invariant(seed in 0u64..1000, a in 0.01f64..50.0, b in -100.0f64..100.0) {
            let img = random_image(6, 5, seed);
            let base = img.standardize().unwrap();
            let relit = img.map(|v| a * v + b).standardize().unwrap();
            for (x, y) in base.pixels().iter().zip(relit.pixels()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
