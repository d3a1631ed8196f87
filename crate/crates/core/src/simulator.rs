//! Spatial autoregressive textures and superimposed defects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GreyImage;

/// Rows and columns generated and discarded before the retained field.
pub const BURN_IN: usize = 50;

/// Deterministic generator for stream `index` under `master`.
///
/// Streams are independent ChaCha8 sequences, so images can be produced in
/// any order or in parallel without changing their content.
pub fn substream(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Seed for a named child of `master`, e.g. replicate `r` or image `i`.
pub fn child_seed(master: u64, index: u64) -> u64 {
    substream(master, index).random()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SarParams {
    pub phi1: f64,
    pub phi2: f64,
    pub sigma: f64,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

impl Default for SarParams {
    fn default() -> Self {
        SarParams { phi1: 0.6, phi2: 0.35, sigma: 1.0, rows: 250, cols: 250, seed: 0 }
    }
}

impl SarParams {
    /// Marginal sd of the stationary field, `sigma * sqrt(sum psi(a,b)^2)` with
    /// moving-average weights `psi(a,b) = C(a+b, a) phi1^a phi2^b`.
    pub fn stationary_sd(&self) -> f64 {
        let mut row = vec![1.0f64];
        let mut total = 1.0;
        for _ in 0..100_000 {
            let mut next = vec![0.0; row.len() + 1];
            for (a, &v) in row.iter().enumerate() {
                next[a + 1] += self.phi1 * v;
                next[a] += self.phi2 * v;
            }
            let add: f64 = next.iter().map(|v| v * v).sum();
            total += add;
            row = next;
            if add <= total * 1e-17 {
                break;
            }
        }
        self.sigma * total.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi1.abs() + self.phi2.abs() < 1.0) {
            return Err(Error::InvalidConfig(format!("|phi1| + |phi2| must be below 1, got {} and {}", self.phi1, self.phi2)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidConfig("field dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Raw field `y(i,k) = phi1 y(i-1,k) + phi2 y(i,k-1) + e(i,k)` with a zero
/// boundary, generated with a burn-in border that is then cropped.
pub fn generate_sar(p: &SarParams) -> Result<GreyImage> {
    p.validate()?;
    let mut rng = substream(p.seed, 0);
    Ok(sar_field(p.phi1, p.phi2, p.sigma, p.rows, p.cols, &mut rng))
}

fn sar_field(phi1: f64, phi2: f64, sigma: f64, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> GreyImage {
    let (tr, tc) = (rows + BURN_IN, cols + BURN_IN);
    let mut y = vec![0.0f64; tr * tc];
    for i in 0..tr {
        for k in 0..tc {
            let e: f64 = rng.sample(StandardNormal);
            let up = if i > 0 { y[(i - 1) * tc + k] } else { 0.0 };
            let left = if k > 0 { y[i * tc + k - 1] } else { 0.0 };
            y[i * tc + k] = phi1 * up + phi2 * left + sigma * e;
        }
    }
    GreyImage::from_fn(rows, cols, |r, c| y[(r + BURN_IN) * tc + c + BURN_IN])
}

/// Affine rescale of a field onto `[0, 255]`.
pub fn to_greyscale(field: &GreyImage) -> Result<GreyImage> {
    let (lo, hi) = field.min_max();
    if !(hi > lo) {
        return Err(Error::ConstantField);
    }
    let scale = 255.0 / (hi - lo);
    Ok(field.map(|v| if v == hi { 255.0 } else { (v - lo) * scale }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DefectKind {
    WhiteNoiseEllipse,
    MilderArEllipse { phi1: f64, phi2: f64 },
    BlackSquare,
    WhiteNoiseSquare,
}

impl DefectKind {
    pub fn milder() -> Self {
        DefectKind::MilderArEllipse { phi1: 0.54, phi2: 0.315 }
    }

    fn is_ellipse(self) -> bool {
        matches!(self, DefectKind::WhiteNoiseEllipse | DefectKind::MilderArEllipse { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Placement {
    Center { row: usize, col: usize },
    Random,
}

/// Standard deviation of white-noise defect pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    /// Marginal sd of the in-control field, so the defect keeps the
    /// intensity histogram and differs only in texture.
    #[default]
    Marginal,
    /// sd of the innovations `sigma`.
    Innovation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub size_rows: usize,
    pub size_cols: usize,
    pub placement: Placement,
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseLevel,
}

impl DefectSpec {
    pub fn new(kind: DefectKind, size_rows: usize, size_cols: usize, placement: Placement, seed: u64) -> Self {
        DefectSpec { kind, size_rows, size_cols, placement, seed, noise: NoiseLevel::default() }
    }
}

/// Pixels replaced by a defect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectMask {
    pub rows: usize,
    pub cols: usize,
    pub center_row: usize,
    pub center_col: usize,
    bits: Vec<bool>,
}

impl DefectMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        DefectMask { rows, cols, center_row: 0, center_col: 0, bits: vec![false; rows * cols] }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Union with another mask of the same size.
    pub fn union(&mut self, other: &DefectMask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    /// Row-major run lengths starting with a run of unmasked pixels.
    pub fn run_lengths(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }
}

/// Whether `(row, col)` lies in the axis-aligned ellipse with the given
/// centre and full axis lengths.
pub fn in_ellipse(row: usize, col: usize, center_row: usize, center_col: usize, size_rows: usize, size_cols: usize) -> bool {
    if size_rows == 0 || size_cols == 0 {
        return false;
    }
    let a1 = size_rows as f64 / 2.0;
    let a2 = size_cols as f64 / 2.0;
    let u = (row as f64 - center_row as f64) / a1;
    let v = (col as f64 - center_col as f64) / a2;
    u * u + v * v <= 1.0
}

/// Superimpose a defect on a raw field. Returns the modified field and the
/// mask of replaced pixels.
pub fn inject_defect(field: &GreyImage, d: &DefectSpec, p: &SarParams) -> Result<(GreyImage, DefectMask)> {
    let (rows, cols) = (field.rows(), field.cols());
    if d.size_rows == 0 || d.size_cols == 0 {
        return Ok((field.clone(), DefectMask::empty(rows, cols)));
    }
    let (hr, hc) = (d.size_rows / 2, d.size_cols / 2);
    // Bounding box of the defect around its centre.
    let (up, down, left, right) = if d.kind.is_ellipse() { (hr, hr, hc, hc) } else { (hr, d.size_rows - hr - 1, hc, d.size_cols - hc - 1) };
    let out_of_bounds = || Error::PlacementOutOfBounds { size_rows: d.size_rows, size_cols: d.size_cols, rows, cols };
    if up + down >= rows || left + right >= cols {
        return Err(out_of_bounds());
    }
    let mut rng = substream(d.seed, 0);
    let (cr, cc) = match d.placement {
        Placement::Center { row, col } => {
            if row < up || row + down >= rows || col < left || col + right >= cols {
                return Err(out_of_bounds());
            }
            (row, col)
        }
        Placement::Random => (rng.random_range(up..rows - down), rng.random_range(left..cols - right)),
    };

    let mut mask = DefectMask::empty(rows, cols);
    mask.center_row = cr;
    mask.center_col = cc;
    for r in cr - up..=cr + down {
        for c in cc - left..=cc + right {
            let inside = !d.kind.is_ellipse() || in_ellipse(r, c, cr, cc, d.size_rows, d.size_cols);
            mask.bits[r * cols + c] = inside;
        }
    }

    let mut out = field.clone();
    match d.kind {
        DefectKind::WhiteNoiseEllipse | DefectKind::WhiteNoiseSquare => {
            let sd = match d.noise {
                NoiseLevel::Marginal => p.stationary_sd(),
                NoiseLevel::Innovation => p.sigma,
            };
            let noise = Normal::new(0.0, sd).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let mut noise_rng = substream(d.seed, 1);
            for (i, &b) in mask.bits.iter().enumerate() {
                if b {
                    out.pixels_mut()[i] = noise.sample(&mut noise_rng);
                }
            }
        }
        DefectKind::MilderArEllipse { phi1, phi2 } => {
            let aux = SarParams { phi1, phi2, ..*p };
            aux.validate()?;
            let patch = sar_field(phi1, phi2, p.sigma, rows, cols, &mut substream(d.seed, 1));
            for (i, &b) in mask.bits.iter().enumerate() {
                if b {
                    out.pixels_mut()[i] = patch.pixels()[i];
                }
            }
        }
        DefectKind::BlackSquare => {
            let (lo, _) = field.min_max();
            for (i, &b) in mask.bits.iter().enumerate() {
                if b {
                    out.pixels_mut()[i] = lo;
                }
            }
        }
    }
    Ok((out, mask))
}

/// In-control greyscale image for `seed`.
pub fn in_control_image(p: &SarParams) -> Result<GreyImage> {
    to_greyscale(&generate_sar(p)?)
}

/// Greyscale image with one defect, plus its mask.
pub fn defect_image(p: &SarParams, d: &DefectSpec) -> Result<(GreyImage, DefectMask)> {
    let field = generate_sar(p)?;
    let (field, mask) = inject_defect(&field, d, p)?;
    Ok((to_greyscale(&field)?, mask))
}
