//! Spatial moving statistics over residual images and the image maximum.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GreyImage;
use crate::kernel::Kernel;
use crate::refcdf::ReferenceCdf;
use crate::tree::ResidualImage;

pub use crate::kernel::kernel_weight;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmsKind {
    Ad,
    Bp,
    Epwma,
    Epwmv,
}

impl SmsKind {
    pub fn name(self) -> &'static str {
        match self {
            SmsKind::Ad => "ad",
            SmsKind::Bp => "bp",
            SmsKind::Epwma => "epwma",
            SmsKind::Epwmv => "epwmv",
        }
    }

    /// Residual-based statistics; the others work on pixel intensities.
    pub fn uses_residuals(self) -> bool {
        matches!(self, SmsKind::Ad | SmsKind::Bp)
    }
}

impl fmt::Display for SmsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SmsKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ad" => Ok(SmsKind::Ad),
            "bp" => Ok(SmsKind::Bp),
            "epwma" => Ok(SmsKind::Epwma),
            "epwmv" => Ok(SmsKind::Epwmv),
            other => Err(Error::InvalidConfig(format!("unknown statistic {other:?}"))),
        }
    }
}

/// Region averaged for the local mean of the moving variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanWindow {
    /// Pixels with positive kernel weight.
    #[default]
    Disk,
    /// The full `w x w` square.
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmsConfig {
    pub kind: SmsKind,
    pub w: usize,
    #[serde(default)]
    pub mean_window: MeanWindow,
}

impl SmsConfig {
    pub fn new(kind: SmsKind, w: usize) -> Result<Self> {
        let cfg = SmsConfig { kind, w, mean_window: MeanWindow::Disk };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w < 3 || self.w % 2 == 0 {
            return Err(Error::InvalidConfig(format!("window width must be odd and at least 3, got {}", self.w)));
        }
        Ok(())
    }

    /// Border excluded on every side of the statistic's input.
    pub fn margin(&self) -> usize {
        match self.kind {
            SmsKind::Ad => (self.w - 1) / 2,
            SmsKind::Bp => self.w,
            SmsKind::Epwma | SmsKind::Epwmv => (self.w + 1) / 2,
        }
    }
}

/// Border widths relative to the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Margins {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

/// Per-pixel statistic over the valid region of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct SmsImage {
    pub kind: SmsKind,
    pub w: usize,
    pub values: GreyImage,
    /// Border excluded on each side of the statistic's input.
    pub margin: usize,
    /// Position of `values[0][0]` in source image coordinates.
    pub offset_row: usize,
    pub offset_col: usize,
    pub source_rows: usize,
    pub source_cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmsHeader {
    pub schema_version: u32,
    pub kind: SmsKind,
    pub w: usize,
    pub rows: usize,
    pub cols: usize,
    pub margins: Margins,
    pub offset_row: usize,
    pub offset_col: usize,
    pub source_rows: usize,
    pub source_cols: usize,
    pub encoding: String,
}

impl SmsImage {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn margins(&self) -> Margins {
        Margins {
            top: self.offset_row,
            left: self.offset_col,
            bottom: self.source_rows - self.offset_row - self.rows(),
            right: self.source_cols - self.offset_col - self.cols(),
        }
    }

    pub fn header(&self) -> SmsHeader {
        SmsHeader {
            schema_version: 1,
            kind: self.kind,
            w: self.w,
            rows: self.rows(),
            cols: self.cols(),
            margins: self.margins(),
            offset_row: self.offset_row,
            offset_col: self.offset_col,
            source_rows: self.source_rows,
            source_cols: self.source_cols,
            encoding: "f64-le-row-major".into(),
        }
    }

    /// Values as little-endian doubles in row-major order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.pixels().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_parts(header: &SmsHeader, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != header.rows * header.cols * 8 {
            return Err(Error::Format(format!(
                "grid holds {} bytes, header expects {}x{} doubles",
                bytes.len(),
                header.rows,
                header.cols
            )));
        }
        let pixels = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(SmsImage {
            kind: header.kind,
            w: header.w,
            values: GreyImage::new(header.rows, header.cols, pixels)?,
            margin: match header.kind {
                SmsKind::Ad => (header.w - 1) / 2,
                SmsKind::Bp => header.w,
                _ => (header.w + 1) / 2,
            },
            offset_row: header.offset_row,
            offset_col: header.offset_col,
            source_rows: header.source_rows,
            source_cols: header.source_cols,
        })
    }
}

/// The monitoring statistic: the largest value over the valid region.
pub fn image_statistic(sms: &SmsImage) -> Result<f64> {
    sms.values.pixels().iter().copied().reduce(f64::max).ok_or(Error::EmptyValidRegion)
}

pub(crate) fn check_window(w: usize, need: usize, rows: usize, cols: usize) -> Result<()> {
    if w < 3 || w % 2 == 0 {
        return Err(Error::InvalidConfig(format!("window width must be odd and at least 3, got {w}")));
    }
    if rows < need || cols < need {
        return Err(Error::WindowTooLarge { w, rows, cols });
    }
    Ok(())
}

/// One-sample Anderson-Darling statistic of every full `w x w` residual
/// window against `phi`.
pub fn ad_sms(res: &ResidualImage, phi: &ReferenceCdf, w: usize) -> Result<SmsImage> {
    let (rows, cols) = (res.rows(), res.cols());
    check_window(w, w, rows, cols)?;
    let values = res.values.pixels();

    // Global ranks, ties broken by position, so a window is a set of ranks.
    let mut order: Vec<u32> = (0..values.len() as u32).collect();
    order.par_sort_unstable_by(|&a, &b| values[a as usize].total_cmp(&values[b as usize]).then(a.cmp(&b)));
    let mut rank = vec![0u32; values.len()];
    for (k, &idx) in order.iter().enumerate() {
        rank[idx as usize] = k as u32;
    }
    let ascending: Vec<f64> = order.iter().map(|&i| values[i as usize]).collect();
    let logs = phi.log_pairs_sorted(&ascending);

    let out_rows = rows - w + 1;
    let out_cols = cols - w + 1;
    let n = w * w;
    let nf = n as f64;
    let mut out = vec![0.0; out_rows * out_cols];
    out.par_chunks_mut(out_cols).enumerate().for_each(|(i, line)| {
        let column = |c: usize, buf: &mut Vec<u32>| {
            buf.clear();
            buf.extend((i..i + w).map(|r| rank[r * cols + c]));
            buf.sort_unstable();
        };
        let mut window: Vec<u32> = (i..i + w).flat_map(|r| rank[r * cols..r * cols + w].iter().copied()).collect();
        window.sort_unstable();
        let mut next = Vec::with_capacity(n);
        let (mut gone, mut came) = (Vec::with_capacity(w), Vec::with_capacity(w));
        for (j, o) in line.iter_mut().enumerate() {
            if j > 0 {
                column(j - 1, &mut gone);
                column(j + w - 1, &mut came);
                next.clear();
                let (mut g, mut c) = (0, 0);
                for &s in &window {
                    if g < gone.len() && gone[g] == s {
                        g += 1;
                        continue;
                    }
                    while c < came.len() && came[c] < s {
                        next.push(came[c]);
                        c += 1;
                    }
                    next.push(s);
                }
                next.extend_from_slice(&came[c..]);
                std::mem::swap(&mut window, &mut next);
            }
            let mut acc = 0.0;
            for k in 0..n {
                let coef = (2 * k + 1) as f64 / nf;
                acc += coef * (logs[window[k] as usize].0 + logs[window[n - 1 - k] as usize].1);
            }
            *o = -nf - acc;
        }
    });

    let margin = (w - 1) / 2;
    Ok(SmsImage {
        kind: SmsKind::Ad,
        w,
        values: GreyImage::new(out_rows, out_cols, out)?,
        margin,
        offset_row: res.offset_row + margin,
        offset_col: res.offset_col + margin,
        source_rows: res.source_rows,
        source_cols: res.source_cols,
    })
}

/// Sum of squared kernel-weighted local covariances between each pixel and
/// every pixel of its `w x w` window.
pub fn bp_sms(res: &ResidualImage, w: usize) -> Result<SmsImage> {
    let (rows, cols) = (res.rows(), res.cols());
    check_window(w, 2 * w + 1, rows, cols)?;
    let r = res.values.pixels();
    let kernel = Kernel::new(w);
    let reach = kernel.reach() as isize;
    let hw = ((w - 1) / 2) as isize;
    let ksum = kernel.sum();

    let vr = rows - 2 * w;
    let vc = cols - 2 * w;
    let mut total = vec![0.0; vr * vc];

    // Half of the window displacements; the other half follows from
    // cov(i, i - d) = C_d(i - d).
    let mut shifts = vec![(0isize, 0isize)];
    shifts.extend((1..=hw).map(|dc| (0, dc)));
    for dr in 1..=hw {
        shifts.extend((-hw..=hw).map(|dc| (dr, dc)));
    }

    let wi = w as isize;
    for &(dr, dc) in &shifts {
        // Bounding box of V and V - d, V being the valid region.
        let br0 = wi - dr.max(0);
        let br1 = rows as isize - wi - dr.min(0);
        let bc0 = wi - dc.max(0);
        let bc1 = cols as isize - wi - dc.min(0);
        let (pr0, pc0) = (br0 - reach, bc0 - reach);
        let pr = (br1 - br0 + 2 * reach) as usize;
        let pc = (bc1 - bc0 + 2 * reach) as usize;
        debug_assert!(pr0 >= 0 && pc0 >= 0 && pr0 + dr >= 0 && pc0 + dc >= 0);
        debug_assert!(pr0 + pr as isize + dr.max(0) <= rows as isize && pc0 + pc as isize + dc.max(0) <= cols as isize);
        let mut plane = vec![0.0; pr * pc];
        plane.par_chunks_mut(pc).enumerate().for_each(|(i, line)| {
            let x = (pr0 + i as isize) as usize;
            let y = (pr0 + i as isize + dr) as usize;
            let a = &r[x * cols + pc0 as usize..][..pc];
            let b = &r[y * cols + (pc0 + dc) as usize..][..pc];
            for ((o, &u), &v) in line.iter_mut().zip(a).zip(b) {
                *o = u * v;
            }
        });
        let bw = (bc1 - bc0) as usize;
        let mut cov = kernel.weighted_sums(&plane, pc, reach as usize, reach as usize, (br1 - br0) as usize, bw);
        cov.iter_mut().for_each(|c| *c /= ksum);

        let mirrored = (dr, dc) != (0, 0);
        total.par_chunks_mut(vc).enumerate().for_each(|(i, line)| {
            let row = wi + i as isize;
            let here = &cov[((row - br0) as usize) * bw..];
            let back = &cov[((row - dr - br0) as usize) * bw..];
            for (j, t) in line.iter_mut().enumerate() {
                let col = wi + j as isize;
                let c = here[(col - bc0) as usize];
                *t += c * c;
                if mirrored {
                    let c = back[(col - dc - bc0) as usize];
                    *t += c * c;
                }
            }
        });
    }

    Ok(SmsImage {
        kind: SmsKind::Bp,
        w,
        values: GreyImage::new(vr, vc, total)?,
        margin: w,
        offset_row: res.offset_row + w,
        offset_col: res.offset_col + w,
        source_rows: res.source_rows,
        source_cols: res.source_cols,
    })
}
