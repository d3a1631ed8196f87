//! Phase I calibration, Phase II alarming and diagnostic images.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{epwma_sms, epwmv_sms};
use crate::error::{Error, Result};
use crate::image::GreyImage;
use crate::model::ModelFile;
use crate::quantile::{quantile_index, quantile_sorted};
use crate::refcdf::ReferenceCdf;
use crate::sms::{ad_sms, bp_sms, image_statistic, SmsConfig, SmsImage, SmsKind};
use crate::tree::{residual_image, RegressionTree, ResidualImage};

pub const DEFAULT_ALPHA: f64 = 0.003;
pub const DEFAULT_N_D: usize = 10;
/// Largest pooled Phase I SMS values are kept for noise-pixel targets up to
/// this many pixels per image, so the diagnostic threshold can be re-derived.
pub const DIAG_TAIL_ND: usize = 100;

/// How the control limit is placed on the Phase I statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "type", content = "k", rename_all = "snake_case")]
pub enum LimitRule {
    /// `(1 - alpha)` empirical quantile.
    #[default]
    Quantile,
    /// Exactly `k` Phase I statistics (or deviations) exceed the limit.
    Exceedances(usize),
}

/// Residual sample used to fit the reference cdf of the A-D statistic.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ReferenceSource {
    /// Residuals of every Phase I image.
    #[default]
    PhaseI,
    /// Residuals of the first `k` Phase I images.
    PhaseIFirst(usize),
    /// Residuals of a separate image, typically the training image.
    Image(GreyImage),
}

impl ReferenceSource {
    fn label(&self) -> String {
        match self {
            ReferenceSource::PhaseI => "phase_i".into(),
            ReferenceSource::PhaseIFirst(k) => format!("phase_i_first_{k}"),
            ReferenceSource::Image(_) => "image".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub sms: SmsConfig,
    pub alpha: f64,
    pub n_d: usize,
    pub rule: LimitRule,
    pub reference: ReferenceSource,
}

impl CalibrationOptions {
    pub fn new(sms: SmsConfig) -> Self {
        CalibrationOptions { sms, alpha: DEFAULT_ALPHA, n_d: DEFAULT_N_D, rule: LimitRule::Quantile, reference: ReferenceSource::PhaseI }
    }
}

/// Control limits on the charted statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Limits {
    /// Alarm when the statistic exceeds `cl`.
    Upper { cl: f64 },
    /// Alarm when the statistic leaves `[lcl, ucl]`, symmetric about `center`.
    Symmetric { center: f64, lcl: f64, ucl: f64 },
}

impl Limits {
    pub fn alarms(&self, s: f64) -> bool {
        match *self {
            Limits::Upper { cl } => s > cl,
            Limits::Symmetric { lcl, ucl, .. } => s > ucl || s < lcl,
        }
    }

    /// Upper limit, the value reported as the control limit.
    pub fn upper(&self) -> f64 {
        match *self {
            Limits::Upper { cl } => cl,
            Limits::Symmetric { ucl, .. } => ucl,
        }
    }

    /// Limits from Phase I charted statistics in any order.
    pub fn from_phase1(kind: SmsKind, stats: &[f64], alpha: f64, rule: LimitRule) -> Result<Limits> {
        if stats.is_empty() {
            return Err(Error::InsufficientPhaseI);
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let n = stats.len();
        if let LimitRule::Exceedances(k) = rule {
            if k >= n {
                return Err(Error::InvalidConfig(format!("{k} exceedances requested from {n} Phase I images")));
            }
        } else if (n as f64) < (1.0 / alpha).ceil() {
            warn!("{n} Phase I images are fewer than 1/alpha; the control limit is the sample maximum");
        }
        let upper = |sorted: &[f64]| match rule {
            LimitRule::Quantile => quantile_sorted(sorted, 1.0 - alpha),
            LimitRule::Exceedances(k) => sorted[n - k - 1],
        };
        let mut sorted = stats.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        if kind.uses_residuals() {
            return Ok(Limits::Upper { cl: upper(&sorted) });
        }
        let center = quantile_sorted(&sorted, 0.5);
        let mut dev: Vec<f64> = sorted.iter().map(|s| (s - center).abs()).collect();
        dev.sort_unstable_by(f64::total_cmp);
        let half = upper(&dev);
        Ok(Limits::Symmetric { center, lcl: center - half, ucl: center + half })
    }
}

/// Charted value of an SMS image: its maximum, on the square-root scale for
/// the moving variance.
pub fn chart_value(sms: &SmsImage) -> Result<f64> {
    let s = image_statistic(sms)?;
    Ok(if sms.kind == SmsKind::Epwmv { s.max(0.0).sqrt() } else { s })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBundle {
    /// Embedded model; absent only for the intensity baselines.
    pub model: Option<ModelFile>,
    pub sms: SmsConfig,
    pub reference: Option<ReferenceCdf>,
    pub reference_source: String,
    pub alpha: f64,
    pub rule: LimitRule,
    pub limits: Limits,
    /// Charted Phase I statistics in input order.
    pub phase1_stats: Vec<f64>,
    pub diag_threshold: f64,
    pub n_d: usize,
    pub m_sms: usize,
    /// Largest pooled Phase I SMS values, descending.
    pub diag_tail: Vec<f64>,
    pub image_rows: usize,
    pub image_cols: usize,
}

/// Number of pooled values at or above the `(1 - n_d / m_sms)` quantile of
/// `n_images * m_sms` values.
fn upper_count(n_d: usize, m_sms: usize, n_images: usize) -> usize {
    let total = m_sms * n_images;
    let q = 1.0 - n_d as f64 / m_sms as f64;
    total - quantile_index(q.max(f64::MIN_POSITIVE), total) + 1
}

impl CalibrationBundle {
    /// Diagnostic threshold for a different noise-pixel target.
    pub fn diag_threshold_for(&self, n_d: usize) -> Result<f64> {
        let t = upper_count(n_d, self.m_sms, self.phase1_stats.len());
        self.diag_tail.get(t - 1).copied().ok_or_else(|| {
            Error::InvalidConfig(format!("n_D = {n_d} exceeds the stored range of the bundle"))
        })
    }

    pub fn control_limit(&self) -> f64 {
        self.limits.upper()
    }

    pub fn tree(&self) -> Option<&RegressionTree> {
        self.model.as_ref().map(|m| &m.tree)
    }

    /// Phase I statistics in ascending order.
    pub fn sorted_stats(&self) -> Vec<f64> {
        let mut s = self.phase1_stats.clone();
        s.sort_unstable_by(f64::total_cmp);
        s
    }
}

fn window_error_to_size(e: Error, rows: usize, cols: usize) -> Error {
    match e {
        Error::WindowTooLarge { w, .. } => Error::too_small(rows, cols, format!("window width {w} leaves no valid pixels")),
        other => other,
    }
}

/// Standardize and, for residual statistics, compute residuals.
pub fn prepare(img: &GreyImage, kind: SmsKind, tree: Option<&RegressionTree>) -> Result<(GreyImage, Option<ResidualImage>)> {
    let std = img.standardize()?;
    if !kind.uses_residuals() {
        return Ok((std, None));
    }
    let tree = tree.ok_or_else(|| Error::ConfigMismatch(format!("statistic {kind} needs a fitted model")))?;
    let res = residual_image(tree, &std)?;
    Ok((std, Some(res)))
}

/// SMS image from a prepared (standardized) image and its residuals.
pub fn sms_from_prepared(
    cfg: &SmsConfig,
    standardized: &GreyImage,
    residuals: Option<&ResidualImage>,
    reference: Option<&ReferenceCdf>,
) -> Result<SmsImage> {
    cfg.validate()?;
    let missing = |what: &str| Error::ConfigMismatch(format!("statistic {} needs {what}", cfg.kind));
    let out = match cfg.kind {
        SmsKind::Ad => ad_sms(residuals.ok_or_else(|| missing("residuals"))?, reference.ok_or_else(|| missing("a reference cdf"))?, cfg.w),
        SmsKind::Bp => bp_sms(residuals.ok_or_else(|| missing("residuals"))?, cfg.w),
        SmsKind::Epwma => epwma_sms(standardized, cfg.w),
        SmsKind::Epwmv => epwmv_sms(standardized, cfg.w, cfg.mean_window),
    };
    out.map_err(|e| window_error_to_size(e, standardized.rows(), standardized.cols()))
}

/// Full pipeline from a raw image to its SMS image.
pub fn statistic_image(img: &GreyImage, cfg: &SmsConfig, tree: Option<&RegressionTree>, reference: Option<&ReferenceCdf>) -> Result<SmsImage> {
    let (std, res) = prepare(img, cfg.kind, tree)?;
    sms_from_prepared(cfg, &std, res.as_ref(), reference)
}

/// Keeps the `t` largest values of a stream; the smallest kept value is the
/// requested upper order statistic.
struct TopValues {
    t: usize,
    kept: Vec<f64>,
}

impl TopValues {
    fn new(t: usize) -> Self {
        TopValues { t, kept: Vec::new() }
    }

    fn trim(values: &mut Vec<f64>, t: usize) {
        if values.len() > t {
            values.select_nth_unstable_by(t - 1, |a, b| b.total_cmp(a));
            values.truncate(t);
        }
    }

    fn extend(&mut self, mut values: Vec<f64>) {
        Self::trim(&mut values, self.t);
        self.kept.extend(values);
        if self.kept.len() > 4 * self.t.max(1024) {
            Self::trim(&mut self.kept, self.t);
        }
    }

    /// The kept values in descending order.
    fn into_descending(mut self) -> Vec<f64> {
        Self::trim(&mut self.kept, self.t);
        self.kept.sort_unstable_by(|a, b| b.total_cmp(a));
        self.kept
    }
}

/// Phase I calibration of one statistic.
pub fn calibrate(images: &[GreyImage], model: Option<ModelFile>, opts: &CalibrationOptions) -> Result<CalibrationBundle> {
    opts.sms.validate()?;
    let cfg = opts.sms;
    let first = images.first().ok_or(Error::InsufficientPhaseI)?;
    let (rows, cols) = (first.rows(), first.cols());
    for img in images {
        if (img.rows(), img.cols()) != (rows, cols) {
            return Err(Error::mismatch(format!("{rows}x{cols}"), format!("{}x{}", img.rows(), img.cols())));
        }
    }
    let tree = model.as_ref().map(|m| &m.tree);
    if cfg.kind.uses_residuals() && tree.is_none() {
        return Err(Error::ConfigMismatch(format!("statistic {} needs a fitted model", cfg.kind)));
    }

    let reference = if cfg.kind == SmsKind::Ad {
        let pool_from = |imgs: &[GreyImage]| -> Result<Vec<f64>> {
            let parts: Vec<Vec<f64>> = imgs
                .par_iter()
                .map(|img| Ok(prepare(img, cfg.kind, tree)?.1.expect("residuals").values.into_pixels()))
                .collect::<Result<_>>()?;
            Ok(parts.concat())
        };
        let pool = match &opts.reference {
            ReferenceSource::PhaseI => pool_from(images)?,
            ReferenceSource::PhaseIFirst(k) => pool_from(&images[..(*k).clamp(1, images.len())])?,
            ReferenceSource::Image(img) => pool_from(std::slice::from_ref(img))?,
        };
        Some(ReferenceCdf::fit_default(pool)?)
    } else {
        None
    };

    // Charted statistic per image plus the largest pooled SMS values.
    let m_sms = {
        let probe = statistic_image(first, &cfg, tree, reference.as_ref())?;
        probe.values.len()
    };
    let t = upper_count(opts.n_d, m_sms, images.len());
    let mut top = TopValues::new(t.max(upper_count(DIAG_TAIL_ND, m_sms, images.len())));
    let mut stats = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let scored: Vec<(f64, Vec<f64>)> = chunk
            .par_iter()
            .map(|img| {
                let sms = statistic_image(img, &cfg, tree, reference.as_ref())?;
                let s = chart_value(&sms)?;
                Ok((s, sms.values.into_pixels()))
            })
            .collect::<Result<_>>()?;
        for (s, values) in scored {
            stats.push(s);
            top.extend(values);
        }
    }
    let diag_tail = top.into_descending();
    let diag_threshold = diag_tail[t - 1];
    let limits = Limits::from_phase1(cfg.kind, &stats, opts.alpha, opts.rule)?;

    Ok(CalibrationBundle {
        model,
        sms: cfg,
        reference,
        reference_source: if cfg.kind == SmsKind::Ad { opts.reference.label() } else { "none".into() },
        alpha: opts.alpha,
        rule: opts.rule,
        limits,
        phase1_stats: stats,
        diag_threshold,
        n_d: opts.n_d,
        m_sms,
        diag_tail,
        image_rows: rows,
        image_cols: cols,
    })
}

/// Binary image of pixels whose SMS exceeds the diagnostic threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticImage {
    pub rows: usize,
    pub cols: usize,
    pub black: Vec<bool>,
    pub offset_row: usize,
    pub offset_col: usize,
    pub source_rows: usize,
    pub source_cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSidecar {
    pub schema_version: u32,
    pub rows: usize,
    pub cols: usize,
    pub offset_row: usize,
    pub offset_col: usize,
    pub source_rows: usize,
    pub source_cols: usize,
    pub black_pixels: usize,
    pub threshold: f64,
}

impl DiagnosticImage {
    pub fn black_count(&self) -> usize {
        self.black.iter().filter(|&&b| b).count()
    }

    /// Source-sized rendering with white margins.
    pub fn full_size(&self) -> Vec<bool> {
        let mut out = vec![false; self.source_rows * self.source_cols];
        for r in 0..self.rows {
            let dst = (r + self.offset_row) * self.source_cols + self.offset_col;
            out[dst..dst + self.cols].copy_from_slice(&self.black[r * self.cols..(r + 1) * self.cols]);
        }
        out
    }

    /// Flagged pixels in source image coordinates.
    pub fn black_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.rows * self.cols)
            .filter(|&i| self.black[i])
            .map(|i| (i / self.cols + self.offset_row, i % self.cols + self.offset_col))
            .collect()
    }

    pub fn sidecar(&self, threshold: f64) -> DiagnosticSidecar {
        DiagnosticSidecar {
            schema_version: 1,
            rows: self.rows,
            cols: self.cols,
            offset_row: self.offset_row,
            offset_col: self.offset_col,
            source_rows: self.source_rows,
            source_cols: self.source_cols,
            black_pixels: self.black_count(),
            threshold,
        }
    }
}

pub fn diagnostic_image(sms: &SmsImage, bundle: &CalibrationBundle) -> Result<DiagnosticImage> {
    if sms.kind != bundle.sms.kind || sms.w != bundle.sms.w {
        return Err(Error::ConfigMismatch(format!(
            "SMS image is {} w={}, bundle is {} w={}",
            sms.kind, sms.w, bundle.sms.kind, bundle.sms.w
        )));
    }
    Ok(DiagnosticImage {
        rows: sms.rows(),
        cols: sms.cols(),
        black: sms.values.pixels().iter().map(|&v| v > bundle.diag_threshold).collect(),
        offset_row: sms.offset_row,
        offset_col: sms.offset_col,
        source_rows: sms.source_rows,
        source_cols: sms.source_cols,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorReport {
    pub s: f64,
    pub alarmed: bool,
    pub sms: SmsImage,
    pub diagnostic: Option<DiagnosticImage>,
}

/// Score one Phase II image. The diagnostic image is produced when the image
/// alarms or when `force_diagnostic` is set.
pub fn monitor_image(img: &GreyImage, bundle: &CalibrationBundle, force_diagnostic: bool) -> Result<MonitorReport> {
    let sms = statistic_image(img, &bundle.sms, bundle.tree(), bundle.reference.as_ref())?;
    let s = chart_value(&sms).map_err(|_| Error::too_small(img.rows(), img.cols(), "no valid SMS pixels"))?;
    let alarmed = bundle.limits.alarms(s);
    let diagnostic = if alarmed || force_diagnostic { Some(diagnostic_image(&sms, bundle)?) } else { None };
    Ok(MonitorReport { s, alarmed, sms, diagnostic })
}
