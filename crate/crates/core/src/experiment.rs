//! Seeded Monte Carlo power study on simulated textures.

use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::NeighborhoodSpec;
use crate::monitor::{chart_value, prepare, sms_from_prepared, LimitRule, Limits, DEFAULT_ALPHA};
use crate::refcdf::ReferenceCdf;
use crate::simulator::{child_seed, defect_image, in_control_image, DefectKind, DefectSpec, NoiseLevel, Placement, SarParams};
use crate::sms::{SmsConfig, SmsKind};
use crate::tree::{fit_on_image, select_neighborhood, FitConfig, RegressionTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectCase {
    pub label: String,
    pub kind: DefectKind,
    pub size_rows: usize,
    pub size_cols: usize,
    #[serde(default)]
    pub noise: NoiseLevel,
}

impl DefectCase {
    pub fn ellipse(size_rows: usize, size_cols: usize) -> Self {
        DefectCase {
            label: format!("{size_rows}x{size_cols}"),
            kind: DefectKind::WhiteNoiseEllipse,
            size_rows,
            size_cols,
            noise: NoiseLevel::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "l", rename_all = "snake_case")]
pub enum NeighborhoodChoice {
    Fixed(usize),
    CrossValidated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub replicates: usize,
    pub phase1_images: usize,
    /// Defect images per defect case.
    pub phase2_images: usize,
    /// Extra in-control Phase II images for the false-alarm rate.
    pub in_control_images: usize,
    pub alpha: f64,
    pub statistics: Vec<SmsConfig>,
    pub defects: Vec<DefectCase>,
    /// Texture parameters of Phase I and II images; the seed is ignored.
    pub sar: SarParams,
    pub training_rows: usize,
    pub training_cols: usize,
    pub fit: FitConfig,
    pub neighborhood: NeighborhoodChoice,
}

fn stat(kind: SmsKind, w: usize) -> SmsConfig {
    SmsConfig::new(kind, w).expect("valid window")
}

impl ExperimentConfig {
    /// Reduced protocol: 3 replicates, 300 Phase I and 50 Phase II images per
    /// defect size.
    pub fn desk_scale(seed: u64) -> Self {
        let mut statistics = vec![stat(SmsKind::Ad, 5), stat(SmsKind::Ad, 15), stat(SmsKind::Ad, 25), stat(SmsKind::Bp, 5)];
        for kind in [SmsKind::Epwma, SmsKind::Epwmv] {
            statistics.extend([5, 15, 25].map(|w| stat(kind, w)));
        }
        ExperimentConfig {
            seed,
            replicates: 3,
            phase1_images: 300,
            phase2_images: 50,
            in_control_images: 0,
            alpha: DEFAULT_ALPHA,
            statistics,
            defects: [(5, 5), (5, 21), (9, 21), (15, 21)].map(|(r, c)| DefectCase::ellipse(r, c)).to_vec(),
            sar: SarParams::default(),
            training_rows: 500,
            training_cols: 500,
            fit: FitConfig { l_candidates: (1..=5).collect(), ..FitConfig::default() },
            neighborhood: NeighborhoodChoice::Fixed(1),
        }
    }

    /// Full protocol: 10 replicates, 1000 Phase I and 400 Phase II images,
    /// every statistic at every window width.
    pub fn full_scale(seed: u64) -> Self {
        let mut statistics = Vec::new();
        for kind in [SmsKind::Ad, SmsKind::Bp, SmsKind::Epwma, SmsKind::Epwmv] {
            statistics.extend([5, 15, 25].map(|w| stat(kind, w)));
        }
        ExperimentConfig {
            replicates: 10,
            phase1_images: 1000,
            phase2_images: 400,
            statistics,
            neighborhood: NeighborhoodChoice::CrossValidated,
            ..Self::desk_scale(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 || self.phase1_images == 0 {
            return Err(Error::InvalidConfig("replicates and Phase I images must be positive".into()));
        }
        if self.statistics.is_empty() {
            return Err(Error::InvalidConfig("no statistics requested".into()));
        }
        for s in &self.statistics {
            s.validate()?;
        }
        self.sar.validate()?;
        self.fit.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCell {
    pub defect: String,
    pub statistic: SmsKind,
    pub w: usize,
    /// Mean alarm fraction over replicates.
    pub power: f64,
    /// Monte Carlo standard error of `power`.
    pub mc_se: f64,
    pub replicates: usize,
    pub per_replicate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateInfo {
    pub seed: u64,
    pub l: usize,
    pub limits: Vec<Limits>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTable {
    pub config: ExperimentConfig,
    pub cells: Vec<PowerCell>,
    pub replicates: Vec<ReplicateInfo>,
}

impl PowerTable {
    pub fn cell(&self, defect: &str, kind: SmsKind, w: usize) -> Option<&PowerCell> {
        self.cells.iter().find(|c| c.defect == defect && c.statistic == kind && c.w == w)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("defect,statistic,w,power,mc_se,replicates\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{:.6},{:.6},{}", c.defect, c.statistic, c.w, c.power, c.mc_se, c.replicates);
        }
        out
    }
}

/// Per-statistic charted values of one image.
fn chart_all(
    img: &crate::image::GreyImage,
    stats: &[SmsConfig],
    tree: &RegressionTree,
    reference: Option<&ReferenceCdf>,
) -> Result<Vec<f64>> {
    let kind = if stats.iter().any(|s| s.kind.uses_residuals()) { SmsKind::Bp } else { SmsKind::Epwma };
    let (std, res) = prepare(img, kind, Some(tree))?;
    stats.iter().map(|s| chart_value(&sms_from_prepared(s, &std, res.as_ref(), reference)?)).collect()
}

struct Replicate {
    info: ReplicateInfo,
    /// Alarm counts per defect case and statistic.
    alarms: Vec<Vec<usize>>,
}

fn run_replicate(cfg: &ExperimentConfig, r: usize) -> Result<Replicate> {
    let seed = child_seed(cfg.seed, r as u64);
    let training = in_control_image(&SarParams { rows: cfg.training_rows, cols: cfg.training_cols, seed: child_seed(seed, 0), ..cfg.sar })?
        .standardize()?;
    let l = match cfg.neighborhood {
        NeighborhoodChoice::Fixed(l) => l,
        NeighborhoodChoice::CrossValidated => {
            select_neighborhood(&training, &FitConfig { seed: child_seed(seed, 1), ..cfg.fit.clone() })?.chosen_l
        }
    };
    let tree = fit_on_image(&training, NeighborhoodSpec::new(l)?, &cfg.fit)?;
    info!("replicate {r}: l = {l}, {} leaves", tree.n_leaves());

    let stats = &cfg.statistics;
    let is_ad: Vec<bool> = stats.iter().map(|s| s.kind == SmsKind::Ad).collect();
    let any_ad = is_ad.iter().any(|&a| a);
    let phase1_seed = child_seed(seed, 2);

    // Pass 1: non-A-D statistics, and residuals for the reference cdf.
    let first: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..cfg.phase1_images)
        .into_par_iter()
        .map(|j| {
            let img = in_control_image(&SarParams { seed: child_seed(phase1_seed, j as u64), ..cfg.sar })?;
            let kind = if stats.iter().any(|s| s.kind.uses_residuals()) { SmsKind::Bp } else { SmsKind::Epwma };
            let (std, res) = prepare(&img, kind, Some(&tree))?;
            let values = stats
                .iter()
                .map(|s| if s.kind == SmsKind::Ad { Ok(f64::NAN) } else { chart_value(&sms_from_prepared(s, &std, res.as_ref(), None)?) })
                .collect::<Result<Vec<f64>>>()?;
            Ok((values, if any_ad { res.map(|r| r.values.into_pixels()) } else { None }))
        })
        .collect::<Result<_>>()?;
    let (mut charted, residuals): (Vec<Vec<f64>>, Vec<Option<Vec<f64>>>) = first.into_iter().unzip();

    let reference = if any_ad {
        let pool: Vec<f64> = residuals.iter().flat_map(|r| r.as_deref().unwrap_or_default().iter().copied()).collect();
        let phi = ReferenceCdf::fit_default(pool)?;
        let (rows, cols) = NeighborhoodSpec::new(l)?.interior_dims(cfg.sar.rows, cfg.sar.cols).expect("image fits");
        let ad: Vec<Vec<f64>> = residuals
            .into_par_iter()
            .map(|r| {
                let values = crate::image::GreyImage::new(rows, cols, r.expect("residuals"))?;
                let res = crate::tree::ResidualImage {
                    values,
                    offset_row: l,
                    offset_col: l,
                    source_rows: cfg.sar.rows,
                    source_cols: cfg.sar.cols,
                };
                stats
                    .iter()
                    .filter(|s| s.kind == SmsKind::Ad)
                    .map(|s| chart_value(&crate::sms::ad_sms(&res, &phi, s.w)?))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        for (row, ad_row) in charted.iter_mut().zip(ad) {
            let mut it = ad_row.into_iter();
            for (v, &a) in row.iter_mut().zip(&is_ad) {
                if a {
                    *v = it.next().expect("one value per A-D statistic");
                }
            }
        }
        Some(phi)
    } else {
        None
    };

    let limits: Vec<Limits> = (0..stats.len())
        .map(|k| {
            let column: Vec<f64> = charted.iter().map(|row| row[k]).collect();
            Limits::from_phase1(stats[k].kind, &column, cfg.alpha, LimitRule::Quantile)
        })
        .collect::<Result<_>>()?;

    let mut cases: Vec<(String, Option<&DefectCase>, usize)> =
        cfg.defects.iter().map(|d| (d.label.clone(), Some(d), cfg.phase2_images)).collect();
    if cfg.in_control_images > 0 {
        cases.push(("none".into(), None, cfg.in_control_images));
    }
    let mut alarms = Vec::with_capacity(cases.len());
    for (d, (label, case, count)) in cases.iter().enumerate() {
        let case_seed = child_seed(seed, 3 + d as u64);
        let per_image: Vec<Vec<bool>> = (0..*count)
            .into_par_iter()
            .map(|k| {
                let img_seed = child_seed(case_seed, k as u64);
                let p = SarParams { seed: img_seed, ..cfg.sar };
                let img = match case {
                    Some(c) => {
                        let spec = DefectSpec {
                            kind: c.kind,
                            size_rows: c.size_rows,
                            size_cols: c.size_cols,
                            placement: Placement::Random,
                            seed: child_seed(img_seed, 1),
                            noise: c.noise,
                        };
                        defect_image(&p, &spec)?.0
                    }
                    None => in_control_image(&p)?,
                };
                let values = chart_all(&img, stats, &tree, reference.as_ref())?;
                Ok(values.iter().zip(&limits).map(|(&s, lim)| lim.alarms(s)).collect())
            })
            .collect::<Result<_>>()?;
        let counts: Vec<usize> = (0..stats.len()).map(|k| per_image.iter().filter(|a| a[k]).count()).collect();
        info!("replicate {r}: {label}: alarms {counts:?} of {count}");
        alarms.push(counts);
    }
    Ok(Replicate { info: ReplicateInfo { seed, l, limits }, alarms })
}

/// Run every replicate and aggregate alarm fractions into a power table.
pub fn run_power_experiment(cfg: &ExperimentConfig) -> Result<PowerTable> {
    cfg.validate()?;
    let reps: Vec<Replicate> = (0..cfg.replicates).map(|r| run_replicate(cfg, r)).collect::<Result<_>>()?;
    let mut labels: Vec<(String, usize)> = cfg.defects.iter().map(|d| (d.label.clone(), cfg.phase2_images)).collect();
    if cfg.in_control_images > 0 {
        labels.push(("none".into(), cfg.in_control_images));
    }
    let mut cells = Vec::new();
    for (d, (label, count)) in labels.iter().enumerate() {
        for (k, s) in cfg.statistics.iter().enumerate() {
            let per: Vec<f64> = reps.iter().map(|rep| rep.alarms[d][k] as f64 / *count as f64).collect();
            let n = per.len() as f64;
            let power = per.iter().sum::<f64>() / n;
            let mc_se = if per.len() > 1 {
                (per.iter().map(|p| (p - power).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                (power * (1.0 - power) / *count as f64).sqrt()
            };
            cells.push(PowerCell { defect: label.clone(), statistic: s.kind, w: s.w, power, mc_se, replicates: per.len(), per_replicate: per });
        }
    }
    Ok(PowerTable { config: cfg.clone(), cells, replicates: reps.into_iter().map(|r| r.info).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_experiment_is_reproducible() {
        let cfg = ExperimentConfig {
            replicates: 2,
            phase1_images: 12,
            phase2_images: 4,
            in_control_images: 3,
            statistics: vec![stat(SmsKind::Ad, 5), stat(SmsKind::Bp, 3), stat(SmsKind::Epwmv, 5)],
            defects: vec![DefectCase::ellipse(9, 21)],
            sar: SarParams { rows: 60, cols: 60, ..SarParams::default() },
            training_rows: 80,
            training_cols: 80,
            ..ExperimentConfig::desk_scale(5)
        };
        let a = run_power_experiment(&cfg).unwrap();
        let b = run_power_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells.len(), 6);
        assert!(a.cells.iter().all(|c| (0.0..=1.0).contains(&c.power) && c.mc_se >= 0.0));
        let csv = a.to_csv();
        assert!(csv.starts_with("defect,statistic,w,power,mc_se,replicates\n9x21,ad,5,"));
        assert_eq!(csv.lines().count(), 7);
    }
}
