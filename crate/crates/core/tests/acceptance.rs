//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test --release -p sts-core --test acceptance -- 3 5`.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use sts_core::experiment::{run_power_experiment, ExperimentConfig, PowerTable};
use sts_core::image::{GreyImage, NeighborhoodSpec};
use sts_core::io::encode_png_binary;
use sts_core::model::ModelFile;
use sts_core::monitor::{calibrate, monitor_image, CalibrationBundle, CalibrationOptions, ReferenceSource};
use sts_core::refcdf::ReferenceCdf;
use sts_core::simulator::{
    child_seed, defect_image, generate_sar, in_control_image, inject_defect, to_greyscale, DefectKind, DefectMask, DefectSpec,
    Placement, SarParams,
};
use sts_core::sms::{ad_sms, bp_sms, kernel_weight, SmsConfig, SmsKind};
use sts_core::tree::{fit_on_image, select_neighborhood, FitConfig, ResidualImage};

const SEED: u64 = 2017;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut shared = Shared::default();
    let criteria: [(u32, &str, fn(&mut Shared) -> Outcome); 8] = [
        (1, "desk-scale power of A-D and B-P", criterion_1),
        (2, "desk-scale failure of EPWMA and EPWMV", criterion_2),
        (3, "Type I error on 1000 in-control images", criterion_3),
        (4, "cross-validated neighborhood recovery", criterion_4),
        (5, "oracle equivalence", criterion_5),
        (6, "diagnostic localization", criterion_6),
        (7, "determinism and persistence", criterion_7),
        (8, "black square and white-noise square", criterion_8),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !run(n) {
            continue;
        }
        let t = Instant::now();
        let o = f(&mut shared);
        if !o.pass {
            failed += 1;
        }
        println!("criterion {n} {}: {name} ({:.0?}) {}", if o.pass { "PASS" } else { "FAIL" }, t.elapsed(), o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

/// Work reused by several criteria.
#[derive(Default)]
struct Shared {
    power: Option<PowerTable>,
    model: Option<ModelFile>,
    phase1: Option<Vec<GreyImage>>,
    bp5: Option<CalibrationBundle>,
}

fn sar(seed: u64) -> SarParams {
    SarParams { seed, ..SarParams::default() }
}

impl Shared {
    fn power(&mut self) -> &PowerTable {
        self.power.get_or_insert_with(|| {
            let table = run_power_experiment(&ExperimentConfig::desk_scale(SEED)).expect("power experiment");
            print!("{}", table.to_csv());
            table
        })
    }

    /// Model fitted on a fresh 500x500 in-control image with l = 1.
    fn model(&mut self) -> ModelFile {
        self.model
            .get_or_insert_with(|| {
                let train = in_control_image(&SarParams { rows: 500, cols: 500, ..sar(child_seed(SEED, 100)) }).unwrap().standardize().unwrap();
                ModelFile::new(fit_on_image(&train, NeighborhoodSpec::new(1).unwrap(), &FitConfig::default()).unwrap())
            })
            .clone()
    }

    /// 1000 in-control Phase I images.
    fn phase1(&mut self) -> &[GreyImage] {
        self.phase1.get_or_insert_with(|| {
            let base = child_seed(SEED, 101);
            (0..1000u64).into_par_iter().map(|j| in_control_image(&sar(child_seed(base, j))).unwrap()).collect()
        })
    }

    /// B-P, w = 5 bundle calibrated on the 1000 Phase I images with n_D = 10.
    fn bp5(&mut self) -> CalibrationBundle {
        if self.bp5.is_none() {
            let model = self.model();
            let opts = CalibrationOptions::new(SmsConfig::new(SmsKind::Bp, 5).unwrap());
            let b = calibrate(self.phase1(), Some(model), &opts).unwrap();
            self.bp5 = Some(b);
        }
        self.bp5.clone().unwrap()
    }
}

fn power_of(t: &PowerTable, defect: &str, kind: SmsKind, w: usize) -> f64 {
    t.cell(defect, kind, w).unwrap_or_else(|| panic!("no cell {defect} {kind} {w}")).power
}

fn criterion_1(s: &mut Shared) -> Outcome {
    let t = s.power();
    let mut ok = true;
    let mut parts = Vec::new();
    for (defect, min) in [("5x5", 0.85), ("5x21", 0.95), ("9x21", 0.95), ("15x21", 0.95)] {
        let p = power_of(t, defect, SmsKind::Bp, 5);
        ok &= p >= min;
        parts.push(format!("bp5 {defect} {p:.3} (>= {min})"));
    }
    let ad25 = power_of(t, "5x5", SmsKind::Ad, 25);
    ok &= ad25 <= 0.10;
    parts.push(format!("ad25 5x5 {ad25:.3} (<= 0.10)"));
    let ad15 = power_of(t, "9x21", SmsKind::Ad, 15);
    ok &= ad15 >= 0.9;
    parts.push(format!("ad15 9x21 {ad15:.3} (>= 0.90)"));
    outcome(ok, parts.join("; "))
}

fn criterion_2(s: &mut Shared) -> Outcome {
    let t = s.power();
    let mut worst = (0.0f64, String::new());
    for c in &t.cells {
        let baseline = c.statistic == SmsKind::Epwma || (c.statistic == SmsKind::Epwmv && c.w >= 15);
        if baseline && c.power >= worst.0 {
            worst = (c.power, format!("{} w={} {}", c.statistic, c.w, c.defect));
        }
    }
    outcome(worst.0 <= 0.10, format!("largest baseline power {:.3} at {} (<= 0.10)", worst.0, worst.1))
}

/// Equal-tailed 95% acceptance region for the number of alarms among `n`
/// in-control images when the false-alarm probability is `p`.
fn binomial_region(n: usize, p: f64) -> (usize, usize) {
    let mut pmf = vec![0.0f64; n + 1];
    pmf[0] = (1.0 - p).powi(n as i32);
    for k in 1..=n {
        pmf[k] = pmf[k - 1] * (n - k + 1) as f64 / k as f64 * p / (1.0 - p);
    }
    let mut cdf = 0.0;
    let (mut lo, mut hi) = (None, None);
    for (k, q) in pmf.iter().enumerate() {
        let below = cdf;
        cdf += q;
        if lo.is_none() && below <= 0.025 && cdf > 0.025 {
            lo = Some(k);
        }
        if hi.is_none() && cdf >= 0.975 {
            hi = Some(k);
        }
    }
    (lo.unwrap(), hi.unwrap())
}

fn criterion_3(s: &mut Shared) -> Outcome {
    let bundle = s.bp5();
    let base = child_seed(SEED, 102);
    let alarms = (0..1000u64)
        .into_par_iter()
        .filter(|&j| monitor_image(&in_control_image(&sar(child_seed(base, j))).unwrap(), &bundle, false).unwrap().alarmed)
        .count();
    let (lo, hi) = binomial_region(1000, 0.003);
    outcome(
        (lo..=hi).contains(&alarms),
        format!("{alarms} alarms in 1000 (rate {:.4}); region [{lo}, {hi}] for Bin(1000, 0.003)", alarms as f64 / 1000.0),
    )
}

fn criterion_4(_: &mut Shared) -> Outcome {
    let chosen: Vec<usize> = (0..10u64)
        .map(|r| {
            let seed = child_seed(SEED, 200 + r);
            let img = in_control_image(&SarParams { rows: 500, cols: 500, ..sar(seed) }).unwrap().standardize().unwrap();
            let cfg = FitConfig { l_candidates: (1..=5).collect(), seed, ..FitConfig::default() };
            select_neighborhood(&img, &cfg).unwrap().chosen_l
        })
        .collect();
    let ones = chosen.iter().filter(|&&l| l == 1).count();
    outcome(ones >= 9, format!("l = 1 in {ones} of 10 runs (chosen {chosen:?})"))
}

/// Epanechnikov weight written out from its definition.
fn epanechnikov(h: i64, m: i64, w: usize) -> f64 {
    let r = (w as f64 + 1.0) / 2.0;
    let d2 = (h * h + m * m) as f64;
    if d2 <= r * r {
        0.75 * (1.0 - d2 / (r * r))
    } else {
        0.0
    }
}

fn gaussian_image(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> GreyImage {
    GreyImage::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Quadruple-loop B-P statistic at residual pixel `(i, j)`.
fn bp_naive(r: &GreyImage, i: usize, j: usize, w: usize) -> f64 {
    let half = (w as i64 - 1) / 2;
    let reach = (w as i64 + 1) / 2;
    let mut ksum = 0.0;
    for h in -reach..=reach {
        for m in -reach..=reach {
            ksum += epanechnikov(h, m, w);
        }
    }
    let at = |a: i64, b: i64| r.get(a as usize, b as usize);
    let (i, j) = (i as i64, j as i64);
    let mut t = 0.0;
    for di in -half..=half {
        for dj in -half..=half {
            let (k1, k2) = (i + di, j + dj);
            let mut c = 0.0;
            for h in -reach..=reach {
                for m in -reach..=reach {
                    let kw = epanechnikov(h, m, w);
                    if kw > 0.0 {
                        c += kw * at(i - h, j - m) * at(k1 - h, k2 - m);
                    }
                }
            }
            t += (c / ksum).powi(2);
        }
    }
    t
}

/// Reference cdf and its complement written out from the piecewise definition.
fn phi_pair(f: &ReferenceCdf, r: f64) -> (f64, f64) {
    let n = f.count() as f64;
    let p = f.p();
    if r <= f.r_p() {
        let v = p * ((r - f.r_p()) / f.lambda_lower()).exp();
        (v, 1.0 - v)
    } else if r >= f.r_1mp() {
        let v = p * (-(r - f.r_1mp()) / f.lambda_upper()).exp();
        (1.0 - v, v)
    } else {
        let count = f.sorted_residuals().iter().filter(|&&x| x <= r).count() as f64;
        let lower = (count / n).clamp(p, 1.0 - p);
        let upper = ((n - count) / n).clamp(p, 1.0 - p);
        (lower, upper)
    }
}

/// Direct one-sample A-D statistic of a window against `f`.
fn ad_direct(values: &mut [f64], f: &ReferenceCdf) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let mut s = 0.0;
    for k in 1..=n {
        let (lo, _) = phi_pair(f, values[k - 1]);
        let (_, up) = phi_pair(f, values[n - k]);
        s += (2 * k - 1) as f64 / n as f64 * (lo.ln() + up.ln());
    }
    -(n as f64) - s
}

fn criterion_5(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut parts = Vec::new();
    let mut ok = true;

    let mut bp_err = 0.0f64;
    for _ in 0..10 {
        let img = gaussian_image(40, 40, &mut rng);
        let t = bp_sms(&ResidualImage::standalone(img.clone()), 5).unwrap();
        for a in 0..t.rows() {
            for b in 0..t.cols() {
                let want = bp_naive(&img, a + t.offset_row, b + t.offset_col, 5);
                bp_err = bp_err.max((t.values.get(a, b) - want).abs());
            }
        }
    }
    ok &= bp_err <= 1e-9;
    parts.push(format!("bp max err {bp_err:.1e}"));

    let pool: Vec<f64> = (0..60_000).map(|_| rng.sample(StandardNormal)).collect();
    let f = ReferenceCdf::fit_default(pool).unwrap();
    let mut ad_err = 0.0f64;
    for w in [3, 5, 9] {
        let img = gaussian_image(30, 30, &mut rng).map(|v| 1.3 * v);
        let a = ad_sms(&ResidualImage::standalone(img.clone()), &f, w).unwrap();
        let half = (w - 1) / 2;
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                let (ci, cj) = (i + a.offset_row, j + a.offset_col);
                let mut win: Vec<f64> = (ci - half..=ci + half).flat_map(|r| (cj - half..=cj + half).map(move |c| (r, c))).map(|(r, c)| img.get(r, c)).collect();
                ad_err = ad_err.max((a.values.get(i, j) - ad_direct(&mut win, &f)).abs());
            }
        }
    }
    ok &= ad_err <= 1e-12;
    parts.push(format!("ad max err {ad_err:.1e}"));

    let mut kernel_ok = kernel_weight(0, 0, 25) == 0.75;
    for h in -13i64..=13 {
        for m in -13i64..=13 {
            let k = kernel_weight(h, m, 25);
            kernel_ok &= k == kernel_weight(-h, m, 25) && k == kernel_weight(h, -m, 25) && k == kernel_weight(m, h, 25);
            kernel_ok &= (k - epanechnikov(h, m, 25)).abs() < 1e-15;
            kernel_ok &= if h * h + m * m > 169 { k == 0.0 } else { k >= 0.0 };
        }
    }
    ok &= kernel_ok;
    parts.push(format!("kernel identities {}", if kernel_ok { "hold" } else { "violated" }));

    let mut cdf_ok = f.eval(f.r_p()) == f.p() && f.eval(f.r_1mp()) == 1.0 - f.p();
    let (lo, hi) = (f.r_p() - 10.0 * f.lambda_lower(), f.r_1mp() + 10.0 * f.lambda_upper());
    let mut prev = 0.0;
    for k in 0..10_000 {
        let v = f.eval(lo + (hi - lo) * k as f64 / 9_999.0);
        cdf_ok &= v >= prev && v > 0.0 && v < 1.0;
        prev = v;
    }
    ok &= cdf_ok;
    parts.push(format!("cdf checks {}", if cdf_ok { "hold" } else { "violated" }));
    outcome(ok, parts.join("; "))
}

/// Chebyshev distance from each pixel to the nearest masked pixel is at most
/// `d`.
fn near_mask(mask: &DefectMask, (r, c): (usize, usize), d: usize) -> bool {
    let r0 = r.saturating_sub(d);
    let c0 = c.saturating_sub(d);
    (r0..=(r + d).min(mask.rows - 1)).any(|i| (c0..=(c + d).min(mask.cols - 1)).any(|j| mask.contains(i, j)))
}

fn criterion_6(s: &mut Shared) -> Outcome {
    let bundle = s.bp5();
    let base = child_seed(SEED, 103);
    let (mut near, mut total, mut alarms) = (0usize, 0usize, 0usize);
    for j in 0..20u64 {
        let seed = child_seed(base, j);
        let d = DefectSpec::new(DefectKind::WhiteNoiseEllipse, 15, 21, Placement::Random, child_seed(seed, 1));
        let (img, mask) = defect_image(&sar(seed), &d).unwrap();
        let r = monitor_image(&img, &bundle, true).unwrap();
        alarms += r.alarmed as usize;
        let black = r.diagnostic.unwrap().black_pixels();
        total += black.len();
        near += black.iter().filter(|&&p| near_mask(&mask, p, 5)).count();
    }
    let base = child_seed(SEED, 104);
    let noise: usize = (0..20u64)
        .map(|j| {
            let img = in_control_image(&sar(child_seed(base, j))).unwrap();
            monitor_image(&img, &bundle, true).unwrap().diagnostic.unwrap().black_count()
        })
        .sum();
    let frac = if total == 0 { 0.0 } else { near as f64 / total as f64 };
    let mean_noise = noise as f64 / 20.0;
    outcome(
        frac >= 0.9 && (3.0..=20.0).contains(&mean_noise),
        format!(
            "{near} of {total} black pixels within 5 px of the defect ({:.1}%, >= 90%); {alarms}/20 defect images alarmed; mean in-control black pixels {mean_noise:.1} (in [3, 20])",
            100.0 * frac
        ),
    )
}

/// Serialized artifacts of one train, calibrate and monitor run.
fn pipeline_run() -> (Vec<u8>, Vec<u8>, Vec<String>, Vec<Vec<u8>>, Vec<GreyImage>) {
    let seed = child_seed(SEED, 105);
    let train = in_control_image(&SarParams { rows: 250, cols: 250, ..sar(child_seed(seed, 0)) }).unwrap().standardize().unwrap();
    let cfg = FitConfig { l_candidates: vec![1, 2, 3], seed, ..FitConfig::default() };
    let cv = select_neighborhood(&train, &cfg).unwrap();
    let tree = fit_on_image(&train, NeighborhoodSpec::new(cv.chosen_l).unwrap(), &cfg).unwrap();
    let model = ModelFile { tree, fit_config: Some(cfg), cv: Some(cv), training_digest: None };
    let model_bytes = model.to_bytes();
    let phase1: Vec<GreyImage> = (0..60u64).map(|j| in_control_image(&sar(child_seed(child_seed(seed, 1), j))).unwrap()).collect();
    let opts = CalibrationOptions { reference: ReferenceSource::PhaseIFirst(20), ..CalibrationOptions::new(SmsConfig::new(SmsKind::Ad, 5).unwrap()) };
    let bundle = calibrate(&phase1, Some(ModelFile::from_bytes(&model_bytes).unwrap()), &opts).unwrap();
    let bundle_bytes = bundle.to_bytes();
    let (mut reports, mut pngs) = (Vec::new(), Vec::new());
    for j in 0..4u64 {
        let img_seed = child_seed(child_seed(seed, 2), j);
        let d = DefectSpec::new(DefectKind::WhiteNoiseEllipse, 9, 21, Placement::Random, child_seed(img_seed, 1));
        let (img, _) = defect_image(&sar(img_seed), &d).unwrap();
        let r = monitor_image(&img, &bundle, true).unwrap();
        let diag = r.diagnostic.unwrap();
        reports.push(format!("{:?} {} {}", r.s.to_bits(), r.alarmed, diag.black_count()));
        pngs.push(encode_png_binary(diag.source_rows, diag.source_cols, &diag.full_size()).unwrap());
    }
    (model_bytes, bundle_bytes, reports, pngs, phase1)
}

fn criterion_7(_: &mut Shared) -> Outcome {
    let a = pipeline_run();
    let b = pipeline_run();
    let identical = a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && a.3 == b.3;
    let bundle = CalibrationBundle::from_bytes(&a.1).unwrap();
    let replay: Vec<f64> = a.4.iter().map(|img| monitor_image(img, &bundle, false).unwrap().s).collect();
    let bit_exact = replay.iter().zip(&bundle.phase1_stats).all(|(x, y)| x.to_bits() == y.to_bits()) && replay.len() == bundle.phase1_stats.len();
    outcome(
        identical && bit_exact,
        format!(
            "rerun artifacts {}; {} Phase I statistics replayed from the stored bundle {}",
            if identical { "byte-identical" } else { "differ" },
            replay.len(),
            if bit_exact { "bit-exactly" } else { "with differences" }
        ),
    )
}

/// 8-connected components of the black pixels, as pixel lists.
fn components(rows: usize, cols: usize, black: &[bool]) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; black.len()];
    let mut out = Vec::new();
    for start in 0..black.len() {
        if !black[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            let (r, c) = (i / cols, i % cols);
            comp.push((r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                        continue;
                    }
                    let j = nr as usize * cols + nc as usize;
                    if black[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

fn criterion_8(s: &mut Shared) -> Outcome {
    let model = s.model();
    let phase1 = s.phase1()[..300].to_vec();
    let p = sar(child_seed(SEED, 106));
    let field = generate_sar(&p).unwrap();
    let black_sq = DefectSpec::new(DefectKind::BlackSquare, 15, 15, Placement::Center { row: 70, col: 70 }, 1);
    let noise_sq = DefectSpec::new(DefectKind::WhiteNoiseSquare, 15, 15, Placement::Center { row: 175, col: 175 }, 2);
    let (field, mask_a) = inject_defect(&field, &black_sq, &p).unwrap();
    let (field, mask_b) = inject_defect(&field, &noise_sq, &p).unwrap();
    let img = to_greyscale(&field).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in [SmsKind::Ad, SmsKind::Bp] {
        let bundle = calibrate(&phase1, Some(model.clone()), &CalibrationOptions::new(SmsConfig::new(kind, 5).unwrap())).unwrap();
        let r = monitor_image(&img, &bundle, true).unwrap();
        let d = r.diagnostic.unwrap();
        let comps = components(d.source_rows, d.source_cols, &d.full_size());
        let touches = |mask: &DefectMask| -> Vec<usize> {
            (0..comps.len()).filter(|&k| comps[k].iter().any(|&px| near_mask(mask, px, 5))).collect()
        };
        let (ca, cb) = (touches(&mask_a), touches(&mask_b));
        let distinct = !ca.is_empty() && !cb.is_empty() && ca.iter().any(|k| !cb.contains(k)) && cb.iter().any(|k| !ca.contains(k));
        let pass = r.alarmed && comps.len() >= 2 && distinct;
        ok &= pass;
        parts.push(format!(
            "{kind}5 S {:.3} vs CL {:.3} alarmed {}; {} clusters, {} at the black square, {} at the noise square",
            r.s,
            bundle.control_limit(),
            r.alarmed,
            comps.len(),
            ca.len(),
            cb.len()
        ));
    }
    outcome(ok, parts.join("; "))
}
