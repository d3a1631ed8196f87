//! `stsmon`: train, calibrate, monitor, simulate and benchmark.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use sts_core::bundle::BUNDLE_VERSION;
use sts_core::experiment::{run_power_experiment, ExperimentConfig, NeighborhoodChoice};
use sts_core::image::{GreyImage, NeighborhoodSpec};
use sts_core::io::{atomic_write, encode_png16, encode_png_binary, list_pngs, read_png};
use sts_core::model::{hex, sha256_hex, ModelFile};
use sts_core::monitor::{
    calibrate, monitor_image, CalibrationBundle, CalibrationOptions, LimitRule, Limits, ReferenceSource,
};
use sts_core::simulator::{child_seed, generate_sar, inject_defect, to_greyscale, DefectKind, DefectSpec, NoiseLevel, Placement, SarParams};
use sts_core::sms::{MeanWindow, SmsConfig, SmsKind};
use sts_core::tree::{fit_on_image, select_neighborhood, FitConfig};
use sts_core::Error;

const SCHEMA_VERSION: u32 = 1;
const SUBCOMMANDS: [&str; 5] = ["train", "calibrate", "monitor", "simulate", "benchmark"];

#[derive(Parser, Debug)]
#[command(name = "stsmon", version, about = "Monitoring of stochastic textured surfaces", args_override_self = true)]
struct Cli {
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    /// `key = value` file merged under explicit flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Fit the in-control model on a training image.
    Train(TrainArgs),
    /// Build a calibration bundle from a directory of Phase I images.
    Calibrate(CalibrateArgs),
    /// Score one image or every PNG in a directory.
    Monitor(MonitorArgs),
    /// Write simulated textures, optionally with defects.
    Simulate(SimulateArgs),
    /// Run the simulated power study and write a CSV table.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fixed neighborhood size; skips cross-validation.
    #[arg(long)]
    l: Option<usize>,
    /// Candidate sizes, e.g. `1-5` or `1,2,4`.
    #[arg(long, default_value = "1-20")]
    l_candidates: String,
    #[arg(long, default_value_t = 30)]
    min_leaf: usize,
    #[arg(long, default_value_t = 20)]
    max_depth: usize,
    /// Absolute SSE decrease required for a split.
    #[arg(long)]
    min_gain: Option<f64>,
    #[arg(long, default_value_t = 5)]
    cv_folds: usize,
    #[arg(long, default_value_t = 0.0)]
    cv_tie_tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the cross-validation report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum StatArg {
    Ad,
    Bp,
    Epwma,
    Epwmv,
}

impl From<StatArg> for SmsKind {
    fn from(s: StatArg) -> Self {
        match s {
            StatArg::Ad => SmsKind::Ad,
            StatArg::Bp => SmsKind::Bp,
            StatArg::Epwma => SmsKind::Epwma,
            StatArg::Epwmv => SmsKind::Epwmv,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MeanWindowArg {
    Disk,
    Square,
}

#[derive(Args, Debug, Serialize)]
struct CalibrateArgs {
    /// Model file; not needed for epwma/epwmv.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    phase1: PathBuf,
    #[arg(long, value_enum, default_value = "bp")]
    stat: StatArg,
    #[arg(long, default_value_t = 15)]
    w: usize,
    #[arg(long, default_value_t = 0.003)]
    alpha: f64,
    #[arg(long, default_value_t = 10)]
    nd: usize,
    /// `quantile` or `exceedances:K`.
    #[arg(long, default_value = "quantile")]
    rule: String,
    #[arg(long, value_enum, default_value = "disk")]
    mean_window: MeanWindowArg,
    /// Residuals for the A-D reference: `phase1`, `first:K` or `image:PATH`.
    #[arg(long, default_value = "phase1")]
    reference: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DiagSize {
    /// Source image size with white margins.
    Full,
    /// Valid region only.
    Valid,
}

#[derive(Args, Debug, Serialize)]
struct MonitorArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Write a diagnostic image even when the image does not alarm.
    #[arg(long)]
    diag_always: bool,
    /// Override the bundle's target noise-pixel count.
    #[arg(long)]
    nd: Option<usize>,
    #[arg(long, value_enum, default_value = "full")]
    diag_size: DiagSize,
    /// Also export each SMS image as a binary grid with a JSON header.
    #[arg(long)]
    export_sms: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum NoiseArg {
    /// Marginal sd of the in-control field.
    Marginal,
    /// Innovation sd `sigma`.
    Innovation,
}

impl From<NoiseArg> for NoiseLevel {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Marginal => NoiseLevel::Marginal,
            NoiseArg::Innovation => NoiseLevel::Innovation,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 250)]
    rows: usize,
    #[arg(long, default_value_t = 250)]
    cols: usize,
    #[arg(long, default_value_t = 0.6)]
    phi1: f64,
    #[arg(long, default_value_t = 0.35)]
    phi2: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `KIND:RxC[@ROW,COL]` with KIND one of white-ellipse, milder-ellipse,
    /// black-square, white-square. Repeatable.
    #[arg(long)]
    defect: Vec<String>,
    /// sd of white-noise defect pixels.
    #[arg(long, value_enum, default_value = "marginal")]
    defect_noise: NoiseArg,
    #[arg(long, default_value = "img")]
    prefix: String,
}

#[derive(Args, Debug, Serialize)]
struct BenchmarkArgs {
    /// Reduced protocol (default).
    #[arg(long, conflicts_with = "full_scale")]
    desk_scale: bool,
    /// Ten replicates, 1000 Phase I and 400 Phase II images, all windows.
    #[arg(long)]
    full_scale: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    phase1: Option<usize>,
    #[arg(long)]
    phase2: Option<usize>,
    /// In-control Phase II images for the false-alarm rate.
    #[arg(long)]
    in_control: Option<usize>,
    /// Choose l by cross-validation instead of fixing it.
    #[arg(long)]
    cv: bool,
    /// sd of white-noise defect pixels.
    #[arg(long, value_enum, default_value = "marginal")]
    defect_noise: NoiseArg,
    #[arg(long, default_value = "power.csv")]
    out: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Failure with its exit status.
struct Failure {
    code: &'static str,
    status: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) | Error::Decode(_) => 3,
            Error::ConfigMismatch(_) => 5,
            Error::InvalidConfig(_) => 2,
            _ => 4,
        };
        Failure { code: e.code(), status, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: "Usage", status: 2, message: message.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, f.message);
            ExitCode::from(f.status)
        }
    }
}

fn run(mut args: Vec<String>) -> CliResult<()> {
    let (sub, config) = config::scan(&args, &SUBCOMMANDS);
    if let (Some(i), Some(path)) = (sub, config) {
        let text = fs::read_to_string(&path).map_err(Error::from)?;
        let tokens = config::config_tokens(&text, &args[i]).map_err(|m| usage(format!("{}: {m}", path.display())))?;
        args.splice(i + 1..i + 1, tokens);
    }
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let status = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return if status == 0 { Ok(()) } else { Err(Failure { code: "Usage", status: 2, message: "invalid arguments".into() }) };
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| usage(e.to_string()))?;
    }
    match cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Calibrate(a) => calibrate_cmd(a),
        Cmd::Monitor(a) => monitor_cmd(a),
        Cmd::Simulate(a) => simulate(a),
        Cmd::Benchmark(a) => benchmark(a),
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn json_bytes(v: &impl Serialize) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("json");
    b.push(b'\n');
    b
}

fn parse_candidates(s: &str) -> CliResult<Vec<usize>> {
    let bad = || usage(format!("cannot parse neighborhood candidates {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn train(a: TrainArgs) -> CliResult<()> {
    let cfg = FitConfig {
        min_leaf_size: a.min_leaf,
        max_depth: a.max_depth,
        min_split_improvement: a.min_gain,
        cv_folds: a.cv_folds,
        l_candidates: match a.l {
            Some(l) => vec![l],
            None => parse_candidates(&a.l_candidates)?,
        },
        cv_tie_tolerance: a.cv_tie_tolerance,
        seed: a.seed,
    };
    cfg.validate()?;
    let img = read_png(&a.image)?.standardize()?;
    let cv = match a.l {
        Some(_) => None,
        None => Some(select_neighborhood(&img, &cfg)?),
    };
    let l = cv.as_ref().map_or_else(|| a.l.expect("fixed l"), |r| r.chosen_l);
    info!("fitting with l = {l}");
    let tree = fit_on_image(&img, NeighborhoodSpec::new(l)?, &cfg)?;
    let model = ModelFile { tree, fit_config: Some(cfg), cv: cv.clone(), training_digest: Some(hex(&img.digest())) };
    let bytes = model.to_bytes();
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "train",
        "params": a,
        "model": a.out,
        "model_digest": sha256_hex(&bytes),
        "l": l,
        "n_leaves": model.tree.n_leaves(),
        "depth": model.tree.depth(),
        "cv": cv,
    });
    if let Some(p) = &a.report {
        atomic_write(p, &json_bytes(&summary))?;
    }
    atomic_write(&a.out, &bytes)?;
    print_json(&summary);
    Ok(())
}

fn parse_rule(s: &str) -> CliResult<LimitRule> {
    if s == "quantile" {
        return Ok(LimitRule::Quantile);
    }
    s.strip_prefix("exceedances:")
        .and_then(|k| k.parse().ok())
        .map(LimitRule::Exceedances)
        .ok_or_else(|| usage(format!("unknown limit rule {s:?}")))
}

fn limits_json(l: &Limits) -> Value {
    match *l {
        Limits::Upper { cl } => json!({ "cl": cl }),
        Limits::Symmetric { center, lcl, ucl } => json!({ "cl": ucl, "center": center, "lcl": lcl, "ucl": ucl }),
    }
}

fn read_dir_images(dir: &Path) -> CliResult<Vec<(PathBuf, GreyImage)>> {
    list_pngs(dir)?.into_iter().map(|p| Ok((p.clone(), read_png(&p)?))).collect()
}

fn calibrate_cmd(a: CalibrateArgs) -> CliResult<()> {
    let sms = SmsConfig {
        kind: a.stat.into(),
        w: a.w,
        mean_window: match a.mean_window {
            MeanWindowArg::Disk => MeanWindow::Disk,
            MeanWindowArg::Square => MeanWindow::Square,
        },
    };
    sms.validate()?;
    let rule = parse_rule(&a.rule)?;
    let reference = match a.reference.as_str() {
        "phase1" => ReferenceSource::PhaseI,
        r => {
            if let Some(k) = r.strip_prefix("first:") {
                ReferenceSource::PhaseIFirst(k.parse().map_err(|_| usage(format!("bad reference {r:?}")))?)
            } else if let Some(p) = r.strip_prefix("image:") {
                ReferenceSource::Image(read_png(Path::new(p))?)
            } else {
                return Err(usage(format!("bad reference {r:?}")));
            }
        }
    };
    let model = match &a.model {
        Some(p) => Some(ModelFile::from_bytes(&fs::read(p).map_err(Error::from)?)?),
        None => None,
    };
    let images: Vec<GreyImage> = read_dir_images(&a.phase1)?.into_iter().map(|(_, i)| i).collect();
    if images.is_empty() {
        return Err(Error::InsufficientPhaseI.into());
    }
    let opts = CalibrationOptions { sms, alpha: a.alpha, n_d: a.nd, rule, reference };
    let bundle = calibrate(&images, model, &opts)?;
    let bytes = bundle.to_bytes();
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "calibrate",
        "params": a,
        "bundle": a.out,
        "bundle_digest": sha256_hex(&bytes),
        "bundle_version": BUNDLE_VERSION,
        "n_phase1": bundle.phase1_stats.len(),
        "limits": limits_json(&bundle.limits),
        "diag_threshold": bundle.diag_threshold,
        "m_sms": bundle.m_sms,
        "phase1_alarms": bundle.phase1_stats.iter().filter(|&&s| bundle.limits.alarms(s)).count(),
    });
    atomic_write(&a.out, &bytes)?;
    print_json(&summary);
    Ok(())
}

fn monitor_cmd(a: MonitorArgs) -> CliResult<()> {
    let mut bundle = CalibrationBundle::from_bytes(&fs::read(&a.bundle).map_err(Error::from)?)?;
    if let Some(nd) = a.nd {
        bundle.diag_threshold = bundle.diag_threshold_for(nd)?;
        bundle.n_d = nd;
    }
    let batch = a.input.is_dir();
    let inputs: Vec<(PathBuf, GreyImage)> = if batch { read_dir_images(&a.input)? } else { vec![(a.input.clone(), read_png(&a.input)?)] };
    if batch && inputs.is_empty() {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "no PNG files in input directory")).into());
    }

    // Score everything before writing anything.
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let mut reports = Vec::new();
    let mut csv = String::from("file,S,alarmed\n");
    for (path, img) in &inputs {
        let report = monitor_image(img, &bundle, a.diag_always)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let mut diag_path = Value::Null;
        let mut black = Value::Null;
        if let Some(d) = &report.diagnostic {
            let png = match a.diag_size {
                DiagSize::Full => encode_png_binary(d.source_rows, d.source_cols, &d.full_size())?,
                DiagSize::Valid => encode_png_binary(d.rows, d.cols, &d.black)?,
            };
            let p = a.out_dir.join(format!("{stem}_diag.png"));
            diag_path = json!(p);
            black = json!(d.black_count());
            let mut side = serde_json::to_value(d.sidecar(bundle.diag_threshold)).expect("json");
            side["rendered"] = json!(a.diag_size);
            files.push((p, png));
            files.push((a.out_dir.join(format!("{stem}_diag.json")), json_bytes(&side)));
        }
        if a.export_sms {
            files.push((a.out_dir.join(format!("{stem}_sms.bin")), report.sms.to_le_bytes()));
            files.push((a.out_dir.join(format!("{stem}_sms.json")), json_bytes(&report.sms.header())));
        }
        csv.push_str(&format!("{},{},{}\n", path.display(), report.s, report.alarmed));
        let mut r = json!({
            "schema_version": SCHEMA_VERSION,
            "file": path,
            "s": report.s,
            "alarmed": report.alarmed,
            "diag_path": diag_path,
            "diag_black_pixels": black,
            "stat": bundle.sms.kind,
            "w": bundle.sms.w,
            "alpha": bundle.alpha,
            "nd": bundle.n_d,
            "diag_threshold": bundle.diag_threshold,
        });
        r.as_object_mut().expect("object").extend(limits_json(&bundle.limits).as_object().expect("object").clone());
        reports.push(r);
    }
    if !files.is_empty() || batch {
        fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    }
    if batch {
        files.push((a.out_dir.join("summary.csv"), csv.into_bytes()));
        files.push((a.out_dir.join("reports.json"), json_bytes(&json!({ "schema_version": SCHEMA_VERSION, "params": a, "reports": reports }))));
    }
    for (p, bytes) in &files {
        atomic_write(p, bytes)?;
    }
    if batch {
        let alarms = reports.iter().filter(|r| r["alarmed"] == json!(true)).count();
        print_json(&json!({ "schema_version": SCHEMA_VERSION, "images": reports.len(), "alarms": alarms, "summary": a.out_dir.join("summary.csv") }));
    } else {
        print_json(&reports[0]);
    }
    Ok(())
}

fn parse_defect(s: &str, seed: u64, noise: NoiseLevel) -> CliResult<DefectSpec> {
    let bad = || usage(format!("cannot parse defect {s:?}; expected KIND:RxC[@ROW,COL]"));
    let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
    let kind = match kind {
        "white-ellipse" => DefectKind::WhiteNoiseEllipse,
        "milder-ellipse" => DefectKind::milder(),
        "black-square" => DefectKind::BlackSquare,
        "white-square" => DefectKind::WhiteNoiseSquare,
        _ => return Err(bad()),
    };
    let (size, at) = match rest.split_once('@') {
        Some((s, a)) => (s, Some(a)),
        None => (rest, None),
    };
    let (r, c) = size.split_once('x').ok_or_else(bad)?;
    let placement = match at {
        None => Placement::Random,
        Some(a) => {
            let (row, col) = a.split_once(',').ok_or_else(bad)?;
            Placement::Center { row: row.trim().parse().map_err(|_| bad())?, col: col.trim().parse().map_err(|_| bad())? }
        }
    };
    Ok(DefectSpec {
        kind,
        size_rows: r.trim().parse().map_err(|_| bad())?,
        size_cols: c.trim().parse().map_err(|_| bad())?,
        placement,
        seed,
        noise,
    })
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let base = SarParams { phi1: a.phi1, phi2: a.phi2, sigma: a.sigma, rows: a.rows, cols: a.cols, seed: a.seed };
    base.validate()?;
    for d in &a.defect {
        parse_defect(d, 0, a.defect_noise.into())?;
    }
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for i in 0..a.count {
        let p = SarParams { seed: child_seed(a.seed, i as u64), ..base };
        let mut field = generate_sar(&p)?;
        let mut defects = Vec::new();
        for (k, d) in a.defect.iter().enumerate() {
            let spec = parse_defect(d, child_seed(p.seed, 1 + k as u64), a.defect_noise.into())?;
            let (f, mask) = inject_defect(&field, &spec, &p)?;
            field = f;
            defects.push(json!({
                "spec": spec,
                "center_row": mask.center_row,
                "center_col": mask.center_col,
                "pixels": mask.count(),
                "mask_rle": mask.run_lengths(),
            }));
        }
        let img = to_greyscale(&field)?;
        let name = format!("{}_{:04}.png", a.prefix, i);
        files.push((a.out_dir.join(&name), encode_png16(&img)?));
        entries.push(json!({ "file": name, "seed": p.seed, "defects": defects }));
    }
    let manifest = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "simulate",
        "params": a,
        "encoding": "16-bit greyscale PNG, intensity = sample / 257",
        "mask_rle": "row-major run lengths starting with unmasked pixels",
        "images": entries,
    });
    fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    for (p, bytes) in &files {
        atomic_write(p, bytes)?;
    }
    atomic_write(&a.out_dir.join("manifest.json"), &json_bytes(&manifest))?;
    print_json(&json!({ "schema_version": SCHEMA_VERSION, "images": a.count, "out_dir": a.out_dir }));
    Ok(())
}

fn benchmark(a: BenchmarkArgs) -> CliResult<()> {
    let mut cfg = if a.full_scale { ExperimentConfig::full_scale(a.seed) } else { ExperimentConfig::desk_scale(a.seed) };
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if let Some(n) = a.phase1 {
        cfg.phase1_images = n;
    }
    if let Some(n) = a.phase2 {
        cfg.phase2_images = n;
    }
    if let Some(n) = a.in_control {
        cfg.in_control_images = n;
    }
    if a.cv {
        cfg.neighborhood = NeighborhoodChoice::CrossValidated;
    }
    for d in &mut cfg.defects {
        d.noise = a.defect_noise.into();
    }
    let table = run_power_experiment(&cfg)?;
    if let Some(p) = &a.json {
        atomic_write(p, &json_bytes(&json!({ "schema_version": SCHEMA_VERSION, "params": a, "table": table })))?;
    }
    atomic_write(&a.out, table.to_csv().as_bytes())?;
    print!("{}", table.to_csv());
    Ok(())
}
