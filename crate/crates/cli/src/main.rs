use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use fda_deriv::basis::MultiIndex;
use fda_deriv::covdiag::{self, DiagnosticOptions, MeanCentering};
use fda_deriv::estimator::{cv_bandwidth, estimate_derivative, EvalPoints, FunctionalDataset};
use fda_deriv::harness::{self, CltConfig, RateConfig, SimConfig};
use fda_deriv::weights::epanechnikov_product_kernel;
use fda_deriv::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "fda-deriv",
    version,
    about = "Derivative estimation for functional data"
)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one data set in wide CSV format.
    Simulate(SimulateArgs),
    /// Estimate a partial derivative of the mean function.
    Estimate(EstimateArgs),
    /// Sup-norm error of the process term for rough and smooth paths.
    Rates(RatesArgs),
    /// Mean sup-norm error and its components over a bandwidth grid.
    Sweep(SweepArgs),
    /// Distribution of the scaled derivative error at one point.
    Clt(CltArgs),
    /// Compare one-sided covariance derivatives on the diagonal.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    replicate: usize,
}

#[derive(Args)]
struct EstimateArgs {
    /// Wide CSV: header of design points, one row per curve.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Derivative multi-index, comma separated for d > 1.
    #[arg(long, default_value = "1")]
    s: String,
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, conflicts_with = "cv", required_unless_present = "cv")]
    h: Option<f64>,
    /// Select h by leave-one-curve-out cross-validation of the mean.
    #[arg(long)]
    cv: bool,
    /// Candidate bandwidths for --cv, comma separated.
    #[arg(long, requires = "cv")]
    h_grid: Option<String>,
    /// Evaluate only at design points in [lo + h, hi - h].
    #[arg(long, overrides_with = "no_trim")]
    trim: bool,
    #[arg(long = "no-trim", overrides_with = "trim")]
    no_trim: bool,
    /// Wrap this many columns from neighbouring curves around each curve.
    #[arg(long)]
    periodic: Option<usize>,
}

#[derive(Args)]
struct RatesArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["table1"])]
    preset: Option<String>,
    /// Multiply the replicate count.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CltArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["desk"])]
    preset: Option<String>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Bandwidth of the covariance fit.
    #[arg(long, default_value_t = 0.3)]
    h: f64,
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// Fixed bandwidth for the mean; cross-validated when absent.
    #[arg(long)]
    mean_h: Option<f64>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::OrderExceeded { .. }
            | Error::DimensionMismatch { .. }
            | Error::InvalidGrid(_)
            | Error::InvalidDensity(_)
            | Error::InvalidConfig(_) => EXIT_CONFIG,
            Error::InvalidData(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => EXIT_IO,
            Error::SingularDesign { .. }
            | Error::NoValidBandwidth
            | Error::Factorization { .. }
            | Error::UndefinedExponent(_) => EXIT_NUMERICAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

#[derive(Serialize)]
struct RunManifest {
    subcommand: &'static str,
    version: &'static str,
    seed: Option<u64>,
    workers: usize,
    config: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_clock_seconds: f64,
    #[serde(skip_serializing_if = "Value::is_null")]
    extra: Value,
}

struct Run {
    subcommand: &'static str,
    out: PathBuf,
    started: Instant,
    workers: usize,
    outputs: Vec<String>,
}

impl Run {
    fn new(subcommand: &'static str, out: &Path, workers: usize) -> Outcome<Self> {
        fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
        Ok(Run {
            subcommand,
            out: out.to_path_buf(),
            started: Instant::now(),
            workers,
            outputs: Vec::new(),
        })
    }

    fn write<F>(&mut self, name: &str, f: F) -> Outcome<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> fda_deriv::Result<()>,
    {
        let path = self.out.join(name);
        let file = File::create(&path).map_err(|e| Failure::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).map_err(|e| match e {
            Error::Io(io) => Failure::io(&path, io),
            other => Failure::from(other),
        })?;
        w.flush().map_err(|e| Failure::io(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Outcome<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn finish(
        mut self,
        seed: Option<u64>,
        config: Value,
        inputs: &[&Path],
        extra: Value,
    ) -> Outcome<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            workers: self.workers,
            config,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.outputs.clone(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            extra,
        };
        self.outputs.push("manifest.json".into());
        self.write_json("manifest.json", &manifest)
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn read_dataset(path: &Path) -> Outcome<FunctionalDataset> {
    let file = File::open(path).map_err(|e| Failure::io(path, e))?;
    FunctionalDataset::read_csv(BufReader::new(file)).map_err(|e| {
        let f = Failure::from(e);
        Failure {
            code: f.code,
            message: format!("{}: {}", path.display(), f.message),
        }
    })
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Outcome<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Failure::config(format!("cannot parse {what} entry '{t}'")))
        })
        .collect()
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn cmd_simulate(a: &SimulateArgs, workers: usize) -> Outcome<()> {
    let mut cfg: SimConfig = read_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let data = harness::simulate_dataset(&cfg, a.replicate)?;
    let mut run = Run::new("simulate", &a.out, workers)?;
    run.write("data.csv", |w| data.write_csv(w))?;
    run.finish(
        Some(cfg.seed),
        to_value(&cfg),
        &[&a.config],
        json!({ "replicate": a.replicate }),
    )
}

fn cmd_estimate(a: &EstimateArgs, workers: usize) -> Outcome<()> {
    let mut data = read_dataset(&a.data)?;
    if let Some(pad) = a.periodic {
        data = data.periodic_pad(pad)?;
    }
    let d = data.grid().dim();
    let s = MultiIndex::new(parse_list(&a.s, "s")?);
    if s.dim() != d {
        return Err(Failure::config(format!(
            "--s has {} entries but the data have dimension {d}",
            s.dim()
        )));
    }
    let kernel = epanechnikov_product_kernel(d);
    let (h, cv) = if a.cv {
        let grid = match &a.h_grid {
            Some(g) => parse_list(g, "h-grid")?,
            None => covdiag::mean_bandwidth_grid(data.grid(), a.m),
        };
        let cv = cv_bandwidth(&data, a.m, &grid, &kernel)?;
        (cv.selected_h, Some(cv))
    } else {
        (a.h.expect("clap enforces --h or --cv"), None)
    };
    let trim = a.trim && !a.no_trim;
    let eval = if trim {
        EvalPoints::Trimmed
    } else {
        EvalPoints::Full
    };
    let est = estimate_derivative(&data, &s, a.m, h, &eval, &kernel)?;
    let mut run = Run::new("estimate", &a.out, workers)?;
    run.write("estimate.csv", |w| est.write_csv(w))?;
    let flagged = est.flagged.iter().filter(|&&f| f).count();
    run.finish(
        None,
        json!({
            "s": s, "m": a.m, "h": h, "cv": a.cv, "trim": trim,
            "periodic": a.periodic, "kernel": est.kernel,
        }),
        &[&a.data],
        json!({ "cv_scores": cv, "flagged_points": flagged, "columns": data.grid().total() }),
    )?;
    if est.all_flagged() {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("every evaluation point is degenerate at h = {h}"),
        });
    }
    if flagged > 0 {
        eprintln!("warning: {flagged} evaluation points flagged as degenerate");
    }
    Ok(())
}

fn scale_arg(scale: Option<f64>) -> Outcome<f64> {
    match scale {
        Some(f) if !(f > 0.0 && f.is_finite()) => {
            Err(Failure::config(format!("--scale = {f} must be positive")))
        }
        Some(f) => Ok(f),
        None => Ok(1.0),
    }
}

fn cmd_rates(a: &RatesArgs, workers: usize) -> Outcome<()> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => read_config::<RateConfig>(path)?,
        (None, _) => RateConfig::table1(),
    };
    cfg = cfg.scaled(scale_arg(a.scale)?)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let rows = harness::rate_table(&cfg)?;
    let mut run = Run::new("rates", &a.out, workers)?;
    run.write("rates.csv", |w| harness::write_rate_csv(&rows, w))?;
    run.write_json("summary.json", &json!({ "rows": rows }))?;
    let inputs: Vec<&Path> = a.config.iter().map(PathBuf::as_path).collect();
    run.finish(
        Some(cfg.seed),
        to_value(&cfg),
        &inputs,
        json!({ "preset": a.preset, "scale": a.scale }),
    )
}

fn cmd_sweep(a: &SweepArgs, workers: usize) -> Outcome<()> {
    let mut cfg: SimConfig = read_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let sweep = harness::bandwidth_sweep(&cfg)?;
    for h in &sweep.excluded {
        eprintln!("warning: bandwidth {h} excluded, every evaluation point degenerate");
    }
    let mut run = Run::new("sweep", &a.out, workers)?;
    run.write("sweep.csv", |w| sweep.write_csv(w))?;
    run.write_json(
        "summary.json",
        &json!({ "argmin_h": sweep.argmin_h, "excluded": sweep.excluded, "rows": sweep.rows }),
    )?;
    run.finish(Some(cfg.seed), to_value(&cfg), &[&a.config], Value::Null)
}

fn cmd_clt(a: &CltArgs, workers: usize) -> Outcome<()> {
    let mut cfg = match &a.config {
        Some(path) => read_config::<CltConfig>(path)?,
        None => CltConfig::desk(),
    };
    let scale = scale_arg(a.scale)?;
    cfg.replicates = ((cfg.replicates as f64 * scale).round() as usize).max(1);
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let res = harness::clt_experiment(&cfg)?;
    let mut run = Run::new("clt", &a.out, workers)?;
    run.write("samples.csv", |w| {
        writeln!(w, "replicate,statistic")?;
        for (i, v) in res.samples.iter().enumerate() {
            writeln!(w, "{i},{v:?}")?;
        }
        Ok(())
    })?;
    run.write_json(
        "summary.json",
        &json!({
            "raw_mean": res.raw_mean, "raw_variance": res.raw_variance,
            "scaled_bias": res.scaled_bias, "centred_mean": res.centred_mean,
            "centred_variance": res.centred_variance,
            "target_variance": res.target_variance, "ks_statistic": res.ks_statistic,
        }),
    )?;
    let inputs: Vec<&Path> = a.config.iter().map(PathBuf::as_path).collect();
    run.finish(
        Some(cfg.seed),
        to_value(&cfg),
        &inputs,
        json!({ "preset": a.preset }),
    )
}

fn cmd_diagnose(a: &DiagnoseArgs, workers: usize) -> Outcome<()> {
    let data = read_dataset(&a.data)?;
    let opts = DiagnosticOptions {
        h: a.h,
        m: a.m,
        centering: match a.mean_h {
            Some(h) => MeanCentering::Bandwidth(h),
            None => MeanCentering::CrossValidated,
        },
    };
    let res = covdiag::smoothness_report_with(&data, &opts)?;
    let mut run = Run::new("diagnose", &a.out, workers)?;
    run.write("diagonal.csv", |w| res.report.write_csv(w))?;
    run.write("summary.json", |w| {
        w.write_all(res.report.summary_json()?.as_bytes())?;
        writeln!(w)?;
        Ok(())
    })?;
    run.finish(
        None,
        to_value(&opts),
        &[&a.data],
        json!({ "mean_h": res.mean_h }),
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(EXIT_CONFIG);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
    {
        eprintln!("error: cannot start worker pool: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, workers),
        Command::Estimate(a) => cmd_estimate(a, workers),
        Command::Rates(a) => cmd_rates(a, workers),
        Command::Sweep(a) => cmd_sweep(a, workers),
        Command::Clt(a) => cmd_clt(a, workers),
        Command::Diagnose(a) => cmd_diagnose(a, workers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
