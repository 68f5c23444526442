//! Monte Carlo experiments for the mean-derivative estimator: data
//! generation, pointwise error decomposition into bias, noise and process
//! terms, bandwidth sweeps, rough-versus-smooth rate tables and a
//! central-limit check at a fixed point.
//!
//! Every replicate draws from its own ChaCha stream selected by
//! `(experiment tag, replicate index)`, and per-replicate results are
//! collected in index order before aggregation, so outputs do not depend on
//! the number of worker threads.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::MultiIndex;
use crate::design::{format_float, DesignGrid};
use crate::error::{Error, Result};
use crate::estimator::{EvalPoints, FunctionalDataset, LinearSmoother};
use crate::processes::{PathSampler, ProcessSpec};
use crate::weights::epanechnikov_product_kernel;

/// Deterministic mean function `μ`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanSpec {
    /// `μ(x) = sin(3π(2x − 1)) exp(−2(2x − 1)²)`.
    #[default]
    ModulatedSine,
    Zero,
    /// `μ(x) = Σ_k c_k x^k`.
    Polynomial {
        coefficients: Vec<f64>,
    },
}

impl MeanSpec {
    pub fn max_derivative(&self) -> usize {
        match self {
            MeanSpec::ModulatedSine => 2,
            _ => usize::MAX,
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.derivative(x, 0).expect("order 0 always available")
    }

    /// `μ^{(s)}(x)`.
    pub fn derivative(&self, x: f64, s: usize) -> Result<f64> {
        if s > self.max_derivative() {
            return Err(Error::InvalidConfig(format!(
                "derivative order s = {s} exceeds {} available for this mean function",
                self.max_derivative()
            )));
        }
        Ok(match self {
            MeanSpec::Zero => 0.0,
            MeanSpec::Polynomial { coefficients } => coefficients
                .iter()
                .enumerate()
                .skip(s)
                .map(|(k, c)| {
                    let falling: f64 = (k - s + 1..=k).map(|v| v as f64).product();
                    c * falling * x.powi((k - s) as i32)
                })
                .sum(),
            MeanSpec::ModulatedSine => {
                let t = 2.0 * x - 1.0;
                let a = 3.0 * PI;
                let (sn, cs) = (a * t).sin_cos();
                let e = (-2.0 * t * t).exp();
                match s {
                    0 => sn * e,
                    1 => 2.0 * (a * cs - 4.0 * t * sn) * e,
                    _ => 4.0 * ((16.0 * t * t - a * a - 4.0) * sn - 8.0 * a * t * cs) * e,
                }
            }
        })
    }
}

/// Distribution of the measurement errors, scaled to standard deviation `σ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Uniform on `[−√3 σ, √3 σ]`.
    Uniform,
}

fn default_s() -> usize {
    1
}
fn default_m() -> usize {
    3
}
fn default_replicates() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_c() -> f64 {
    1.0
}
fn default_h0() -> f64 {
    0.5
}

/// One simulation setting on the equidistant midpoint grid `x_j = (j − ½)/p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub mean: MeanSpec,
    /// `None` switches the random paths off.
    #[serde(default)]
    pub process: Option<ProcessSpec>,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub noise: NoiseKind,
    pub n: usize,
    pub p: usize,
    #[serde(default)]
    pub h_grid: Vec<f64>,
    #[serde(default = "default_s")]
    pub s: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate on `[h, 1 − h]` instead of the whole grid.
    #[serde(default = "default_true")]
    pub trim: bool,
    /// Bandwidths must lie in `(c/p, h0]`.
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_h0")]
    pub h0: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n < 1 {
            return bad("n must be at least 1".into());
        }
        if self.p < 2 {
            return bad(format!("p = {} is below the minimum of 2", self.p));
        }
        if self.replicates < 1 {
            return bad("replicates must be at least 1".into());
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return bad(format!(
                "noise_sd = {} must be finite and >= 0",
                self.noise_sd
            ));
        }
        if self.s > self.m {
            return bad(format!(
                "s = {} exceeds the polynomial order m = {}",
                self.s, self.m
            ));
        }
        if self.s > self.mean.max_derivative() {
            return bad(format!(
                "s = {} exceeds {} available for the mean function",
                self.s,
                self.mean.max_derivative()
            ));
        }
        if !(self.c > 0.0) || !(self.h0 > 0.0) {
            return bad(format!(
                "c = {} and h0 = {} must be positive",
                self.c, self.h0
            ));
        }
        if let Some(proc) = &self.process {
            proc.validate()?;
        }
        let lower = self.c / self.p as f64;
        for &h in &self.h_grid {
            check_bandwidth(h, lower, self.h0)?;
        }
        Ok(())
    }

    pub fn grid(&self) -> DesignGrid {
        DesignGrid::uniform(&[self.p]).expect("p >= 2 validated")
    }

    fn eval_points(&self) -> EvalPoints {
        if self.trim {
            EvalPoints::Trimmed
        } else {
            EvalPoints::Full
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_bandwidth(h: f64, lower: f64, upper: f64) -> Result<()> {
    if !(h > lower) {
        return Err(Error::InvalidConfig(format!(
            "bandwidth h = {h} is not above the lower bound c/p = {lower}"
        )));
    }
    if !(h <= upper) {
        return Err(Error::InvalidConfig(format!(
            "bandwidth h = {h} exceeds the upper bound h0 = {upper}"
        )));
    }
    Ok(())
}

/// RNG for replicate `rep` of experiment `tag`.
pub fn replicate_rng(seed: u64, tag: u32, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 32) | rep as u64);
    rng
}

const TAG_DATA: u32 = 0;
const TAG_MEANS: u32 = 1;
const TAG_RATES: u32 = 2;
const TAG_CLT: u32 = 3;

fn draw_noise<R: Rng>(kind: NoiseKind, sd: f64, rng: &mut R) -> f64 {
    match kind {
        NoiseKind::Gaussian => sd * rng.sample::<f64, _>(StandardNormal),
        NoiseKind::Uniform => sd * 3f64.sqrt() * (2.0 * rng.gen::<f64>() - 1.0),
    }
}

/// All components of one simulated data set.
#[derive(Debug, Clone)]
pub struct SimulatedParts {
    pub mu: Vec<f64>,
    pub z_bar: Vec<f64>,
    pub eps_bar: Vec<f64>,
    pub data: FunctionalDataset,
}

fn simulate_parts(cfg: &SimConfig, replicate: usize) -> Result<SimulatedParts> {
    cfg.validate()?;
    let grid = cfg.grid();
    let xs = grid.axis(0).to_vec();
    let (n, p) = (cfg.n, cfg.p);
    let mu: Vec<f64> = xs.iter().map(|&x| cfg.mean.value(x)).collect();
    let mut rng = replicate_rng(cfg.seed, TAG_DATA, replicate);
    let mut z = vec![0.0; n * p];
    if let Some(spec) = cfg.process {
        let sampler = PathSampler::new(spec, &xs)?;
        for i in 0..n {
            z[i * p..(i + 1) * p].copy_from_slice(&sampler.sample(&mut rng));
        }
    }
    let mut eps = vec![0.0; n * p];
    if cfg.noise_sd > 0.0 {
        eps.iter_mut()
            .for_each(|e| *e = draw_noise(cfg.noise, cfg.noise_sd, &mut rng));
    }
    let values: Vec<f64> = (0..n * p).map(|k| mu[k % p] + z[k] + eps[k]).collect();
    let col_mean = |v: &[f64]| -> Vec<f64> {
        (0..p)
            .map(|j| pairwise_sum(&(0..n).map(|i| v[i * p + j]).collect::<Vec<_>>()) / n as f64)
            .collect()
    };
    let z_bar = col_mean(&z);
    let eps_bar = col_mean(&eps);
    Ok(SimulatedParts {
        mu,
        z_bar,
        eps_bar,
        data: FunctionalDataset::new(grid, values, n)?,
    })
}

/// `Y_ij = μ(x_j) + Z_i(x_j) + ε_ij`, deterministic in `(cfg.seed, replicate)`.
pub fn simulate_dataset(cfg: &SimConfig, replicate: usize) -> Result<FunctionalDataset> {
    Ok(simulate_parts(cfg, replicate)?.data)
}

/// Column means `Z̄` and `ε̄` drawn directly from their joint distribution:
/// Gaussian paths have mean kernel `Γ/n`, Gaussian noise has mean
/// `N(0, σ²/n)`. Other noise laws are averaged explicitly.
pub fn draw_replicate_means(
    cfg: &SimConfig,
    sampler: Option<&PathSampler>,
    replicate: usize,
) -> (Vec<f64>, Vec<f64>) {
    draw_means_tagged(cfg, sampler, TAG_MEANS, replicate)
}

fn draw_means_tagged(
    cfg: &SimConfig,
    sampler: Option<&PathSampler>,
    tag: u32,
    replicate: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut rng = replicate_rng(cfg.seed, tag, replicate);
    let z_bar = match sampler {
        Some(s) => s.sample_mean(cfg.n, &mut rng),
        None => vec![0.0; cfg.p],
    };
    let eps_bar = if cfg.noise_sd == 0.0 {
        vec![0.0; cfg.p]
    } else {
        match cfg.noise {
            NoiseKind::Gaussian => {
                let sd = cfg.noise_sd / (cfg.n as f64).sqrt();
                (0..cfg.p)
                    .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            kind => (0..cfg.p)
                .map(|_| {
                    (0..cfg.n)
                        .map(|_| draw_noise(kind, cfg.noise_sd, &mut rng))
                        .sum::<f64>()
                        / cfg.n as f64
                })
                .collect(),
        }
    };
    (z_bar, eps_bar)
}

/// Sum with pairwise splitting; bounded rounding drift for long vectors.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1.0)).sqrt())
}

/// Pointwise `μ̂^{(s)} − μ^{(s)} = I₁ + I₂ + I₃` on the evaluation points of
/// one replicate, with sup-norms.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorDecomposition {
    pub replicate: usize,
    pub h: f64,
    /// Smallest and largest evaluation point.
    pub interval: (f64, f64),
    pub points: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise: Vec<f64>,
    pub process: Vec<f64>,
    /// Recomputed directly from the row means of the data.
    pub total: Vec<f64>,
    pub bias_sup: f64,
    pub noise_sup: f64,
    pub process_sup: f64,
    pub total_sup: f64,
    /// `max |total − (I₁ + I₂ + I₃)|`.
    pub identity_residual: f64,
}

fn sup(v: &[f64]) -> f64 {
    v.iter()
        .filter(|x| !x.is_nan())
        .fold(0.0, |a, x| a.max(x.abs()))
}

fn build_smoother(cfg: &SimConfig, h: f64) -> Result<LinearSmoother> {
    let grid = cfg.grid();
    let points = cfg.eval_points().resolve(&grid, h);
    if points.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no evaluation points remain in [h, 1 - h] for h = {h}"
        )));
    }
    let kernel = epanechnikov_product_kernel(1);
    let sm = LinearSmoother::build(
        &grid,
        points,
        h,
        &MultiIndex::new(vec![cfg.s]),
        cfg.m,
        &kernel,
    )?;
    if !sm.is_empty() && sm.flagged().iter().all(|&f| f) {
        return Err(Error::SingularDesign {
            x: sm.points[0].clone(),
            h,
            eigenvalue: 0.0,
            floor: crate::weights::WeightOptions::default().eigen_floor,
        });
    }
    Ok(sm)
}

fn target_derivative(cfg: &SimConfig, sm: &LinearSmoother) -> Vec<f64> {
    sm.points
        .iter()
        .map(|x| cfg.mean.derivative(x[0], cfg.s).expect("validated order"))
        .collect()
}

pub fn error_decomposition(
    cfg: &SimConfig,
    replicate: usize,
    h: f64,
) -> Result<ErrorDecomposition> {
    cfg.validate()?;
    check_bandwidth(h, cfg.c / cfg.p as f64, cfg.h0)?;
    let sm = build_smoother(cfg, h)?;
    let parts = simulate_parts(cfg, replicate)?;
    let truth = target_derivative(cfg, &sm);
    let bias: Vec<f64> = sm
        .apply(&parts.mu)
        .iter()
        .zip(&truth)
        .map(|(a, b)| a - b)
        .collect();
    let noise = sm.apply(&parts.eps_bar);
    let process = sm.apply(&parts.z_bar);
    let ybar = crate::estimator::row_means(&parts.data);
    let total: Vec<f64> = sm
        .apply(&ybar)
        .iter()
        .zip(&truth)
        .map(|(a, b)| a - b)
        .collect();
    let identity_residual = (0..total.len())
        .filter(|&k| !total[k].is_nan())
        .map(|k| (total[k] - (bias[k] + noise[k] + process[k])).abs())
        .fold(0.0, f64::max);
    let points: Vec<f64> = sm.points.iter().map(|x| x[0]).collect();
    Ok(ErrorDecomposition {
        replicate,
        h,
        interval: (points[0], *points.last().unwrap()),
        bias_sup: sup(&bias),
        noise_sup: sup(&noise),
        process_sup: sup(&process),
        total_sup: sup(&total),
        points,
        bias,
        noise,
        process,
        total,
        identity_residual,
    })
}

/// Mean sup-norm errors at one bandwidth.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub h: f64,
    pub total: f64,
    pub bias: f64,
    pub noise: f64,
    pub process: f64,
    pub identity_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub n: usize,
    pub p: usize,
    pub rows: Vec<SweepRow>,
    pub argmin_h: f64,
    /// Bandwidths at which every evaluation point was degenerate.
    pub excluded: Vec<f64>,
}

impl SweepResult {
    /// Tidy rows `p,n,h,component,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["p", "n", "h", "component", "value"])?;
        for r in &self.rows {
            for (name, v) in [
                ("total", r.total),
                ("bias", r.bias),
                ("noise", r.noise),
                ("process", r.process),
            ] {
                wtr.write_record([
                    self.p.to_string(),
                    self.n.to_string(),
                    format_float(r.h),
                    name.to_string(),
                    format_float(v),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Mean over replicates of the sup-norm error and its components for every
/// bandwidth in `cfg.h_grid`. The same draws are reused across bandwidths.
pub fn bandwidth_sweep(cfg: &SimConfig) -> Result<SweepResult> {
    cfg.validate()?;
    if cfg.h_grid.is_empty() {
        return Err(Error::InvalidConfig("h_grid must not be empty".into()));
    }
    let mut hs = cfg.h_grid.clone();
    hs.sort_by(f64::total_cmp);
    hs.dedup();
    let mut smoothers = Vec::new();
    let mut excluded = Vec::new();
    for &h in &hs {
        match build_smoother(cfg, h) {
            Ok(sm) => smoothers.push(sm),
            Err(Error::SingularDesign { .. }) | Err(Error::InvalidConfig(_)) => excluded.push(h),
            Err(e) => return Err(e),
        }
    }
    if smoothers.is_empty() {
        return Err(Error::NoValidBandwidth);
    }
    let grid = cfg.grid();
    let mu: Vec<f64> = grid.axis(0).iter().map(|&x| cfg.mean.value(x)).collect();
    let truths: Vec<Vec<f64>> = smoothers
        .iter()
        .map(|sm| target_derivative(cfg, sm))
        .collect();
    let biases: Vec<Vec<f64>> = smoothers
        .iter()
        .zip(&truths)
        .map(|(sm, truth)| {
            sm.apply(&mu)
                .iter()
                .zip(truth)
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    let sampler = match cfg.process {
        Some(spec) => Some(PathSampler::new(spec, grid.axis(0))?),
        None => None,
    };
    // per replicate, per bandwidth: [total, noise, process, residual]
    let per_rep: Vec<Vec<[f64; 4]>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| {
            let (z_bar, eps_bar) = draw_replicate_means(cfg, sampler.as_ref(), rep);
            let ybar: Vec<f64> = (0..cfg.p).map(|j| mu[j] + z_bar[j] + eps_bar[j]).collect();
            smoothers
                .iter()
                .zip(&biases)
                .zip(&truths)
                .map(|((sm, bias), truth)| {
                    let noise = sm.apply(&eps_bar);
                    let process = sm.apply(&z_bar);
                    let total: Vec<f64> = sm
                        .apply(&ybar)
                        .iter()
                        .zip(truth)
                        .map(|(a, b)| a - b)
                        .collect();
                    let resid = (0..total.len())
                        .filter(|&k| !total[k].is_nan())
                        .map(|k| (total[k] - (bias[k] + noise[k] + process[k])).abs())
                        .fold(0.0, f64::max);
                    [sup(&total), sup(&noise), sup(&process), resid]
                })
                .collect()
        })
        .collect();
    let nrep = cfg.replicates as f64;
    let rows: Vec<SweepRow> = smoothers
        .iter()
        .enumerate()
        .map(|(k, sm)| {
            let col = |c: usize| per_rep.iter().map(|r| r[k][c]).collect::<Vec<_>>();
            SweepRow {
                h: sm.h,
                total: pairwise_sum(&col(0)) / nrep,
                bias: sup(&biases[k]),
                noise: pairwise_sum(&col(1)) / nrep,
                process: pairwise_sum(&col(2)) / nrep,
                identity_residual: col(3).into_iter().fold(0.0, f64::max),
            }
        })
        .collect();
    let best = rows.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
    let tol = best * 1e-9 + 1e-12;
    let argmin_h = rows.iter().find(|r| r.total <= best + tol).unwrap().h;
    Ok(SweepResult {
        n: cfg.n,
        p: cfg.p,
        rows,
        argmin_h,
        excluded,
    })
}

/// Rough paths are Brownian motion, smooth paths the two-term sine process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Rough,
    Smooth,
}

impl PathKind {
    pub fn process(self) -> ProcessSpec {
        match self {
            PathKind::Rough => ProcessSpec::BrownianMotion,
            PathKind::Smooth => ProcessSpec::SmoothSine,
        }
    }
}

fn default_kinds() -> Vec<PathKind> {
    vec![PathKind::Rough, PathKind::Smooth]
}

/// Settings of a rate experiment; one bandwidth per sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    #[serde(default = "default_kinds")]
    pub kinds: Vec<PathKind>,
    pub n_list: Vec<usize>,
    pub h_list: Vec<f64>,
    pub p: usize,
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_s")]
    pub s: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_true")]
    pub trim: bool,
}

impl RateConfig {
    /// Nine sample sizes from 10 to 1600 with their bandwidths, p = 800,
    /// N = 1000, local quadratic fit evaluated on the whole grid.
    pub fn table1() -> Self {
        RateConfig {
            kinds: default_kinds(),
            n_list: vec![10, 20, 40, 80, 160, 240, 480, 800, 1600],
            h_list: vec![0.34, 0.31, 0.28, 0.25, 0.22, 0.19, 0.16, 0.13, 0.1],
            p: 800,
            replicates: 1000,
            seed: 42,
            s: 1,
            m: 2,
            trim: false,
        }
    }

    /// Multiplies the replicate count by `factor` (at least one replicate).
    pub fn scaled(mut self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "scale = {factor} must be positive"
            )));
        }
        self.replicates = ((self.replicates as f64 * factor).round() as usize).max(1);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() {
            return Err(Error::InvalidConfig("n_list must not be empty".into()));
        }
        if self.n_list.len() != self.h_list.len() {
            return Err(Error::InvalidConfig(format!(
                "h_list has {} entries but n_list has {}",
                self.h_list.len(),
                self.n_list.len()
            )));
        }
        if self.kinds.is_empty() {
            return Err(Error::InvalidConfig("kinds must not be empty".into()));
        }
        for (k, &n) in self.n_list.iter().enumerate() {
            let cfg = self.sim_config(PathKind::Rough, k);
            if n < 1 {
                return Err(Error::InvalidConfig("every n must be at least 1".into()));
            }
            cfg.validate()?;
        }
        Ok(())
    }

    fn sim_config(&self, kind: PathKind, k: usize) -> SimConfig {
        SimConfig {
            mean: MeanSpec::Zero,
            process: Some(kind.process()),
            noise_sd: 0.0,
            noise: NoiseKind::Gaussian,
            n: self.n_list[k],
            p: self.p,
            h_grid: vec![self.h_list[k]],
            s: self.s,
            m: self.m,
            replicates: self.replicates,
            seed: self.seed,
            trim: self.trim,
            c: default_c(),
            h0: default_h0(),
        }
    }
}

/// Mean sup-norm of the process term `I₃` at one sample size.
#[derive(Debug, Clone, Serialize)]
pub struct RateRow {
    pub kind: PathKind,
    pub n: usize,
    pub h: f64,
    pub mean_sup: f64,
    pub sd_sup: f64,
    /// `√(n h) · mean_sup` for rough paths, `√n · mean_sup` for smooth ones.
    pub scaled: f64,
}

pub fn rate_table(cfg: &RateConfig) -> Result<Vec<RateRow>> {
    cfg.validate()?;
    let grid = DesignGrid::uniform(&[cfg.p])?;
    let mut rows = Vec::new();
    for &kind in &cfg.kinds {
        let sampler = PathSampler::new(kind.process(), grid.axis(0))?;
        for (k, (&n, &h)) in cfg.n_list.iter().zip(&cfg.h_list).enumerate() {
            let sim = cfg.sim_config(kind, k);
            let sm = build_smoother(&sim, h)?;
            let tag = TAG_RATES + ((kind as u32) << 8) + ((k as u32) << 12);
            let sups: Vec<f64> = (0..cfg.replicates)
                .into_par_iter()
                .map(|rep| {
                    let mut rng = replicate_rng(cfg.seed, tag, rep);
                    sm.sup_abs(&sampler.sample_mean(n, &mut rng))
                })
                .collect();
            let (mean_sup, sd_sup) = mean_sd(&sups);
            let factor = match kind {
                PathKind::Rough => (n as f64 * h).sqrt(),
                PathKind::Smooth => (n as f64).sqrt(),
            };
            rows.push(RateRow {
                kind,
                n,
                h,
                mean_sup,
                sd_sup,
                scaled: factor * mean_sup,
            });
        }
    }
    Ok(rows)
}

pub fn write_rate_csv<W: Write>(rows: &[RateRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["kind", "n", "h", "mean_sup", "sd_sup", "scaled"])?;
    for r in rows {
        let kind = match r.kind {
            PathKind::Rough => "rough",
            PathKind::Smooth => "smooth",
        };
        wtr.write_record([
            kind.to_string(),
            r.n.to_string(),
            format_float(r.h),
            format_float(r.mean_sup),
            format_float(r.sd_sup),
            format_float(r.scaled),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Bandwidth window
/// `[c₁ L^{δ/(d+2|s|)} max((L/P)^{1/(2|s|+d)}, 1/p_min), c₂ L^{−δ} n^{−1/(2(α−|s|))}]`
/// with `P` the total number of design points and `L = log P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthWindow {
    pub c1: f64,
    pub c2: f64,
    pub delta: f64,
    /// Smoothness of the mean function.
    pub alpha: f64,
}

impl BandwidthWindow {
    pub fn bounds(
        &self,
        n: usize,
        p_total: usize,
        p_min: usize,
        d: usize,
        s: usize,
    ) -> Result<(f64, f64)> {
        if !(self.delta > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "delta = {} must exceed 1",
                self.delta
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidConfig("c1 and c2 must be positive".into()));
        }
        if !(self.alpha > s as f64) {
            return Err(Error::InvalidConfig(format!(
                "alpha = {} must exceed the derivative order {s}",
                self.alpha
            )));
        }
        let big_p = p_total as f64;
        let l = big_p.ln();
        let (d, s) = (d as f64, s as f64);
        let lower = self.c1
            * l.powf(self.delta / (d + 2.0 * s))
            * (l / big_p)
                .powf(1.0 / (2.0 * s + d))
                .max(1.0 / p_min as f64);
        let upper =
            self.c2 * l.powf(-self.delta) * (n as f64).powf(-1.0 / (2.0 * (self.alpha - s)));
        Ok((lower, upper))
    }

    pub fn check(&self, h: f64, n: usize, p: usize, s: usize) -> Result<()> {
        let (lo, hi) = self.bounds(n, p, p, 1, s)?;
        if h < lo {
            return Err(Error::InvalidConfig(format!(
                "bandwidth h = {h} is below the window lower bound {lo}"
            )));
        }
        if h > hi {
            return Err(Error::InvalidConfig(format!(
                "bandwidth h = {h} is above the window upper bound {hi}"
            )));
        }
        Ok(())
    }
}

fn default_clt_process() -> Option<ProcessSpec> {
    Some(ProcessSpec::SmoothSine)
}

/// Settings of the central-limit experiment at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltConfig {
    #[serde(default)]
    pub mean: MeanSpec,
    #[serde(default = "default_clt_process")]
    pub process: Option<ProcessSpec>,
    pub noise_sd: f64,
    pub n: usize,
    pub p: usize,
    pub replicates: usize,
    pub h: f64,
    pub x0: f64,
    #[serde(default = "default_s")]
    pub s: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub window: Option<BandwidthWindow>,
}

impl CltConfig {
    /// Smooth-sine paths, `σ = 0.1`, `n = p = 400`, `N = 500`, first
    /// derivative at `x₀ = 0.5`, local cubic fit with `h = 0.15`.
    pub fn desk() -> Self {
        CltConfig {
            mean: MeanSpec::ModulatedSine,
            process: default_clt_process(),
            noise_sd: 0.1,
            n: 400,
            p: 400,
            replicates: 500,
            h: 0.15,
            x0: 0.5,
            s: 1,
            m: 3,
            seed: 42,
            window: None,
        }
    }
}

/// Moments of `T = √n (μ̂^{(s)}(x₀) − μ^{(s)}(x₀))` over replicates.
///
/// `centred` subtracts the deterministic bias `√n I₁(x₀)`, which is exact
/// for the simulated mean; the normality diagnostic uses the centred values.
#[derive(Debug, Clone, Serialize)]
pub struct CltResult {
    pub raw_mean: f64,
    pub raw_variance: f64,
    pub scaled_bias: f64,
    pub centred_mean: f64,
    pub centred_variance: f64,
    /// `∂^{(s,s)} Γ(x₀, x₀)` when known for the process.
    pub target_variance: Option<f64>,
    /// Kolmogorov–Smirnov distance of the centred values from
    /// `N(0, target_variance)`.
    pub ks_statistic: Option<f64>,
    pub samples: Vec<f64>,
}

pub fn clt_experiment(cfg: &CltConfig) -> Result<CltResult> {
    let sim = SimConfig {
        mean: cfg.mean.clone(),
        process: cfg.process,
        noise_sd: cfg.noise_sd,
        noise: NoiseKind::Gaussian,
        n: cfg.n,
        p: cfg.p,
        h_grid: vec![cfg.h],
        s: cfg.s,
        m: cfg.m,
        replicates: cfg.replicates,
        seed: cfg.seed,
        trim: false,
        c: default_c(),
        h0: default_h0(),
    };
    sim.validate()?;
    if !(cfg.x0 >= 0.0 && cfg.x0 <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "x0 = {} must lie in [0, 1]",
            cfg.x0
        )));
    }
    if let Some(w) = &cfg.window {
        w.check(cfg.h, cfg.n, cfg.p, cfg.s)?;
    }
    let target_variance = match cfg.process {
        None => Some(0.0),
        Some(spec) => {
            if cfg.s != 1 {
                None
            } else {
                spec.derivative_variance(cfg.x0)
            }
        }
    };
    if cfg.process.is_some() && target_variance.is_none() && cfg.s >= 1 {
        return Err(Error::InvalidConfig(
            "the central-limit check needs paths smoother than the derivative order".into(),
        ));
    }
    let grid = sim.grid();
    let kernel = epanechnikov_product_kernel(1);
    let sm = LinearSmoother::build(
        &grid,
        vec![vec![cfg.x0]],
        cfg.h,
        &MultiIndex::new(vec![cfg.s]),
        cfg.m,
        &kernel,
    )?;
    let ws = sm.weights[0].clone().ok_or_else(|| Error::SingularDesign {
        x: vec![cfg.x0],
        h: cfg.h,
        eigenvalue: 0.0,
        floor: crate::weights::WeightOptions::default().eigen_floor,
    })?;
    let mu: Vec<f64> = grid.axis(0).iter().map(|&x| cfg.mean.value(x)).collect();
    let truth = cfg.mean.derivative(cfg.x0, cfg.s)?;
    let root_n = (cfg.n as f64).sqrt();
    let scaled_bias = root_n * (ws.apply(&mu) - truth);
    let sampler = match cfg.process {
        Some(spec) => Some(PathSampler::new(spec, grid.axis(0))?),
        None => None,
    };
    let raw: Vec<f64> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| {
            let (z_bar, eps_bar) = draw_means_tagged(&sim, sampler.as_ref(), TAG_CLT, rep);
            let ybar: Vec<f64> = (0..cfg.p).map(|j| mu[j] + z_bar[j] + eps_bar[j]).collect();
            root_n * (ws.apply(&ybar) - truth)
        })
        .collect();
    let centred: Vec<f64> = raw.iter().map(|t| t - scaled_bias).collect();
    let (raw_mean, raw_sd) = mean_sd(&raw);
    let (centred_mean, centred_sd) = mean_sd(&centred);
    let ks_statistic = match target_variance {
        Some(v) if v > 0.0 => Some(ks_normal(&centred, v.sqrt())),
        _ => None,
    };
    Ok(CltResult {
        raw_mean,
        raw_variance: raw_sd * raw_sd,
        scaled_bias,
        centred_mean,
        centred_variance: centred_sd * centred_sd,
        target_variance,
        ks_statistic,
        samples: centred,
    })
}

/// One-sample Kolmogorov–Smirnov distance from `N(0, sd²)`.
pub fn ks_normal(xs: &[f64], sd: f64) -> f64 {
    let dist = Normal::new(0.0, sd).expect("positive sd");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = dist.cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> SimConfig {
        SimConfig {
            mean: MeanSpec::ModulatedSine,
            process: None,
            noise_sd: 0.0,
            noise: NoiseKind::Gaussian,
            n: 3,
            p: 40,
            h_grid: vec![0.2],
            s: 1,
            m: 3,
            replicates: 4,
            seed: 7,
            trim: true,
            c: 1.0,
            h0: 0.5,
        }
    }

    #[test]
    fn mean_derivatives_match_finite_differences() {
        let mu = MeanSpec::ModulatedSine;
        assert!((mu.derivative(0.5, 1).unwrap() - 6.0 * PI).abs() < 1e-12);
        assert_eq!(mu.value(0.5), 0.0);
        let e = 1e-5;
        for &x in &[0.1, 0.37, 0.5, 0.81] {
            for s in 1..=2 {
                let fd = (mu.derivative(x + e, s - 1).unwrap()
                    - mu.derivative(x - e, s - 1).unwrap())
                    / (2.0 * e);
                let an = mu.derivative(x, s).unwrap();
                assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "s={s} x={x}");
            }
        }
        assert!(mu.derivative(0.3, 3).is_err());
        let poly = MeanSpec::Polynomial {
            coefficients: vec![1.0, -2.0, 0.5, 3.0],
        };
        assert!((poly.derivative(2.0, 1).unwrap() - (-2.0 + 2.0 + 36.0)).abs() < 1e-12);
        assert!((poly.derivative(2.0, 3).unwrap() - 18.0).abs() < 1e-12);
        assert_eq!(poly.derivative(2.0, 4).unwrap(), 0.0);
    }

    #[test]
    fn noiseless_pathless_rows_equal_mean() {
        let cfg = SimConfig {
            n: 2,
            p: 5,
            h_grid: vec![],
            ..base()
        };
        let data = simulate_dataset(&cfg, 0).unwrap();
        let grid = cfg.grid();
        for r in data.rows() {
            for (y, x) in r.iter().zip(grid.axis(0)) {
                assert_eq!(*y, cfg.mean.value(*x));
            }
        }
    }

    #[test]
    fn simulation_is_deterministic_per_replicate() {
        let cfg = SimConfig {
            process: Some(ProcessSpec::BrownianMotion),
            noise_sd: 0.3,
            ..base()
        };
        let a = simulate_dataset(&cfg, 2).unwrap();
        let b = simulate_dataset(&cfg, 2).unwrap();
        let c = simulate_dataset(&cfg, 3).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn validation_names_bounds() {
        let cfg = SimConfig {
            h_grid: vec![0.01],
            ..base()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("c/p = 0.025"), "{msg}");
        let cfg = SimConfig {
            h_grid: vec![0.7],
            ..base()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("h0 = 0.5"), "{msg}");
        assert!(SimConfig {
            noise_sd: -1.0,
            ..base()
        }
        .validate()
        .is_err());
        assert!(SimConfig {
            replicates: 0,
            ..base()
        }
        .validate()
        .is_err());
        assert!(SimConfig { s: 4, ..base() }.validate().is_err());
        let err = SimConfig::from_json(r#"{"n": 2, "p": 5, "noise": "gaussian", "sigma": 1}"#)
            .unwrap_err();
        assert!(err.to_string().contains("sigma"), "{err}");
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = SimConfig {
            process: Some(ProcessSpec::FractionalBm { hurst: 0.3 }),
            ..base()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(SimConfig::from_json(&s).unwrap(), cfg);
        let min = SimConfig::from_json(r#"{"n": 2, "p": 5}"#).unwrap();
        assert_eq!(min.mean, MeanSpec::ModulatedSine);
        assert!(min.process.is_none());
    }

    #[test]
    fn decomposition_identity_and_special_cases() {
        let cfg = SimConfig {
            process: Some(ProcessSpec::BrownianMotion),
            noise_sd: 0.5,
            ..base()
        };
        let dec = error_decomposition(&cfg, 1, 0.2).unwrap();
        assert!(dec.identity_residual < 1e-10);
        assert!(dec.total_sup <= dec.bias_sup + dec.noise_sup + dec.process_sup + 1e-10);
        assert!(dec.interval.0 >= 0.2 - 1e-12 && dec.interval.1 <= 0.8 + 1e-12);

        let quiet = SimConfig {
            noise_sd: 0.0,
            ..cfg.clone()
        };
        let dec = error_decomposition(&quiet, 1, 0.2).unwrap();
        assert!(dec.noise.iter().all(|&v| v == 0.0));

        let poly = SimConfig {
            mean: MeanSpec::Polynomial {
                coefficients: vec![0.5, -1.0, 2.0, 1.5],
            },
            ..cfg
        };
        let dec = error_decomposition(&poly, 0, 0.2).unwrap();
        assert!(dec.bias_sup <= 1e-8, "{}", dec.bias_sup);
    }

    #[test]
    fn sweep_single_replicate_matches_direct_computation() {
        let cfg = SimConfig {
            process: Some(ProcessSpec::BrownianMotion),
            noise_sd: 0.5,
            replicates: 1,
            h_grid: vec![0.25],
            ..base()
        };
        let sweep = bandwidth_sweep(&cfg).unwrap();
        let sm = build_smoother(&cfg, 0.25).unwrap();
        let sampler = PathSampler::new(ProcessSpec::BrownianMotion, cfg.grid().axis(0)).unwrap();
        let (z, e) = draw_replicate_means(&cfg, Some(&sampler), 0);
        let mut worst: f64 = 0.0;
        for (k, x) in sm.points.iter().enumerate() {
            let w = sm.weights[k].as_ref().unwrap();
            let est: f64 = (0..cfg.p)
                .map(|j| w.weight(j) * (cfg.mean.value(cfg.grid().axis(0)[j]) + z[j] + e[j]))
                .sum();
            worst = worst.max((est - cfg.mean.derivative(x[0], 1).unwrap()).abs());
        }
        assert!((sweep.rows[0].total - worst).abs() < 1e-10);
        assert_eq!(sweep.argmin_h, 0.25);
    }

    #[test]
    fn sweep_ties_go_to_smaller_bandwidth() {
        let cfg = SimConfig {
            mean: MeanSpec::Polynomial {
                coefficients: vec![1.0, 2.0, -1.0],
            },
            h_grid: vec![0.3, 0.1, 0.2],
            ..base()
        };
        let sweep = bandwidth_sweep(&cfg).unwrap();
        assert!(sweep.rows.iter().all(|r| r.total < 1e-9));
        assert_eq!(sweep.argmin_h, 0.1);
        assert_eq!(
            sweep.rows.iter().map(|r| r.h).collect::<Vec<_>>(),
            vec![0.1, 0.2, 0.3]
        );
    }

    #[test]
    fn sweep_tidy_csv() {
        let cfg = SimConfig {
            h_grid: vec![0.2, 0.3],
            ..base()
        };
        let sweep = bandwidth_sweep(&cfg).unwrap();
        let mut buf = Vec::new();
        sweep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "p,n,h,component,value");
        assert_eq!(lines.len(), 1 + 2 * 4);
        assert!(lines[1].starts_with("40,3,0.2,total,"));
    }

    #[test]
    fn rate_config_checks_alignment_and_scaling() {
        let t = RateConfig::table1();
        assert_eq!(t.n_list.len(), 9);
        assert_eq!(t.clone().scaled(0.25).unwrap().replicates, 250);
        assert_eq!(t.clone().scaled(1e-6).unwrap().replicates, 1);
        let mut bad = t.clone();
        bad.h_list.pop();
        assert!(bad.validate().unwrap_err().to_string().contains("h_list"));
        t.validate().unwrap();
    }

    #[test]
    fn rate_rows_scale_as_defined() {
        let cfg = RateConfig {
            kinds: vec![PathKind::Rough, PathKind::Smooth],
            n_list: vec![10, 40],
            h_list: vec![0.3, 0.2],
            p: 100,
            replicates: 20,
            seed: 3,
            s: 1,
            m: 2,
            trim: false,
        };
        let rows = rate_table(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            let f = match r.kind {
                PathKind::Rough => (r.n as f64 * r.h).sqrt(),
                PathKind::Smooth => (r.n as f64).sqrt(),
            };
            assert!((r.scaled - f * r.mean_sup).abs() < 1e-12);
            assert!(r.mean_sup > 0.0 && r.sd_sup >= 0.0);
        }
    }

    #[test]
    fn window_bounds_follow_formula() {
        let w = BandwidthWindow {
            c1: 0.1,
            c2: 5.0,
            delta: 1.5,
            alpha: 4.0,
        };
        let (lo, hi) = w.bounds(400, 400, 400, 1, 1).unwrap();
        let l = 400f64.ln();
        let lo_ref = 0.1 * l.powf(0.5) * (l / 400.0).powf(1.0 / 3.0).max(1.0 / 400.0);
        let hi_ref = 5.0 * l.powf(-1.5) * 400f64.powf(-1.0 / 6.0);
        assert!((lo - lo_ref).abs() < 1e-14 && (hi - hi_ref).abs() < 1e-14);
        assert!(lo < hi);
        assert!(w
            .check(lo * 0.9, 400, 400, 1)
            .unwrap_err()
            .to_string()
            .contains("lower bound"));
        assert!(w
            .check(hi * 1.1, 400, 400, 1)
            .unwrap_err()
            .to_string()
            .contains("upper bound"));
        assert!(BandwidthWindow { delta: 1.0, ..w }
            .bounds(4, 4, 4, 1, 1)
            .is_err());
    }

    #[test]
    fn clt_degenerate_without_randomness() {
        let cfg = CltConfig {
            process: None,
            noise_sd: 0.0,
            replicates: 10,
            n: 5,
            p: 60,
            ..CltConfig::desk()
        };
        let r = clt_experiment(&cfg).unwrap();
        assert_eq!(r.centred_variance, 0.0);
        assert_eq!(r.centred_mean, 0.0);
        assert!(r.ks_statistic.is_none());
    }

    #[test]
    fn ks_against_exact_quantiles_is_small() {
        let dist = Normal::new(0.0, 2.0).unwrap();
        let xs: Vec<f64> = (0..1000)
            .map(|i| dist.inverse_cdf((i as f64 + 0.5) / 1000.0))
            .collect();
        assert!((ks_normal(&xs, 2.0) - 0.0005).abs() < 1e-9);
        assert!(ks_normal(&xs, 1.0) > 0.1);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 10.0, 100.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert!((log_log_slope(&x, &y) + 0.5).abs() < 1e-12);
    }
}
