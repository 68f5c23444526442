//! Path-smoothness diagnostic from one-sided derivatives of the covariance
//! kernel on the diagonal.
//!
//! On the upper triangle `T_u = {(x, y): x <= y}` the restricted partials
//! `∂^{(0,1)}_u Γ(x, x)` and `∂^{(1,0)}_u Γ(x, x)` coincide when `Γ` is
//! differentiable on the diagonal. For Brownian motion (`Γ = min`) they are
//! `0` and `1`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::basis::{enumerate_basis, MultiIndex};
use crate::design::format_float;
use crate::error::{Error, Result};
use crate::estimator::{
    cv_bandwidth, estimate_derivative, DerivativeEstimate, EvalPoints, FunctionalDataset,
};
use crate::weights::{epanechnikov_product_kernel, scattered_weights, WeightOptions};

/// Centred cross-products `C_{jk} = n^{-1} Σ_i (Y_ij - μ̂(x_j))(Y_ik - μ̂(x_k))`.
#[derive(Debug, Clone)]
pub struct CovObservations {
    pub grid: Vec<f64>,
    pub n: usize,
    /// Full symmetric `p × p` matrix, row-major.
    products: Vec<f64>,
}

impl CovObservations {
    /// Builds observations from an explicit symmetric surface (used for
    /// noiseless checks).
    pub fn from_surface<F: Fn(f64, f64) -> f64>(grid: Vec<f64>, n: usize, f: F) -> Self {
        let p = grid.len();
        let mut products = vec![0.0; p * p];
        for j in 0..p {
            for k in 0..p {
                products[j * p + k] = f(grid[j], grid[k]);
            }
        }
        CovObservations { grid, n, products }
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.products[j * self.grid.len() + k]
    }

    /// Upper-triangle pairs `(j, k)` with `x_j <= x_k`, `j != k`.
    pub fn upper_pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let p = self.grid.len();
        (0..p).flat_map(move |j| (j + 1..p).map(move |k| (j, k, self.get(j, k))))
    }
}

pub fn cov_raw(data: &FunctionalDataset, mean_est: &DerivativeEstimate) -> Result<CovObservations> {
    if data.grid().dim() != 1 {
        return Err(Error::InvalidData(
            "covariance diagnostic needs d = 1".into(),
        ));
    }
    let n = data.n();
    if n < 2 {
        return Err(Error::InvalidData(format!(
            "covariance estimation needs at least 2 curves, got {n}"
        )));
    }
    if mean_est.s.order() != 0 {
        return Err(Error::InvalidConfig("mean estimate must have s = 0".into()));
    }
    let grid = data.grid().axis(0).to_vec();
    let p = grid.len();
    if mean_est.points.len() != p
        || mean_est
            .points
            .iter()
            .zip(&grid)
            .any(|(pt, &x)| (pt[0] - x).abs() > 1e-12)
    {
        return Err(Error::InvalidData(
            "mean estimate must be evaluated at every design point".into(),
        ));
    }
    if let Some(j) = mean_est.flagged.iter().position(|&f| f) {
        return Err(Error::InvalidData(format!(
            "mean estimate is degenerate at x = {}",
            grid[j]
        )));
    }
    let mu = &mean_est.values;
    let centred: Vec<Vec<f64>> = data
        .rows()
        .map(|r| r.iter().zip(mu).map(|(y, m)| y - m).collect())
        .collect();
    let nf = n as f64;
    let mut products = vec![0.0; p * p];
    for j in 0..p {
        for k in j..p {
            let v = centred.iter().map(|c| c[j] * c[k]).sum::<f64>() / nf;
            products[j * p + k] = v;
            products[k * p + j] = v;
        }
    }
    Ok(CovObservations { grid, n, products })
}

/// Restricted first-order partials on the diagonal.
#[derive(Debug, Clone, Serialize)]
pub struct DiagonalPartials {
    pub x: Vec<f64>,
    /// `∂^{(0,1)} Γ(x, x)` restricted to the chosen triangle.
    pub g01: Vec<f64>,
    /// `∂^{(1,0)} Γ(x, x)` restricted to the chosen triangle.
    pub g10: Vec<f64>,
    pub flagged: Vec<bool>,
    /// Plug-in standard deviation of `g01 - g10` from the local residual scale.
    pub noise_sd: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Triangle {
    Upper,
    Lower,
}

fn estimate_partials(
    obs: &CovObservations,
    h: f64,
    m: usize,
    tri: Triangle,
) -> Result<DiagonalPartials> {
    if m < 1 {
        return Err(Error::InvalidConfig(
            "covariance fit needs order m >= 1".into(),
        ));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    let kernel = epanechnikov_product_kernel(2);
    let layout = enumerate_basis(2, m);
    let targets: Vec<MultiIndex> = layout.indices().to_vec();
    let pos10 = layout.position(&MultiIndex::new(vec![1, 0])).unwrap();
    let pos01 = layout.position(&MultiIndex::new(vec![0, 1])).unwrap();
    let grid = &obs.grid;
    let p = grid.len();
    let diag: Vec<usize> = (0..p)
        .filter(|&j| grid[j] >= h - 1e-12 && grid[j] <= 1.0 - h + 1e-12)
        .collect();

    let fits: Vec<(f64, f64, f64, bool)> = diag
        .par_iter()
        .map(|&c| {
            let x = grid[c];
            let lo = grid.partition_point(|&t| t < x - h);
            let hi = grid.partition_point(|&t| t <= x + h);
            let mut offsets = Vec::new();
            let mut values = Vec::new();
            for j in lo..hi {
                for k in j + 1..hi {
                    let (a, b) = match tri {
                        Triangle::Upper => (j, k),
                        Triangle::Lower => (k, j),
                    };
                    offsets.push(vec![grid[a] - x, grid[b] - x]);
                    values.push(obs.get(a, b));
                }
            }
            let opts = WeightOptions::default();
            let at = [x, x];
            match scattered_weights(&offsets, h, m, &kernel, &targets, &opts, &at) {
                Ok(w) => {
                    let dot = |v: &[f64]| v.iter().zip(&values).map(|(a, b)| a * b).sum::<f64>();
                    let coefs: Vec<f64> = w.iter().map(|wi| dot(wi)).collect();
                    // kernel-weighted residual scale of the local fit
                    let (mut rss, mut ksum) = (0.0, 0.0);
                    for (off, y) in offsets.iter().zip(&values) {
                        let u = [off[0] / h, off[1] / h];
                        let kv = kernel.eval(&u);
                        if kv == 0.0 {
                            continue;
                        }
                        let fitted: f64 = layout
                            .indices()
                            .iter()
                            .zip(&coefs)
                            .map(|(s, c)| c * s.power(off) / s.factorial())
                            .sum();
                        rss += kv * (y - fitted).powi(2);
                        ksum += kv;
                    }
                    let tau = if ksum > 0.0 { (rss / ksum).sqrt() } else { 0.0 };
                    let diff_norm = w[pos01]
                        .iter()
                        .zip(&w[pos10])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    (coefs[pos01], coefs[pos10], tau * diff_norm, false)
                }
                Err(Error::SingularDesign { .. }) => (f64::NAN, f64::NAN, f64::NAN, true),
                Err(e) => panic!("unexpected local fit failure: {e}"),
            }
        })
        .collect();

    Ok(DiagonalPartials {
        x: diag.iter().map(|&c| grid[c]).collect(),
        g01: fits.iter().map(|f| f.0).collect(),
        g10: fits.iter().map(|f| f.1).collect(),
        noise_sd: fits.iter().map(|f| f.2).collect(),
        flagged: fits.iter().map(|f| f.3).collect(),
    })
}

/// Local polynomial fit of order `m` on the upper triangle around each
/// diagonal point in `[h, 1 - h]`; diagonal cells are excluded.
pub fn estimate_cov_partials_upper(
    obs: &CovObservations,
    h: f64,
    m: usize,
) -> Result<DiagonalPartials> {
    estimate_partials(obs, h, m, Triangle::Upper)
}

/// Same fit on the lower triangle `x >= y`.
pub fn estimate_cov_partials_lower(
    obs: &CovObservations,
    h: f64,
    m: usize,
) -> Result<DiagonalPartials> {
    estimate_partials(obs, h, m, Triangle::Lower)
}

/// Comparison of the two restricted partials along the diagonal.
#[derive(Debug, Clone, Serialize)]
pub struct DiagonalReport {
    pub partials: DiagonalPartials,
    /// `max_x |g01 - g10|`.
    pub discrepancy: f64,
    /// `max_x max(|g01|, |g10|)`.
    pub scale: f64,
    pub ratio: f64,
    /// Four times the largest plug-in noise level of `g01 - g10`.
    pub noise_floor: f64,
    /// Set when the scale does not exceed the noise floor, so the ratio
    /// carries no information.
    pub indeterminate: bool,
    pub flagged_points: usize,
}

#[derive(Serialize)]
struct Summary {
    #[serde(rename = "D")]
    d: f64,
    #[serde(rename = "S")]
    s: f64,
    ratio: f64,
    noise_floor: f64,
    indeterminate: bool,
    flagged_points: usize,
}

impl DiagonalReport {
    pub fn from_partials(partials: DiagonalPartials) -> Self {
        let mut d = 0.0_f64;
        let mut s = 0.0_f64;
        let mut floor = 0.0_f64;
        for i in 0..partials.x.len() {
            if partials.flagged[i] {
                continue;
            }
            let (a, b) = (partials.g01[i], partials.g10[i]);
            d = d.max((a - b).abs());
            s = s.max(a.abs().max(b.abs()));
            floor = floor.max(4.0 * partials.noise_sd[i]);
        }
        let flagged_points = partials.flagged.iter().filter(|&&f| f).count();
        let usable = flagged_points < partials.x.len();
        DiagonalReport {
            discrepancy: d,
            scale: s,
            ratio: if s > 0.0 { d / s } else { f64::NAN },
            noise_floor: floor,
            indeterminate: !usable || !(s > floor),
            flagged_points,
            partials,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["x", "g01", "g10", "abs_diff"])?;
        let p = &self.partials;
        for i in 0..p.x.len() {
            wtr.write_record([
                format_float(p.x[i]),
                format_float(p.g01[i]),
                format_float(p.g10[i]),
                format_float((p.g01[i] - p.g10[i]).abs()),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Summary {
            d: self.discrepancy,
            s: self.scale,
            ratio: self.ratio,
            noise_floor: self.noise_floor,
            indeterminate: self.indeterminate,
            flagged_points: self.flagged_points,
        })?)
    }
}

/// How the curves are centred before forming cross-products.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanCentering {
    /// Local polynomial mean with the bandwidth chosen by leave-one-curve-out
    /// cross-validation over [`mean_bandwidth_grid`].
    CrossValidated,
    /// Local polynomial mean with a fixed bandwidth.
    Bandwidth(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticOptions {
    /// Bandwidth of the covariance fit.
    pub h: f64,
    /// Order of both the mean and the covariance fit.
    pub m: usize,
    pub centering: MeanCentering,
}

impl Default for DiagnosticOptions {
    fn default() -> Self {
        DiagnosticOptions {
            h: 0.3,
            m: 4,
            centering: MeanCentering::CrossValidated,
        }
    }
}

/// Candidate mean bandwidths `k · w / p` for `k = m + 1, ..., 8(m + 1)`, with
/// `w` the domain width.
pub fn mean_bandwidth_grid(grid: &crate::design::DesignGrid, m: usize) -> Vec<f64> {
    let (lo, hi) = grid.domain()[0];
    let step = (hi - lo) / grid.total() as f64;
    (m + 1..=8 * (m + 1))
        .map(|k| k as f64 * step)
        .filter(|&h| h <= 0.5 * (hi - lo))
        .collect()
}

/// Result of [`smoothness_report_with`] together with the mean bandwidth used.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticRun {
    pub report: DiagonalReport,
    pub mean_h: f64,
}

/// Full pipeline: local polynomial mean on all design points, centred
/// cross-products, restricted partials, report.
pub fn smoothness_report_with(
    data: &FunctionalDataset,
    opts: &DiagnosticOptions,
) -> Result<DiagnosticRun> {
    if data.n() < 2 {
        return Err(Error::InvalidData(format!(
            "covariance estimation needs at least 2 curves, got {}",
            data.n()
        )));
    }
    if data.grid().dim() != 1 {
        return Err(Error::InvalidData(
            "covariance diagnostic needs d = 1".into(),
        ));
    }
    let kernel = epanechnikov_product_kernel(1);
    let mean_h = match opts.centering {
        MeanCentering::Bandwidth(h) => h,
        MeanCentering::CrossValidated => {
            cv_bandwidth(
                data,
                opts.m,
                &mean_bandwidth_grid(data.grid(), opts.m),
                &kernel,
            )?
            .selected_h
        }
    };
    let mean = estimate_derivative(
        data,
        &MultiIndex::zero(1),
        opts.m,
        mean_h,
        &EvalPoints::Full,
        &kernel,
    )?;
    let obs = cov_raw(data, &mean)?;
    let report = DiagonalReport::from_partials(estimate_cov_partials_upper(&obs, opts.h, opts.m)?);
    Ok(DiagnosticRun { report, mean_h })
}

/// [`smoothness_report_with`] with a cross-validated mean.
pub fn smoothness_report(data: &FunctionalDataset, h: f64, m: usize) -> Result<DiagonalReport> {
    let opts = DiagnosticOptions {
        h,
        m,
        centering: MeanCentering::CrossValidated,
    };
    Ok(smoothness_report_with(data, &opts)?.report)
}
