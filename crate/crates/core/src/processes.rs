//! Sample-path simulators for rough and smooth centred Gaussian processes on
//! one-dimensional grids, and an empirical Hölder-exponent diagnostic.
//!
//! Gaussian paths are drawn exactly from the covariance kernel evaluated on
//! the grid: `Z = L ξ` with `L L^T = Γ` and `ξ` standard normal.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::format_float;
use crate::error::{Error, Result};
use crate::quad;

/// Which process the paths `Z_i` are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessSpec {
    BrownianMotion,
    FractionalBm {
        hurst: f64,
    },
    RiemannLiouville {
        beta: f64,
    },
    /// `(2/3) N_1 sin(πx) + (√8/3) N_2 cos(πx)`.
    SmoothSine,
    /// `levels`-fold cumulative integral of fractional Brownian motion.
    IteratedFbm {
        hurst: f64,
        levels: usize,
    },
}

impl ProcessSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match *self {
            ProcessSpec::FractionalBm { hurst } if !(hurst > 0.0 && hurst < 1.0) => {
                bad(format!("Hurst parameter {hurst} not in (0, 1)"))
            }
            ProcessSpec::RiemannLiouville { beta } if !(beta > 0.0 && beta.is_finite()) => {
                bad(format!("beta = {beta} must be positive"))
            }
            ProcessSpec::IteratedFbm { hurst, levels } => {
                if !(hurst > 0.0 && hurst < 1.0) {
                    bad(format!("Hurst parameter {hurst} not in (0, 1)"))
                } else if levels < 1 {
                    bad("iterated fBm needs levels >= 1".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// `Γ(s, t) = E[Z(s) Z(t)]` where available in closed form or by quadrature.
    pub fn covariance(&self, s: f64, t: f64) -> Option<f64> {
        match *self {
            ProcessSpec::BrownianMotion => Some(s.min(t)),
            ProcessSpec::FractionalBm { hurst } => Some(fbm_covariance(hurst, s, t)),
            ProcessSpec::RiemannLiouville { beta } => Some(rl_covariance(beta, s, t)),
            ProcessSpec::SmoothSine => Some(
                4.0 / 9.0 * (PI * s).sin() * (PI * t).sin()
                    + 8.0 / 9.0 * (PI * s).cos() * (PI * t).cos(),
            ),
            ProcessSpec::IteratedFbm { .. } => None,
        }
    }

    /// `∂^{(1,1)} Γ(x, x) = Var(Z'(x))` for differentiable processes.
    pub fn derivative_variance(&self, x: f64) -> Option<f64> {
        match self {
            ProcessSpec::SmoothSine => Some(
                PI * PI * (4.0 / 9.0 * (PI * x).cos().powi(2) + 8.0 / 9.0 * (PI * x).sin().powi(2)),
            ),
            _ => None,
        }
    }
}

pub fn fbm_covariance(hurst: f64, s: f64, t: f64) -> f64 {
    let e = 2.0 * hurst;
    0.5 * (s.abs().powf(e) + t.abs().powf(e) - (t - s).abs().powf(e))
}

/// `γ(s, t) = ∫_0^{min(s,t)} (s - u)^{β-1/2} (t - u)^{β-1/2} du`.
///
/// With `v = s - u` (for `s <= t`) and `v = w^{1/a}`, `a = β + 1/2`, the
/// endpoint singularity of `v^{β-1/2}` is absorbed into the measure:
/// `γ = a^{-1} ∫_0^{s^a} (t - s + w^{1/a})^{β-1/2} dw`.
pub fn rl_covariance(beta: f64, s: f64, t: f64) -> f64 {
    let (s, t) = if s <= t { (s, t) } else { (t, s) };
    if s <= 0.0 {
        return 0.0;
    }
    if s == t {
        return s.powf(2.0 * beta) / (2.0 * beta);
    }
    let a = beta + 0.5;
    let gap = t - s;
    let upper = s.powf(a);
    let g = |w: f64| (gap + w.powf(1.0 / a)).powf(beta - 0.5);
    // relative tolerance on the natural scale of the kernel
    let tol = 1e-10 * t.powf(2.0 * beta).max(1e-300);
    quad::integrate(g, 0.0, upper, tol) / a
}

/// Lower-triangular Cholesky factor (row-major, packed per row), with
/// escalating diagonal jitter on failure.
#[derive(Debug, Clone)]
struct CholeskyFactor {
    rows: Vec<Vec<f64>>,
}

impl CholeskyFactor {
    fn new(cov: &[Vec<f64>]) -> Result<Self> {
        let mean_diag = cov.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / cov.len() as f64;
        if let Some(rows) = try_cholesky(cov, 0.0) {
            return Ok(CholeskyFactor { rows });
        }
        let mut jitter = 1e-12;
        while jitter <= 1e-8 * (1.0 + 1e-9) {
            if let Some(rows) = try_cholesky(cov, jitter * mean_diag) {
                return Ok(CholeskyFactor { rows });
            }
            jitter *= 10.0;
        }
        Err(Error::Factorization { jitter: 1e-8 })
    }

    fn apply(&self, xi: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().zip(xi).map(|(a, b)| a * b).sum())
            .collect()
    }
}

fn try_cholesky(cov: &[Vec<f64>], jitter: f64) -> Option<Vec<Vec<f64>>> {
    let n = cov.len();
    let mut l: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = vec![0.0; i + 1];
        for j in 0..=i {
            if j == i {
                let dot: f64 = row[..i].iter().map(|a| a * a).sum();
                let v = cov[i][i] + jitter - dot;
                if !(v > 0.0) {
                    return None;
                }
                row[j] = v.sqrt();
            } else {
                let dot: f64 = row[..j].iter().zip(&l[j][..j]).map(|(a, b)| a * b).sum();
                row[j] = (cov[i][j] - dot) / l[j][j];
            }
        }
        l.push(row);
    }
    Some(l)
}

/// Reusable sampler for one process on one grid.
#[derive(Debug, Clone)]
pub struct PathSampler {
    spec: ProcessSpec,
    grid: Vec<f64>,
    kind: SamplerKind,
}

#[derive(Debug, Clone)]
enum SamplerKind {
    /// Closed-form Cholesky factor of `min(s, t)`: cumulative sums of
    /// independent `N(0, Δt)` increments.
    Brownian {
        sd: Vec<f64>,
    },
    Factor {
        /// grid positions with non-zero variance
        active: Vec<usize>,
        factor: CholeskyFactor,
    },
    Trig {
        sin: Vec<f64>,
        cos: Vec<f64>,
    },
    Iterated {
        inner: Box<PathSampler>,
        levels: usize,
    },
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid("empty path grid".into()));
    }
    if grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidGrid(
            "path grid must be finite and non-negative".into(),
        ));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidGrid(
            "path grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

impl PathSampler {
    pub fn new(spec: ProcessSpec, grid: &[f64]) -> Result<Self> {
        spec.validate()?;
        check_grid(grid)?;
        let kind = match spec {
            ProcessSpec::BrownianMotion => {
                let mut prev = 0.0;
                let sd = grid
                    .iter()
                    .map(|&t| {
                        let v = (t - prev).sqrt();
                        prev = t;
                        v
                    })
                    .collect();
                SamplerKind::Brownian { sd }
            }
            ProcessSpec::FractionalBm { .. } | ProcessSpec::RiemannLiouville { .. } => {
                let active: Vec<usize> = (0..grid.len())
                    .filter(|&i| spec.covariance(grid[i], grid[i]).unwrap() > 0.0)
                    .collect();
                let cov: Vec<Vec<f64>> = active
                    .iter()
                    .map(|&i| {
                        active
                            .iter()
                            .map(|&j| spec.covariance(grid[i], grid[j]).unwrap())
                            .collect()
                    })
                    .collect();
                let factor = if cov.is_empty() {
                    CholeskyFactor { rows: Vec::new() }
                } else {
                    CholeskyFactor::new(&cov)?
                };
                SamplerKind::Factor { active, factor }
            }
            ProcessSpec::SmoothSine => SamplerKind::Trig {
                sin: grid.iter().map(|&t| 2.0 / 3.0 * (PI * t).sin()).collect(),
                cos: grid
                    .iter()
                    .map(|&t| 8.0_f64.sqrt() / 3.0 * (PI * t).cos())
                    .collect(),
            },
            ProcessSpec::IteratedFbm { hurst, levels } => SamplerKind::Iterated {
                inner: Box::new(PathSampler::new(ProcessSpec::FractionalBm { hurst }, grid)?),
                levels,
            },
        };
        Ok(PathSampler {
            spec,
            grid: grid.to_vec(),
            kind,
        })
    }

    pub fn spec(&self) -> &ProcessSpec {
        &self.spec
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// One path on the grid.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.kind {
            SamplerKind::Brownian { sd } => {
                let mut acc = 0.0;
                sd.iter()
                    .map(|s| {
                        let z: f64 = rng.sample(StandardNormal);
                        acc += s * z;
                        acc
                    })
                    .collect()
            }
            SamplerKind::Factor { active, factor } => {
                let xi: Vec<f64> = (0..active.len())
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                let vals = factor.apply(&xi);
                let mut out = vec![0.0; self.grid.len()];
                for (&i, v) in active.iter().zip(vals) {
                    out[i] = v;
                }
                out
            }
            SamplerKind::Trig { sin, cos } => {
                let n1: f64 = rng.sample(StandardNormal);
                let n2: f64 = rng.sample(StandardNormal);
                sin.iter().zip(cos).map(|(s, c)| n1 * s + n2 * c).collect()
            }
            SamplerKind::Iterated { inner, levels } => {
                let mut path = inner.sample(rng);
                for _ in 0..*levels {
                    path = cumulative_trapezoid(&self.grid, &path);
                }
                path
            }
        }
    }

    /// `n^{-1} Σ_{i=1}^n Z_i` for `n` independent paths. For a centred
    /// Gaussian process this has kernel `Γ / n`, so one scaled draw is exact
    /// in distribution.
    pub fn sample_mean<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let scale = 1.0 / (n as f64).sqrt();
        let mut path = self.sample(rng);
        path.iter_mut().for_each(|v| *v *= scale);
        path
    }
}

/// `I(t_k) = ∫_0^{t_k} z`, trapezoidal, with `z(0) = 0`.
fn cumulative_trapezoid(grid: &[f64], z: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let (mut t_prev, mut z_prev) = (0.0, 0.0);
    grid.iter()
        .zip(z)
        .map(|(&t, &v)| {
            acc += 0.5 * (t - t_prev) * (v + z_prev);
            t_prev = t;
            z_prev = v;
            acc
        })
        .collect()
}

/// One simulated path with its provenance.
#[derive(Debug, Clone, Serialize)]
pub struct PathSample {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub spec: ProcessSpec,
    pub seed: u64,
}

impl PathSample {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "value"])?;
        for (t, v) in self.grid.iter().zip(&self.values) {
            wtr.write_record([format_float(*t), format_float(*v)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn sample_path(spec: ProcessSpec, grid: &[f64], seed: u64) -> Result<PathSample> {
    let sampler = PathSampler::new(spec, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PathSample {
        grid: grid.to_vec(),
        values: sampler.sample(&mut rng),
        spec,
        seed,
    })
}

pub fn sample_fbm(hurst: f64, grid: &[f64], seed: u64) -> Result<PathSample> {
    sample_path(ProcessSpec::FractionalBm { hurst }, grid, seed)
}

pub fn sample_rl_fbm(beta: f64, grid: &[f64], seed: u64) -> Result<PathSample> {
    sample_path(ProcessSpec::RiemannLiouville { beta }, grid, seed)
}

pub fn sample_smooth_sine(grid: &[f64], seed: u64) -> Result<PathSample> {
    sample_path(ProcessSpec::SmoothSine, grid, seed)
}

pub fn sample_iterated_fbm(
    hurst: f64,
    levels: usize,
    grid: &[f64],
    seed: u64,
) -> Result<PathSample> {
    sample_path(ProcessSpec::IteratedFbm { hurst, levels }, grid, seed)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HolderEstimate {
    pub exponent: f64,
    pub std_error: f64,
}

/// Log-log regression of root-mean-square increments on dyadic lags
/// `1, 2, 4, ... <= p/16` (in units of the mean grid spacing).
pub fn empirical_holder_exponent(path: &PathSample) -> Result<HolderEstimate> {
    let p = path.values.len();
    if p < 64 {
        return Err(Error::UndefinedExponent(format!(
            "need at least 64 points, got {p}"
        )));
    }
    let spacing = (path.grid[p - 1] - path.grid[0]) / (p - 1) as f64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut lag = 1;
    while lag <= p / 16 {
        let ms: f64 = path
            .values
            .windows(lag + 1)
            .map(|w| (w[lag] - w[0]).powi(2))
            .sum::<f64>()
            / (p - lag) as f64;
        if !(ms > 0.0) {
            return Err(Error::UndefinedExponent("path has zero increments".into()));
        }
        xs.push((lag as f64 * spacing).ln());
        ys.push(0.5 * ms.ln());
        lag *= 2;
    }
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
        .sum();
    let std_error = if k > 2.0 {
        (rss / (k - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(HolderEstimate {
        exponent: slope,
        std_error,
    })
}
