//! Local polynomial weights `w_j^{(s)}(x; h)` of the linear derivative estimator.
//!
//! For a bandwidth `h` and evaluation point `x` the weights are
//!
//! ```text
//! w_j = (p^1 h^{d+|s|})^{-1} e_s^T B(x)^{-1} U_m((x_j - x)/h) K((x_j - x)/h)
//! B(x) = (p^1 h^d)^{-1} Σ_j U_m((x_j - x)/h) U_m((x_j - x)/h)^T K((x_j - x)/h)
//! ```
//!
//! where `e_s` selects the coefficient of `u^s / s!`. Applied to samples of a
//! polynomial of degree at most `m` they return its `s`-th partial derivative.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::{derivative_selector, enumerate_basis, BasisLayout, MultiIndex};
use crate::design::{format_float, DesignGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Epanechnikov,
}

/// Product kernel on `[-1, 1]^d` with `K_min 1[|u|_∞ <= Δ] <= K(u) <= K_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub d: usize,
    pub kind: KernelKind,
    pub delta: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub lipschitz: f64,
}

impl Kernel {
    pub fn eval(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.d);
        match self.kind {
            KernelKind::Epanechnikov => u
                .iter()
                .map(|&t| {
                    if t.abs() <= 1.0 {
                        0.75 * (1.0 - t * t)
                    } else {
                        0.0
                    }
                })
                .product(),
        }
    }

    pub fn id(&self) -> &'static str {
        match self.kind {
            KernelKind::Epanechnikov => "epanechnikov",
        }
    }
}

/// `K(u) = Π_r 0.75 (1 - u_r^2)_+`.
pub fn epanechnikov_product_kernel(d: usize) -> Kernel {
    assert!(d >= 1);
    let di = d as i32;
    Kernel {
        d,
        kind: KernelKind::Epanechnikov,
        delta: 0.5,
        k_min: 0.5625_f64.powi(di),
        k_max: 0.75_f64.powi(di),
        lipschitz: d as f64 * 1.5 * 0.75_f64.powi(di - 1),
    }
}

/// Normal-equations matrix `B_{p,h}(x)` of the local fit.
#[derive(Debug, Clone)]
pub struct MomentMatrix {
    pub matrix: DMatrix<f64>,
    pub min_eigenvalue: f64,
}

/// Guards and numerical thresholds for weight construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightOptions {
    /// Singularity floor relative to `trace(B) / N_{m,d}`.
    pub eigen_floor: f64,
    /// Return an eigenvalue-thresholded pseudo-solve flagged as degenerate
    /// instead of an error when `B` is (near) singular.
    pub allow_degenerate: bool,
}

impl Default for WeightOptions {
    fn default() -> Self {
        WeightOptions {
            eigen_floor: 1e-10,
            allow_degenerate: false,
        }
    }
}

/// Weights of the linear estimator for one evaluation point.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub x: Vec<f64>,
    pub h: f64,
    pub s: MultiIndex,
    pub m: usize,
    pub kernel: Kernel,
    /// `(flat grid index, weight)` in increasing index order.
    pub entries: Vec<(usize, f64)>,
    pub min_eigenvalue: f64,
    pub degenerate: bool,
}

impl WeightSet {
    /// `Σ_j w_j v_j`, summed in grid order.
    pub fn apply(&self, values: &[f64]) -> f64 {
        self.entries.iter().map(|&(j, w)| w * values[j]).sum()
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.entries
            .binary_search_by_key(&j, |e| e.0)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["index", "weight"])?;
        for &(j, v) in &self.entries {
            wtr.write_record([j.to_string(), format_float(v)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

struct LocalSolve {
    /// One weight vector per requested selector, aligned with the input points.
    weights: Vec<Vec<f64>>,
    min_eigenvalue: f64,
    degenerate: bool,
}

/// Solves the kernel-weighted normal equations for scattered offsets `(x_j - x)/h`
/// (already scaled) and returns `e^T B^{-1} U(u_j) K(u_j)` for each selector.
/// `B` is normalised by `norm`.
fn solve_local(
    layout: &BasisLayout,
    basis: &[Vec<f64>],
    kern: &[f64],
    norm: f64,
    selectors: &[Vec<f64>],
    opts: &WeightOptions,
    x: &[f64],
    h: f64,
) -> Result<LocalSolve> {
    let n_basis = layout.len();
    let mut b = DMatrix::<f64>::zeros(n_basis, n_basis);
    for (u, &k) in basis.iter().zip(kern) {
        if k == 0.0 {
            continue;
        }
        for a in 0..n_basis {
            let ua = u[a] * k;
            for c in a..n_basis {
                b[(a, c)] += ua * u[c];
            }
        }
    }
    for a in 0..n_basis {
        for c in a..n_basis {
            let v = b[(a, c)] / norm;
            b[(a, c)] = v;
            b[(c, a)] = v;
        }
    }

    let eig = SymmetricEigen::new(b.clone());
    let min_eig = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let floor = opts.eigen_floor * b.trace() / n_basis as f64;
    let singular = !(min_eig > floor) || !(floor > 0.0);
    if singular && !opts.allow_degenerate {
        return Err(Error::SingularDesign {
            x: x.to_vec(),
            h,
            eigenvalue: min_eig,
            floor,
        });
    }

    let chol = if singular { None } else { b.clone().cholesky() };
    let degenerate = chol.is_none();
    let solved: Vec<DVector<f64>> = selectors
        .iter()
        .map(|sel| {
            let e = DVector::from_column_slice(sel);
            match &chol {
                Some(c) => c.solve(&e),
                None => {
                    // pseudo-solve on the well-conditioned eigenspace
                    let mut v = DVector::zeros(n_basis);
                    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
                        if lambda > floor.max(0.0) && lambda > 0.0 {
                            let q = eig.eigenvectors.column(i);
                            v += q * (q.dot(&e) / lambda);
                        }
                    }
                    v
                }
            }
        })
        .collect();

    let weights = solved
        .iter()
        .map(|v| {
            basis
                .iter()
                .zip(kern)
                .map(|(u, &k)| {
                    if k == 0.0 {
                        0.0
                    } else {
                        k * u.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>()
                    }
                })
                .collect()
        })
        .collect();
    Ok(LocalSolve {
        weights,
        min_eigenvalue: min_eig,
        degenerate,
    })
}

struct Window {
    index: Vec<usize>,
    basis: Vec<Vec<f64>>,
    kern: Vec<f64>,
}

fn collect_window(
    grid: &DesignGrid,
    x: &[f64],
    h: f64,
    layout: &BasisLayout,
    kernel: &Kernel,
) -> Window {
    let mut win = Window {
        index: Vec::new(),
        basis: Vec::new(),
        kern: Vec::new(),
    };
    let mut u = vec![0.0; grid.dim()];
    grid.for_each_in_window(x, h, |j, pt| {
        for k in 0..u.len() {
            u[k] = (pt[k] - x[k]) / h;
        }
        let mut row = vec![0.0; layout.len()];
        layout.fill_basis(&u, &mut row);
        win.index.push(j);
        win.basis.push(row);
        win.kern.push(kernel.eval(&u));
    });
    win
}

fn check_inputs(grid: &DesignGrid, x: &[f64], h: f64, kernel: &Kernel) -> Result<()> {
    if x.len() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: x.len(),
        });
    }
    if kernel.d != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: kernel.d,
        });
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    Ok(())
}

pub fn moment_matrix(
    grid: &DesignGrid,
    x: &[f64],
    h: f64,
    layout: &BasisLayout,
    kernel: &Kernel,
) -> Result<MomentMatrix> {
    check_inputs(grid, x, h, kernel)?;
    if layout.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: layout.dim(),
        });
    }
    let win = collect_window(grid, x, h, layout, kernel);
    let n = layout.len();
    let norm = grid.total() as f64 * h.powi(grid.dim() as i32);
    let mut b = DMatrix::<f64>::zeros(n, n);
    for (u, &k) in win.basis.iter().zip(&win.kern) {
        for a in 0..n {
            for c in 0..n {
                b[(a, c)] += u[a] * u[c] * k;
            }
        }
    }
    b /= norm;
    let min_eigenvalue = SymmetricEigen::new(b.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok(MomentMatrix {
        matrix: b,
        min_eigenvalue,
    })
}

pub fn local_poly_weights(
    grid: &DesignGrid,
    x: &[f64],
    h: f64,
    s: &MultiIndex,
    m: usize,
    kernel: &Kernel,
) -> Result<WeightSet> {
    local_poly_weights_with(grid, x, h, s, m, kernel, &WeightOptions::default())
}

pub fn local_poly_weights_with(
    grid: &DesignGrid,
    x: &[f64],
    h: f64,
    s: &MultiIndex,
    m: usize,
    kernel: &Kernel,
    opts: &WeightOptions,
) -> Result<WeightSet> {
    check_inputs(grid, x, h, kernel)?;
    let layout = enumerate_basis(grid.dim(), m);
    let selector = derivative_selector(&layout, s)?;
    let win = collect_window(grid, x, h, &layout, kernel);
    let d = grid.dim() as i32;
    let norm = grid.total() as f64 * h.powi(d);
    let solve = solve_local(
        &layout,
        &win.basis,
        &win.kern,
        norm,
        &[selector],
        opts,
        x,
        h,
    )?;
    let scale = 1.0 / (norm * h.powi(s.order() as i32));
    let entries = win
        .index
        .iter()
        .zip(&solve.weights[0])
        .map(|(&j, &w)| (j, w * scale))
        .collect();
    Ok(WeightSet {
        x: x.to_vec(),
        h,
        s: s.clone(),
        m,
        kernel: *kernel,
        entries,
        min_eigenvalue: solve.min_eigenvalue,
        degenerate: solve.degenerate,
    })
}

/// Local polynomial derivative weights for scattered observation sites.
///
/// `offsets[i] = site_i - x`. Returns, for each multi-index in `targets`, the
/// weights `ω_i` such that `Σ_i ω_i y_i` estimates `∂^s f(x)`.
pub fn scattered_weights(
    offsets: &[Vec<f64>],
    h: f64,
    m: usize,
    kernel: &Kernel,
    targets: &[MultiIndex],
    opts: &WeightOptions,
    x: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let d = kernel.d;
    let layout = enumerate_basis(d, m);
    let selectors = targets
        .iter()
        .map(|s| derivative_selector(&layout, s))
        .collect::<Result<Vec<_>>>()?;
    let mut basis = Vec::with_capacity(offsets.len());
    let mut kern = Vec::with_capacity(offsets.len());
    let mut u = vec![0.0; d];
    for off in offsets {
        for k in 0..d {
            u[k] = off[k] / h;
        }
        basis.push(crate::basis::basis_vector(&layout, &u));
        kern.push(kernel.eval(&u));
    }
    let norm = offsets.len().max(1) as f64;
    let solve = solve_local(&layout, &basis, &kern, norm, &selectors, opts, x, h)?;
    if solve.degenerate {
        return Err(Error::SingularDesign {
            x: x.to_vec(),
            h,
            eigenvalue: solve.min_eigenvalue,
            floor: opts.eigen_floor,
        });
    }
    Ok(solve
        .weights
        .into_iter()
        .zip(targets)
        .map(|(w, s)| {
            let scale = 1.0 / (norm * h.powi(s.order() as i32));
            w.into_iter().map(|v| v * scale).collect()
        })
        .collect())
}

/// Empirical check of the weight properties for one [`WeightSet`].
#[derive(Debug, Clone, Serialize)]
pub struct WeightReport {
    /// Largest deviation in the scaled reproduction identities
    /// `Σ_j ((x_j - x)/h)^r w_j h^{|s|} = δ_{r,s} s!`.
    pub reproduction_error: f64,
    pub reproduction_ok: bool,
    pub locality_ok: bool,
    /// `max_j |w_j| p^1 h^{d+|s|}`.
    pub c1: f64,
    /// `Σ_j |w_j| h^{|s|}`.
    pub c3: f64,
    /// Sampled `|w_j(x) - w_j(y)| p^1 h^{d+|s|} / max(|x - y|_∞ / h, 1)`.
    pub c2: f64,
    pub sum_abs: f64,
    pub abs_sum: f64,
}

/// Checks polynomial reproduction, locality and reports the empirical
/// constants of the boundedness, Lipschitz and absolute-sum properties.
pub fn verify_weight_properties(ws: &WeightSet, grid: &DesignGrid) -> WeightReport {
    let d = grid.dim();
    let h = ws.h;
    let s_ord = ws.s.order() as i32;
    let layout = enumerate_basis(d, ws.m);

    let mut repro_err = 0.0_f64;
    for r in layout.indices() {
        let acc: f64 = ws
            .entries
            .iter()
            .map(|&(j, w)| {
                let u: Vec<f64> = grid
                    .point(j)
                    .iter()
                    .zip(&ws.x)
                    .map(|(a, b)| (a - b) / h)
                    .collect();
                r.power(&u) * w * h.powi(s_ord)
            })
            .sum();
        let target = if *r == ws.s { ws.s.factorial() } else { 0.0 };
        repro_err = repro_err.max((acc - target).abs());
    }

    let locality_ok = ws.entries.iter().all(|&(j, w)| {
        let far = grid
            .point(j)
            .iter()
            .zip(&ws.x)
            .any(|(a, b)| (a - b).abs() > h);
        !far || w == 0.0
    });

    let scale = grid.total() as f64 * h.powi(d as i32 + s_ord);
    let max_abs = ws.entries.iter().map(|e| e.1.abs()).fold(0.0, f64::max);
    let sum_abs: f64 = ws.entries.iter().map(|e| e.1.abs()).sum();
    let abs_sum = ws.entries.iter().map(|e| e.1).sum::<f64>().abs();

    // Lipschitz probe: shift x along each axis by fractions of h
    let mut c2 = 0.0_f64;
    for axis in 0..d {
        for frac in [0.05, 0.25, 1.0, 2.0] {
            for sign in [-1.0, 1.0] {
                let mut y = ws.x.clone();
                y[axis] += sign * frac * h;
                let (lo, hi) = grid.domain()[axis];
                if y[axis] < lo || y[axis] > hi {
                    continue;
                }
                let opts = WeightOptions::default();
                let Ok(other) =
                    local_poly_weights_with(grid, &y, h, &ws.s, ws.m, &ws.kernel, &opts)
                else {
                    continue;
                };
                let mut diff = 0.0_f64;
                let mut a = ws.entries.iter().peekable();
                let mut b = other.entries.iter().peekable();
                loop {
                    match (a.peek(), b.peek()) {
                        (None, None) => break,
                        (Some(&&(ja, wa)), Some(&&(jb, wb))) if ja == jb => {
                            diff = diff.max((wa - wb).abs());
                            a.next();
                            b.next();
                        }
                        (Some(&&(ja, wa)), Some(&&(jb, _))) if ja < jb => {
                            diff = diff.max(wa.abs());
                            a.next();
                        }
                        (Some(&&(_, wa)), None) => {
                            diff = diff.max(wa.abs());
                            a.next();
                        }
                        (_, Some(&&(_, wb))) => {
                            diff = diff.max(wb.abs());
                            b.next();
                        }
                    }
                }
                c2 = c2.max(diff * scale / frac.max(1.0));
            }
        }
    }

    WeightReport {
        reproduction_error: repro_err,
        reproduction_ok: repro_err <= 1e-8,
        locality_ok,
        c1: max_abs * scale,
        c3: sum_abs * h.powi(s_ord),
        c2,
        sum_abs,
        abs_sum,
    }
}
