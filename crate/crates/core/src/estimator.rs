//! Linear mean-derivative estimator for synchronously observed curves and
//! leave-one-curve-out bandwidth selection.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::basis::MultiIndex;
use crate::design::{format_float, DesignGrid};
use crate::error::{Error, Result};
use crate::weights::{local_poly_weights_with, Kernel, WeightOptions, WeightSet};

/// `n` curves observed on a common design grid, stored row-major (`n × p^1`).
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    grid: DesignGrid,
    values: Vec<f64>,
    n: usize,
}

impl FunctionalDataset {
    pub fn new(grid: DesignGrid, values: Vec<f64>, n: usize) -> Result<Self> {
        let p = grid.total();
        if values.len() != n * p {
            return Err(Error::InvalidData(format!(
                "expected {n} x {p} = {} values, got {}",
                n * p,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite value in curve {} at column {}",
                pos / p.max(1),
                pos % p.max(1)
            )));
        }
        Ok(FunctionalDataset { grid, values, n })
    }

    pub fn from_rows(grid: DesignGrid, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let p = grid.total();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != p) {
            return Err(Error::InvalidData(format!(
                "curve {i} has {} columns, grid has {p}",
                r.len()
            )));
        }
        Self::new(grid, rows.concat(), n)
    }

    pub fn grid(&self) -> &DesignGrid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.grid.total()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.p().max(1))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Reads the wide format: the header row holds the flattened grid
    /// coordinates (row-major over axes, `;`-separated within a cell when
    /// `d > 1`), each subsequent row is one curve.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut records = rdr.records();
        let header = records.next().ok_or_else(|| Error::Parse {
            location: "row 1".into(),
            message: "missing coordinate header".into(),
        })??;
        let coords = header
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.split(';')
                    .map(|t| {
                        t.trim().parse::<f64>().map_err(|_| Error::Parse {
                            location: format!("row 1, column {}", c + 1),
                            message: format!("bad coordinate {cell:?}"),
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let grid = grid_from_flat_coords(&coords)?;
        let p = grid.total();
        let mut values = Vec::new();
        let mut n = 0;
        for (r, rec) in records.enumerate() {
            let rec = rec?;
            if rec.len() != p {
                return Err(Error::Parse {
                    location: format!("row {}", r + 2),
                    message: format!("expected {p} columns, found {}", rec.len()),
                });
            }
            for (c, cell) in rec.iter().enumerate() {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    location: format!("row {}, column {}", r + 2, c + 1),
                    message: format!("not a number: {cell:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        location: format!("row {}, column {}", r + 2, c + 1),
                        message: "non-finite value".into(),
                    });
                }
                values.push(v);
            }
            n += 1;
        }
        Self::new(grid, values, n)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let header: Vec<String> = self
            .grid
            .points()
            .iter()
            .map(|pt| {
                pt.iter()
                    .map(|&t| format_float(t))
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .collect();
        wtr.write_record(&header)?;
        for row in self.rows() {
            wtr.write_record(row.iter().map(|&v| format_float(v)))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Periodic boundary augmentation for `d = 1` curves that wrap (for
    /// instance across midnight): curve `i` is extended on the left by the last
    /// `pad` columns of curve `i - 1` and on the right by the first `pad`
    /// columns of curve `i + 1`, with coordinates shifted by one period. The
    /// first and last curves wrap onto themselves. The reporting domain stays
    /// the original one.
    pub fn periodic_pad(&self, pad: usize) -> Result<Self> {
        if self.grid.dim() != 1 {
            return Err(Error::InvalidData("periodic padding needs d = 1".into()));
        }
        let p = self.p();
        if pad == 0 || pad > p {
            return Err(Error::InvalidConfig(format!(
                "pad width {pad} must be in 1..={p}"
            )));
        }
        let (lo, hi) = self.grid.domain()[0];
        let period = hi - lo;
        let axis = self.grid.axis(0);
        let mut new_axis = Vec::with_capacity(p + 2 * pad);
        new_axis.extend(axis[p - pad..].iter().map(|t| t - period));
        new_axis.extend_from_slice(axis);
        new_axis.extend(axis[..pad].iter().map(|t| t + period));
        let grid = DesignGrid::new(vec![new_axis])?.with_domain(vec![(lo, hi)])?;
        let mut rows = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let prev = self.row(if i == 0 { 0 } else { i - 1 });
            let next = self.row(if i + 1 == self.n { i } else { i + 1 });
            let mut r = Vec::with_capacity(p + 2 * pad);
            r.extend_from_slice(&prev[p - pad..]);
            r.extend_from_slice(self.row(i));
            r.extend_from_slice(&next[..pad]);
            rows.push(r);
        }
        Self::from_rows(grid, rows)
    }
}

fn grid_from_flat_coords(coords: &[Vec<f64>]) -> Result<DesignGrid> {
    let d = coords.first().map(Vec::len).unwrap_or(0);
    if d == 0 || coords.iter().any(|c| c.len() != d) {
        return Err(Error::Parse {
            location: "row 1".into(),
            message: "inconsistent coordinate dimensions in header".into(),
        });
    }
    let mut axes = Vec::with_capacity(d);
    for k in 0..d {
        let mut vals: Vec<f64> = coords.iter().map(|c| c[k]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        axes.push(vals);
    }
    let grid = DesignGrid::new(axes)?;
    if grid.total() != coords.len() || grid.points() != coords {
        return Err(Error::Parse {
            location: "row 1".into(),
            message: "header is not a row-major Cartesian grid".into(),
        });
    }
    Ok(grid)
}

/// `Ȳ_j = n^{-1} Σ_i Y_{i,j}`.
pub fn row_means(data: &FunctionalDataset) -> Vec<f64> {
    let p = data.p();
    let mut acc = vec![0.0; p];
    for row in data.rows() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = data.n() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Which evaluation points to use.
#[derive(Debug, Clone)]
pub enum EvalPoints {
    /// Design points with every coordinate in `[lo + h, hi - h]`.
    Trimmed,
    /// All design points.
    Full,
    Custom(Vec<Vec<f64>>),
}

impl EvalPoints {
    pub fn resolve(&self, grid: &DesignGrid, h: f64) -> Vec<Vec<f64>> {
        match self {
            EvalPoints::Trimmed => grid.trimmed_points(h),
            EvalPoints::Full => {
                let dom = grid.domain();
                grid.points()
                    .into_iter()
                    .filter(|x| x.iter().zip(dom).all(|(&t, &(lo, hi))| t >= lo && t <= hi))
                    .collect()
            }
            EvalPoints::Custom(v) => v.clone(),
        }
    }
}

/// Precomputed weights for a fixed `(grid, points, h, s, m, kernel)`; applying
/// it to a vector of row means is the estimator.
#[derive(Debug, Clone)]
pub struct LinearSmoother {
    pub points: Vec<Vec<f64>>,
    pub h: f64,
    pub s: MultiIndex,
    pub m: usize,
    pub kernel: Kernel,
    /// `None` where the local fit was singular.
    pub weights: Vec<Option<WeightSet>>,
}

impl LinearSmoother {
    pub fn build(
        grid: &DesignGrid,
        points: Vec<Vec<f64>>,
        h: f64,
        s: &MultiIndex,
        m: usize,
        kernel: &Kernel,
    ) -> Result<Self> {
        if s.order() > m {
            return Err(Error::OrderExceeded {
                order: s.order(),
                max: m,
            });
        }
        if s.dim() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: grid.dim(),
                got: s.dim(),
            });
        }
        if !(h > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth must be positive, got {h}"
            )));
        }
        let opts = WeightOptions::default();
        let weights = points
            .par_iter()
            .map(
                |x| match local_poly_weights_with(grid, x, h, s, m, kernel, &opts) {
                    Ok(ws) => Ok(Some(ws)),
                    Err(Error::SingularDesign { .. }) => Ok(None),
                    Err(e) => Err(e),
                },
            )
            .collect::<Result<Vec<_>>>()?;
        Ok(LinearSmoother {
            points,
            h,
            s: s.clone(),
            m,
            kernel: *kernel,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flagged(&self) -> Vec<bool> {
        self.weights.iter().map(Option::is_none).collect()
    }

    pub fn any_flagged(&self) -> bool {
        self.weights.iter().any(Option::is_none)
    }

    /// Applies the weights; flagged points yield `NaN`.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.as_ref().map_or(f64::NAN, |ws| ws.apply(values)))
            .collect()
    }

    /// `max_x |Σ_j w_j(x) v_j|` over unflagged points.
    pub fn sup_abs(&self, values: &[f64]) -> f64 {
        self.weights
            .iter()
            .flatten()
            .map(|ws| ws.apply(values).abs())
            .fold(0.0, f64::max)
    }
}

/// Estimated `∂^s μ` on a set of evaluation points.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeEstimate {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub flagged: Vec<bool>,
    pub h: f64,
    pub s: MultiIndex,
    pub m: usize,
    pub kernel: String,
}

impl DerivativeEstimate {
    pub fn all_flagged(&self) -> bool {
        !self.flagged.is_empty() && self.flagged.iter().all(|&f| f)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let d = self.s.dim();
        let mut header: Vec<String> = if d == 1 {
            vec!["x".into()]
        } else {
            (1..=d).map(|k| format!("x{k}")).collect()
        };
        header.push("estimate".into());
        header.push("flagged".into());
        wtr.write_record(&header)?;
        for ((pt, v), f) in self.points.iter().zip(&self.values).zip(&self.flagged) {
            let mut rec: Vec<String> = pt.iter().map(|&t| format_float(t)).collect();
            rec.push(format_float(*v));
            rec.push(u8::from(*f).to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn estimate_derivative(
    data: &FunctionalDataset,
    s: &MultiIndex,
    m: usize,
    h: f64,
    eval: &EvalPoints,
    kernel: &Kernel,
) -> Result<DerivativeEstimate> {
    let points = eval.resolve(data.grid(), h);
    let smoother = LinearSmoother::build(data.grid(), points, h, s, m, kernel)?;
    let values = smoother.apply(&row_means(data));
    Ok(DerivativeEstimate {
        flagged: smoother.flagged(),
        points: smoother.points,
        values,
        h,
        s: s.clone(),
        m,
        kernel: kernel.id().to_string(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CvScore {
    pub h: f64,
    /// `None` when the fit is singular somewhere on the grid.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvResult {
    pub selected_h: f64,
    pub scores: Vec<CvScore>,
}

/// Leave-one-curve-out cross-validation of the mean fit (`s = 0`).
///
/// `score(h) = Σ_i Σ_j (Y_{ij} - μ̂_{-i}(x_j; h))^2` with
/// `μ̂_{-i} = (n μ̂ - S Y_i) / (n - 1)`, i.e. the row mean is downdated rather
/// than the weights refitted. Ties go to the smaller bandwidth.
pub fn cv_bandwidth(
    data: &FunctionalDataset,
    m: usize,
    h_grid: &[f64],
    kernel: &Kernel,
) -> Result<CvResult> {
    let n = data.n();
    if n < 2 {
        return Err(Error::InvalidData(format!(
            "cross-validation needs at least 2 curves, got {n}"
        )));
    }
    if h_grid.is_empty() {
        return Err(Error::InvalidConfig("empty bandwidth grid".into()));
    }
    let grid = data.grid();
    let zero = MultiIndex::zero(grid.dim());
    let means = row_means(data);
    let nf = n as f64;
    let scores = h_grid
        .iter()
        .map(|&h| {
            let sm = LinearSmoother::build(grid, grid.points(), h, &zero, m, kernel)?;
            if sm.any_flagged() {
                return Ok(CvScore { h, score: None });
            }
            let fit_all = sm.apply(&means);
            let per_curve: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let y = data.row(i);
                    let fit_i = sm.apply(y);
                    y.iter()
                        .zip(&fit_all)
                        .zip(&fit_i)
                        .map(|((&yij, &fa), &fi)| {
                            let loo = (nf * fa - fi) / (nf - 1.0);
                            (yij - loo).powi(2)
                        })
                        .sum()
                })
                .collect();
            Ok(CvScore {
                h,
                score: Some(per_curve.iter().sum()),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let best = scores
        .iter()
        .filter_map(|c| c.score.map(|s| (c.h, s)))
        .min_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap()
                .then(a.0.partial_cmp(&b.0).unwrap())
        })
        .ok_or(Error::NoValidBandwidth)?;
    Ok(CvResult {
        selected_h: best.0,
        scores,
    })
}
