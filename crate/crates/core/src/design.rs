//! Fixed synchronous design grids with Cartesian product structure.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

/// Per-axis sorted design points `x_{k,1} < ... < x_{k,p_k}`.
///
/// Points are usually in `[0, 1]`; grids ingested from real data (or padded
/// for periodic boundaries) may extend beyond it, in which case `domain`
/// records the interval on which estimates are reported.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignGrid {
    axes: Vec<Vec<f64>>,
    domain: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct GridDoc {
    axes: Vec<Vec<f64>>,
}

impl DesignGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one axis".into()));
        }
        for (k, axis) in axes.iter().enumerate() {
            if axis.is_empty() {
                return Err(Error::InvalidGrid(format!("axis {k} is empty")));
            }
            if axis.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidGrid(format!(
                    "axis {k} has non-finite points"
                )));
            }
            if axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidGrid(format!(
                    "axis {k} is not strictly increasing"
                )));
            }
        }
        let domain = axes
            .iter()
            .map(|a| {
                let (lo, hi) = (a[0], a[a.len() - 1]);
                if lo >= 0.0 && hi <= 1.0 {
                    (0.0, 1.0)
                } else {
                    (lo, hi)
                }
            })
            .collect();
        Ok(DesignGrid { axes, domain })
    }

    /// Equidistant midpoint grid `x_l = (l - 0.5) / p_k` on each axis.
    pub fn uniform(counts: &[usize]) -> Result<Self> {
        Self::new(
            counts
                .iter()
                .map(|&p| (1..=p).map(|l| (l as f64 - 0.5) / p as f64).collect())
                .collect(),
        )
    }

    pub fn with_domain(mut self, domain: Vec<(f64, f64)>) -> Result<Self> {
        if domain.len() != self.axes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.axes.len(),
                got: domain.len(),
            });
        }
        if domain.iter().any(|&(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidGrid("empty domain interval".into()));
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        &self.axes[k]
    }

    pub fn domain(&self) -> &[(f64, f64)] {
        &self.domain
    }

    pub fn counts(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    /// `p^1`, the total number of design points.
    pub fn total(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn p_min(&self) -> usize {
        self.axes.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn in_unit_cube(&self) -> bool {
        self.axes
            .iter()
            .all(|a| a[0] >= 0.0 && a[a.len() - 1] <= 1.0)
    }

    /// Per-axis indices for a row-major flat index (first axis slowest).
    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            let p = self.axes[k].len();
            idx[k] = flat % p;
            flat /= p;
        }
        idx
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (&j, axis)| acc * axis.len() + j)
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.unflatten(flat)
            .iter()
            .enumerate()
            .map(|(k, &j)| self.axes[k][j])
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.total()).map(|j| self.point(j)).collect()
    }

    /// Index ranges of points with `|x_{k,j} - x_k| <= h` on each axis.
    pub fn window_ranges(&self, x: &[f64], h: f64) -> Vec<Range<usize>> {
        self.axes
            .iter()
            .zip(x)
            .map(|(axis, &c)| {
                let lo = axis.partition_point(|&t| t < c - h);
                let hi = axis.partition_point(|&t| t <= c + h);
                lo..hi.max(lo)
            })
            .collect()
    }

    /// Visits every design point in the sup-norm window around `x` in
    /// increasing flat-index order.
    pub fn for_each_in_window<F: FnMut(usize, &[f64])>(&self, x: &[f64], h: f64, mut f: F) {
        let ranges = self.window_ranges(x, h);
        if ranges.iter().any(|r| r.is_empty()) {
            return;
        }
        let d = self.dim();
        let mut idx: Vec<usize> = ranges.iter().map(|r| r.start).collect();
        let mut pt: Vec<f64> = (0..d).map(|k| self.axes[k][idx[k]]).collect();
        loop {
            f(self.flatten(&idx), &pt);
            let mut k = d;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < ranges[k].end {
                    pt[k] = self.axes[k][idx[k]];
                    break;
                }
                idx[k] = ranges[k].start;
                pt[k] = self.axes[k][idx[k]];
            }
        }
    }

    /// Number of design points in the closed sup-norm window.
    pub fn count_in_window(&self, x: &[f64], h: f64) -> usize {
        self.window_ranges(x, h).iter().map(|r| r.len()).product()
    }

    /// Design points with every coordinate in `[lo_k + h, hi_k - h]`.
    pub fn trimmed_points(&self, h: f64) -> Vec<Vec<f64>> {
        // small slack so that midpoints sitting exactly on the boundary survive rounding
        let eps = 1e-12;
        self.points()
            .into_iter()
            .filter(|x| {
                x.iter()
                    .zip(&self.domain)
                    .all(|(&t, &(lo, hi))| t >= lo + h - eps && t <= hi - h + eps)
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&GridDoc {
            axes: self.axes.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: GridDoc = serde_json::from_str(s)?;
        Self::new(doc.axes)
    }

    /// Writes one axis as a single-column CSV.
    pub fn write_axis_csv<W: Write>(&self, k: usize, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["x"])?;
        for t in &self.axes[k] {
            wtr.write_record([format_float(*t)])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_axis_csv<R: Read>(r: R) -> Result<Vec<f64>> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut out = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = rec.get(0).unwrap_or("");
            out.push(field.trim().parse().map_err(|_| Error::Parse {
                location: format!("row {}", line + 2),
                message: format!("not a number: {field:?}"),
            })?);
        }
        Ok(out)
    }
}

impl fmt::Display for DesignGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DesignGrid{:?}", self.counts())
    }
}

/// Shortest representation that round-trips to the same `f64`.
pub(crate) fn format_float(x: f64) -> String {
    format!("{x:?}")
}

type DensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A Lipschitz design density on `[0, 1]` bounded away from zero.
#[derive(Clone)]
pub struct DesignDensity {
    f: DensityFn,
    f_min: f64,
    f_max: f64,
    lipschitz: f64,
}

impl fmt::Debug for DesignDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DesignDensity")
            .field("f_min", &self.f_min)
            .field("f_max", &self.f_max)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl DesignDensity {
    /// Validates the density on a fine lattice: bounds, unit mass, and
    /// the stated Lipschitz constant.
    pub fn new<F>(f: F, f_min: f64, f_max: f64, lipschitz: f64) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if !(f_min > 0.0 && f_min <= f_max) {
            return Err(Error::InvalidDensity(format!(
                "need 0 < f_min <= f_max, got {f_min}, {f_max}"
            )));
        }
        const LATTICE: usize = 10_000;
        let mut prev = f(0.0);
        for i in 0..=LATTICE {
            let t = i as f64 / LATTICE as f64;
            let v = f(t);
            if !v.is_finite() || v < f_min - 1e-12 || v > f_max + 1e-12 {
                return Err(Error::InvalidDensity(format!(
                    "f({t}) = {v} outside [{f_min}, {f_max}]"
                )));
            }
            if i > 0 && (v - prev).abs() > lipschitz * (1.0 / LATTICE as f64) + 1e-12 {
                return Err(Error::InvalidDensity(format!(
                    "Lipschitz bound {lipschitz} violated near t = {t}"
                )));
            }
            prev = v;
        }
        let mass = quad::integrate(&f, 0.0, 1.0, 1e-12);
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDensity(format!(
                "integrates to {mass}, not 1"
            )));
        }
        Ok(DesignDensity {
            f: Arc::new(f),
            f_min,
            f_max,
            lipschitz,
        })
    }

    pub fn uniform() -> Self {
        Self::new(|_| 1.0, 1.0, 1.0, 0.0).expect("uniform density is valid")
    }

    pub fn eval(&self, t: f64) -> f64 {
        (self.f)(t)
    }

    pub fn f_min(&self) -> f64 {
        self.f_min
    }

    pub fn f_max(&self) -> f64 {
        self.f_max
    }

    pub fn cdf(&self, x: f64) -> f64 {
        quad::integrate(&*self.f, 0.0, x.clamp(0.0, 1.0), 1e-13)
    }

    /// Solves `F(x) = q` by bisection on `[0, 1]`.
    pub fn quantile(&self, q: f64) -> f64 {
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        while hi - lo > 1e-13 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Quantile design: `x_{k,l}` solves `F_k(x) = (l - 0.5) / p_k`.
pub fn quantile_design(densities: &[DesignDensity], counts: &[usize]) -> Result<DesignGrid> {
    if densities.len() != counts.len() {
        return Err(Error::DimensionMismatch {
            expected: densities.len(),
            got: counts.len(),
        });
    }
    if let Some(&p) = counts.iter().find(|&&p| p < 2) {
        return Err(Error::InvalidGrid(format!("need p_k >= 2, got {p}")));
    }
    let axes = densities
        .iter()
        .zip(counts)
        .map(|(dens, &p)| {
            (1..=p)
                .map(|l| dens.quantile((l as f64 - 0.5) / p as f64))
                .collect()
        })
        .collect();
    DesignGrid::new(axes)
}

/// Default probe set for [`check_regularity`]: a 21-point lattice per axis and
/// `h ∈ {1/p_min, 2/p_min, ..., 0.5}`.
pub fn default_regularity_samples(grid: &DesignGrid) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p_min = grid.p_min().max(1);
    let hs: Vec<f64> = (1..)
        .map(|k| k as f64 / p_min as f64)
        .take_while(|&h| h <= 0.5 + 1e-12)
        .collect();
    let lattice: Vec<f64> = (0..21).map(|i| i as f64 / 20.0).collect();
    let mut xs = vec![Vec::new()];
    for _ in 0..grid.dim() {
        xs = xs
            .into_iter()
            .flat_map(|prefix| {
                lattice.iter().map(move |&t| {
                    let mut v = prefix.clone();
                    v.push(t);
                    v
                })
            })
            .collect();
    }
    (hs, xs)
}

/// Sampled estimate of the regular-design constant:
/// `max card{j : |x_j - x|_∞ <= h} / (h^d p^1)` over the probes.
pub fn check_regularity(grid: &DesignGrid, hs: &[f64], xs: &[Vec<f64>]) -> Result<f64> {
    if grid.total() == 0 {
        return Err(Error::InvalidGrid("empty grid".into()));
    }
    if hs.is_empty() || xs.is_empty() {
        return Err(Error::InvalidConfig("empty regularity probe set".into()));
    }
    let d = grid.dim() as i32;
    let total = grid.total() as f64;
    let mut best = 0.0_f64;
    for &h in hs {
        if !(h > 0.0 && h <= 1.0) {
            return Err(Error::InvalidConfig(format!("bandwidth {h} not in (0, 1]")));
        }
        for x in xs {
            if x.len() != grid.dim() {
                return Err(Error::DimensionMismatch {
                    expected: grid.dim(),
                    got: x.len(),
                });
            }
            let ratio = grid.count_in_window(x, h) as f64 / (h.powi(d) * total);
            best = best.max(ratio);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_quantile_design_is_midpoint_grid() {
        let g = quantile_design(&[DesignDensity::uniform()], &[5]).unwrap();
        for (a, b) in g.axis(0).iter().zip([0.1, 0.3, 0.5, 0.7, 0.9]) {
            assert!((a - b).abs() < 1e-10);
        }
        let g = quantile_design(&[DesignDensity::uniform()], &[101]).unwrap();
        let mid = DesignGrid::uniform(&[101]).unwrap();
        for (a, b) in g.axis(0).iter().zip(mid.axis(0)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_density_matches_closed_form_root() {
        // f(t) = 0.5 + t, F(x) = 0.5 x + x^2 / 2
        let dens = DesignDensity::new(|t| 0.5 + t, 0.5, 1.5, 1.0).unwrap();
        let p = 10;
        let g = quantile_design(std::slice::from_ref(&dens), &[p]).unwrap();
        for (l, &x) in g.axis(0).iter().enumerate() {
            let q = (l as f64 + 0.5) / p as f64;
            // positive root of x^2/2 + x/2 - q = 0
            let oracle = -0.5 + (0.25 + 2.0 * q).sqrt();
            assert!((x - oracle).abs() < 1e-10, "l={l}: {x} vs {oracle}");
            assert!((dens.cdf(x) - q).abs() < 1e-10);
        }
        // spacing bounds from f_min / f_max
        for w in g.axis(0).windows(2) {
            let gap = w[1] - w[0];
            assert!(gap >= 1.0 / (1.5 * p as f64) - 1e-12);
            assert!(gap <= 1.0 / (0.5 * p as f64) + 1e-12);
        }
    }

    #[test]
    fn invalid_densities_rejected() {
        assert!(matches!(
            DesignDensity::new(|t| 2.0 * t, 0.1, 2.0, 2.0),
            Err(Error::InvalidDensity(_))
        ));
        assert!(matches!(
            DesignDensity::new(|_| 0.9, 0.5, 1.0, 0.0),
            Err(Error::InvalidDensity(_))
        ));
        assert!(quantile_design(&[DesignDensity::uniform()], &[1]).is_err());
    }

    #[test]
    fn regularity_counts() {
        let g = DesignGrid::uniform(&[100]).unwrap();
        assert_eq!(g.count_in_window(&[0.5], 0.1), 20);
        let r = check_regularity(&g, &[0.1], &[vec![0.5]]).unwrap();
        assert!((r - 2.0).abs() < 1e-12);

        for x in [0.0, 0.3, 1.0] {
            let r = check_regularity(&g, &[1.0], &[vec![x]]).unwrap();
            assert!(r <= 2.0);
        }

        let g2 = DesignGrid::uniform(&[50, 50]).unwrap();
        let brute = g2
            .points()
            .iter()
            .filter(|p| p.iter().all(|&t| (0.45..=0.55).contains(&t)))
            .count();
        let r = check_regularity(&g2, &[0.05], &[vec![0.5, 0.5]]).unwrap();
        assert!((r - brute as f64 / (0.05 * 0.05 * 2500.0)).abs() < 1e-12);
    }

    #[test]
    fn regularity_bounded_on_quantile_designs() {
        let dens = DesignDensity::new(|t| 0.5 + t, 0.5, 1.5, 1.0).unwrap();
        let mut worst: f64 = 0.0;
        for p in [50, 100, 200] {
            let g = quantile_design(std::slice::from_ref(&dens), &[p]).unwrap();
            let (hs, xs) = default_regularity_samples(&g);
            worst = worst.max(check_regularity(&g, &hs, &xs).unwrap());
        }
        // at most 2 f_max plus the discretisation excess at h = 1/p
        assert!(worst <= 2.0 * 1.5 + 1.0, "{worst}");
    }

    #[test]
    fn window_visits_in_flat_order() {
        let g = DesignGrid::uniform(&[6, 7, 5]).unwrap();
        let mut seen = Vec::new();
        g.for_each_in_window(&[0.4, 0.5, 0.6], 0.25, |j, pt| {
            assert_eq!(g.point(j), pt.to_vec());
            seen.push(j);
        });
        let brute: Vec<usize> = (0..g.total())
            .filter(|&j| {
                g.point(j)
                    .iter()
                    .zip([0.4, 0.5, 0.6])
                    .all(|(a, b)| (a - b).abs() <= 0.25)
            })
            .collect();
        assert_eq!(seen, brute);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let g = DesignGrid::uniform(&[3, 2]).unwrap();
        let back = DesignGrid::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(g, back);
        assert!(DesignGrid::from_json(r#"{"axes": [[0.2, 0.1]]}"#).is_err());
        let mut buf = Vec::new();
        g.write_axis_csv(0, &mut buf).unwrap();
        assert_eq!(DesignGrid::read_axis_csv(&buf[..]).unwrap(), g.axis(0));
    }
}
