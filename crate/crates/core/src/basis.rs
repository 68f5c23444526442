//! Multi-indices and the scaled monomial basis used by local polynomial fits.
//!
//! The basis of order `m` in `d` variables consists of the monomials
//! `u^k / k!` for every multi-index `k` with `|k| <= m`, ordered by total
//! degree and lexicographically (descending in the first coordinate) within
//! a degree block, so that in two dimensions the first-order block reads
//! `(1,0), (0,1)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent vector `k = (k_1, ..., k_d)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(entries: Vec<usize>) -> Self {
        assert!(!entries.is_empty(), "multi-index needs at least one entry");
        MultiIndex(entries)
    }

    pub fn zero(d: usize) -> Self {
        Self::new(vec![0; d])
    }

    /// Unit multi-index with a one in coordinate `axis`.
    pub fn unit(d: usize, axis: usize) -> Self {
        let mut e = vec![0; d];
        e[axis] = 1;
        Self::new(e)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Total order `|k|`.
    pub fn order(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }

    /// `k! = k_1! ... k_d!` as a float.
    pub fn factorial(&self) -> f64 {
        self.0.iter().map(|&k| factorial(k)).product()
    }

    /// `u^k = u_1^{k_1} ... u_d^{k_d}`.
    pub fn power(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.0.len());
        self.0
            .iter()
            .zip(u)
            .map(|(&k, &x)| x.powi(k as i32))
            .product()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|k| k.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl From<Vec<usize>> for MultiIndex {
    fn from(v: Vec<usize>) -> Self {
        MultiIndex::new(v)
    }
}

pub(crate) fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * i as f64)
}

/// `binomial(n, k)` computed exactly in integers.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Enumeration of all multi-indices of total order at most `m` in `d` variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasisLayout {
    d: usize,
    m: usize,
    indices: Vec<MultiIndex>,
}

impl BasisLayout {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn order(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    /// Position of `k` in the layout, if present.
    pub fn position(&self, k: &MultiIndex) -> Option<usize> {
        self.indices.iter().position(|i| i == k)
    }

    /// Writes `U_m(u)` into `out`, avoiding an allocation per grid point.
    pub fn fill_basis(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.indices.len());
        for (slot, k) in out.iter_mut().zip(&self.indices) {
            *slot = k.power(u) / k.factorial();
        }
    }
}

/// All `k` with `|k| = total` in `d` variables, lexicographically descending.
fn compositions(d: usize, total: usize) -> Vec<Vec<usize>> {
    if d == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in (0..=total).rev() {
        for mut rest in compositions(d - 1, total - first) {
            let mut k = Vec::with_capacity(d);
            k.push(first);
            k.append(&mut rest);
            out.push(k);
        }
    }
    out
}

pub fn enumerate_basis(d: usize, m: usize) -> BasisLayout {
    assert!(d >= 1, "dimension must be positive");
    let indices = (0..=m)
        .flat_map(|l| compositions(d, l))
        .map(MultiIndex::new)
        .collect();
    BasisLayout { d, m, indices }
}

/// `U_m(u)`: the vector of scaled monomials `u^k / k!`.
pub fn basis_vector(layout: &BasisLayout, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layout.len()];
    layout.fill_basis(u, &mut out);
    out
}

/// `∂^s U_m(0)`: the unit vector selecting the coefficient of `u^s / s!`.
pub fn derivative_selector(layout: &BasisLayout, s: &MultiIndex) -> Result<Vec<f64>> {
    if s.dim() != layout.dim() {
        return Err(Error::DimensionMismatch {
            expected: layout.dim(),
            got: s.dim(),
        });
    }
    if s.order() > layout.order() {
        return Err(Error::OrderExceeded {
            order: s.order(),
            max: layout.order(),
        });
    }
    let pos = layout
        .position(s)
        .expect("every index of order <= m is enumerated");
    let mut e = vec![0.0; layout.len()];
    e[pos] = 1.0;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn brute_force(d: usize, m: usize) -> HashSet<Vec<usize>> {
        let mut set = HashSet::new();
        let total = (m + 1).pow(d as u32);
        for code in 0..total {
            let mut k = Vec::with_capacity(d);
            let mut c = code;
            for _ in 0..d {
                k.push(c % (m + 1));
                c /= m + 1;
            }
            if k.iter().sum::<usize>() <= m {
                set.insert(k);
            }
        }
        set
    }

    #[test]
    fn small_layouts() {
        let l = enumerate_basis(2, 1);
        let got: Vec<Vec<usize>> = l.indices().iter().map(|k| k.entries().to_vec()).collect();
        assert_eq!(got, vec![vec![0, 0], vec![1, 0], vec![0, 1]]);

        let l = enumerate_basis(1, 3);
        let got: Vec<usize> = l.indices().iter().map(|k| k.entries()[0]).collect();
        assert_eq!(got, vec![0, 1, 2, 3]);

        assert_eq!(enumerate_basis(3, 2).len(), 10);
        assert_eq!(brute_force(3, 2).len(), 10);
    }

    #[test]
    fn enumeration_is_bijection_onto_bounded_orders() {
        for d in 1..=4 {
            for m in 0..=4 {
                let l = enumerate_basis(d, m);
                assert_eq!(l.len(), binomial(d + m, d));
                let set: HashSet<Vec<usize>> =
                    l.indices().iter().map(|k| k.entries().to_vec()).collect();
                assert_eq!(set.len(), l.len(), "duplicates for d={d} m={m}");
                assert_eq!(set, brute_force(d, m));
                assert_eq!(l.indices()[0], MultiIndex::zero(d));
                // graded blocks of size N_{l,d-1}
                for deg in 0..=m {
                    let count = l.indices().iter().filter(|k| k.order() == deg).count();
                    let expected = if d == 1 {
                        1
                    } else {
                        binomial(d - 1 + deg, d - 1)
                    };
                    assert_eq!(count, expected);
                }
                let orders: Vec<usize> = l.indices().iter().map(|k| k.order()).collect();
                assert!(orders.windows(2).all(|w| w[0] <= w[1]));
            }
        }
        assert_eq!(enumerate_basis(3, 3), enumerate_basis(3, 3));
    }

    #[test]
    fn basis_vector_values() {
        let l = enumerate_basis(1, 2);
        assert_eq!(basis_vector(&l, &[2.0]), vec![1.0, 2.0, 2.0]);

        let l = enumerate_basis(2, 1);
        assert_eq!(basis_vector(&l, &[0.0, 0.0]), vec![1.0, 0.0, 0.0]);

        let l = enumerate_basis(2, 2);
        let v = basis_vector(&l, &[1.0, 1.0]);
        let at = |k: Vec<usize>| v[l.position(&MultiIndex::new(k)).unwrap()];
        assert_eq!(at(vec![1, 1]), 1.0);
        assert_eq!(at(vec![2, 0]), 0.5);
        assert_eq!(at(vec![0, 2]), 0.5);
    }

    #[test]
    fn basis_at_origin_is_first_unit_vector() {
        for d in 1..=3 {
            for m in 0..=3 {
                let l = enumerate_basis(d, m);
                let v = basis_vector(&l, &vec![0.0; d]);
                assert_eq!(v[0], 1.0);
                assert!(v[1..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn selectors() {
        let l = enumerate_basis(1, 2);
        assert_eq!(
            derivative_selector(&l, &MultiIndex::new(vec![1])).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        let l = enumerate_basis(2, 1);
        assert_eq!(
            derivative_selector(&l, &MultiIndex::zero(2)).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        let l = enumerate_basis(2, 2);
        let e = derivative_selector(&l, &MultiIndex::new(vec![1, 1])).unwrap();
        let pos = l.position(&MultiIndex::new(vec![1, 1])).unwrap();
        assert_eq!(e.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(e[pos], 1.0);

        let err = derivative_selector(&l, &MultiIndex::new(vec![2, 1])).unwrap_err();
        assert!(matches!(err, Error::OrderExceeded { order: 3, max: 2 }));
    }

    /// Central finite differences of `U_m` at 0 in direction `s` recover the selector,
    /// since `∂^s (u^k / k!)` at 0 is `δ_{k,s}`.
    #[test]
    fn finite_difference_partials_match_selector() {
        fn partial(f: &dyn Fn(&[f64]) -> f64, x: &[f64], s: &[usize], step: f64) -> f64 {
            match s.iter().position(|&k| k > 0) {
                None => f(x),
                Some(axis) => {
                    let mut rest = s.to_vec();
                    rest[axis] -= 1;
                    let mut xp = x.to_vec();
                    let mut xm = x.to_vec();
                    xp[axis] += step;
                    xm[axis] -= step;
                    (partial(f, &xp, &rest, step) - partial(f, &xm, &rest, step)) / (2.0 * step)
                }
            }
        }
        for d in 1..=2 {
            let m = 2;
            let l = enumerate_basis(d, m);
            for s in l.indices() {
                let sel = derivative_selector(&l, s).unwrap();
                for (c, target) in sel.iter().enumerate() {
                    let f = |u: &[f64]| basis_vector(&l, u)[c];
                    let fd = partial(&f, &vec![0.0; d], s.entries(), 1e-3);
                    assert!((fd - target).abs() < 1e-8, "s={s} c={c} fd={fd}");
                }
            }
        }
    }
}
