mod common;

use fda_deriv::basis::MultiIndex;
use fda_deriv::design::DesignGrid;
use fda_deriv::estimator::{estimate_derivative, EvalPoints, FunctionalDataset};
use fda_deriv::weights::{
    epanechnikov_product_kernel, local_poly_weights, verify_weight_properties,
};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Case {
    d: usize,
    m: usize,
    s: Vec<usize>,
    p: usize,
    h: f64,
    x: Vec<f64>,
    coefs: Vec<f64>,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..=3, 1usize..=3).prop_flat_map(|(d, m)| {
        let (p_lo, p_hi, h_lo) = match d {
            1 => (20usize, 60usize, 0.12),
            2 => (10, 16, 0.25),
            _ => (8, 11, 0.35),
        };
        let n_coef = common::exponents(d, m).len();
        (
            Just(d),
            Just(m),
            proptest::collection::vec(0usize..=m, d)
                .prop_filter("|s| <= m", move |s| s.iter().sum::<usize>() <= m),
            p_lo..p_hi,
            h_lo..0.45f64,
            proptest::collection::vec(0.3..0.7f64, d),
            proptest::collection::vec(-1.0..1.0f64, n_coef),
        )
            .prop_map(|(d, m, s, p, h, x, coefs)| Case {
                d,
                m,
                s,
                p,
                h,
                x,
                coefs,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn polynomials_of_order_m_are_reproduced(c in case()) {
        let grid = DesignGrid::uniform(&vec![c.p; c.d]).unwrap();
        let kernel = epanechnikov_product_kernel(c.d);
        let ex = common::exponents(c.d, c.m);
        let poly: Vec<(Vec<usize>, f64)> = ex.into_iter().zip(c.coefs.iter().copied()).collect();
        let values: Vec<f64> = grid.points().iter().map(|pt| common::poly_derivative(&poly, &vec![0; c.d], pt)).collect();
        let ws = local_poly_weights(&grid, &c.x, c.h, &MultiIndex::new(c.s.clone()), c.m, &kernel).unwrap();
        let truth = common::poly_derivative(&poly, &c.s, &c.x);
        let est = ws.apply(&values);
        prop_assert!((est - truth).abs() <= 1e-8 * (1.0 + truth.abs()), "est {} truth {}", est, truth);
    }

    #[test]
    fn closed_form_matches_least_squares(d in 1usize..=2, m in 1usize..=3, p1 in 12usize..=50,
                                          h in 0.32..0.45f64, x in proptest::collection::vec(0.25..0.75f64, 2),
                                          s_raw in proptest::collection::vec(0usize..=3, 2)) {
        let counts = if d == 1 { vec![p1] } else { vec![7, 7] };
        let grid = DesignGrid::uniform(&counts).unwrap();
        let x = &x[..d];
        let mut s: Vec<usize> = s_raw[..d].to_vec();
        while s.iter().sum::<usize>() > m { let k = s.iter().position(|&v| v > 0).unwrap(); s[k] -= 1; }
        let kernel = epanechnikov_product_kernel(d);
        let ws = local_poly_weights(&grid, x, h, &MultiIndex::new(s.clone()), m, &kernel).unwrap();
        let oracle = common::wls_weights(&grid.points(), x, h, m, &s);
        let scale = oracle.iter().fold(0.0f64, |a, w| a.max(w.abs())).max(1.0);
        for j in 0..grid.total() {
            prop_assert!((ws.weight(j) - oracle[j]).abs() <= 1e-10 * scale, "j={} {} vs {}", j, ws.weight(j), oracle[j]);
        }
    }

    #[test]
    fn estimator_is_linear_and_shift_invariant(a in -3.0..3.0f64, b in -3.0..3.0f64, shift in -5.0..5.0f64,
                                                seed in 0u64..1000) {
        let grid = DesignGrid::uniform(&[60]).unwrap();
        let mk = |k: u64| -> Vec<Vec<f64>> {
            (0..3).map(|i| (0..60).map(|j| (((seed + k) * 31 + i * 7 + j as u64 * 13) % 97) as f64 / 97.0).collect()).collect()
        };
        let (r1, r2) = (mk(1), mk(2));
        let comb: Vec<Vec<f64>> = r1.iter().zip(&r2).map(|(u, v)| u.iter().zip(v).map(|(p, q)| a * p + b * q).collect()).collect();
        let kernel = epanechnikov_product_kernel(1);
        let s = MultiIndex::new(vec![1]);
        let est = |rows: Vec<Vec<f64>>| estimate_derivative(&FunctionalDataset::from_rows(grid.clone(), rows).unwrap(), &s, 2, 0.15, &EvalPoints::Trimmed, &kernel).unwrap().values;
        let (e1, e2, ec) = (est(r1.clone()), est(r2), est(comb));
        for k in 0..ec.len() {
            prop_assert!((ec[k] - (a * e1[k] + b * e2[k])).abs() < 1e-10 * (1.0 + ec[k].abs()));
        }
        let shifted: Vec<Vec<f64>> = r1.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let es = est(shifted);
        for k in 0..es.len() {
            prop_assert!((es[k] - e1[k]).abs() < 1e-10 * (1.0 + e1[k].abs()));
        }
    }
}

#[test]
fn empirical_c1_is_uniformly_bounded() {
    let kernel = epanechnikov_product_kernel(1);
    let s = MultiIndex::new(vec![1]);
    let mut c1 = Vec::new();
    for p in [50usize, 100, 200, 400, 800] {
        let grid = DesignGrid::uniform(&[p]).unwrap();
        for k in 0..6 {
            let h = 2.0 / p as f64 + k as f64 * (0.3 - 2.0 / p as f64) / 5.0;
            let h = h.max(3.0 / p as f64);
            for &x in &[0.35, 0.5, 0.65] {
                let ws = local_poly_weights(&grid, &[x], h, &s, 2, &kernel).unwrap();
                c1.push(verify_weight_properties(&ws, &grid).c1);
            }
        }
    }
    let mut sorted = c1.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let max = *sorted.last().unwrap();
    assert!(max <= 10.0 * median, "max {max} median {median}");
}

#[test]
fn c1_and_c3_stable_across_interior() {
    let grid = DesignGrid::uniform(&[200]).unwrap();
    let kernel = epanechnikov_product_kernel(1);
    let s = MultiIndex::new(vec![1]);
    let (mut c1, mut c3) = (Vec::new(), Vec::new());
    for x in grid.trimmed_points(0.1) {
        let ws = local_poly_weights(&grid, &x, 0.1, &s, 2, &kernel).unwrap();
        let r = verify_weight_properties(&ws, &grid);
        assert!(r.reproduction_ok && r.locality_ok);
        assert!(r.sum_abs >= r.abs_sum);
        c1.push(r.c1);
        c3.push(r.c3);
    }
    let spread = |v: &[f64]| {
        v.iter().cloned().fold(0.0, f64::max) / v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    assert!(c1.iter().all(|v| v.is_finite()) && c3.iter().all(|v| v.is_finite()));
    assert!(
        spread(&c1) < 1.5 && spread(&c3) < 1.5,
        "{} {}",
        spread(&c1),
        spread(&c3)
    );
}
