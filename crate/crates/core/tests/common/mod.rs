#![allow(dead_code)]

/// All exponent vectors of length `d` with total order `<= m`.
pub fn exponents(d: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == d {
            out.push(cur.clone());
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(d, left - k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, m, &mut Vec::new(), &mut out);
    out
}

pub fn monomial(e: &[usize], v: &[f64]) -> f64 {
    e.iter().zip(v).map(|(&k, &t)| t.powi(k as i32)).product()
}

fn fact(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// `∂^s` of `Σ_e c_e x^e` at `x`.
pub fn poly_derivative(coefs: &[(Vec<usize>, f64)], s: &[usize], x: &[f64]) -> f64 {
    coefs
        .iter()
        .filter(|(e, _)| e.iter().zip(s).all(|(a, b)| a >= b))
        .map(|(e, c)| {
            let mut v = *c;
            for r in 0..x.len() {
                v *= fact(e[r]) / fact(e[r] - s[r]) * x[r].powi((e[r] - s[r]) as i32);
            }
            v
        })
        .sum()
}

/// Gaussian elimination with partial pivoting; `a` is row-major `n × n`.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

pub fn epanechnikov(u: &[f64]) -> f64 {
    u.iter()
        .map(|&t| {
            if t.abs() <= 1.0 {
                0.75 * (1.0 - t * t)
            } else {
                0.0
            }
        })
        .product()
}

/// Weights of `∂^s` at `x` from the weighted least-squares fit in unscaled
/// monomials `(x_j - x)^e`: weight `j` is `s! β_s` for data `e_j`.
pub fn wls_weights(points: &[Vec<f64>], x: &[f64], h: f64, m: usize, s: &[usize]) -> Vec<f64> {
    let d = x.len();
    let ex = exponents(d, m);
    let q = ex.len();
    let pos = ex.iter().position(|e| e.as_slice() == s).unwrap();
    let mut a = vec![vec![0.0; q]; q];
    let mut rows = Vec::with_capacity(points.len());
    for pt in points {
        let v: Vec<f64> = pt.iter().zip(x).map(|(a, b)| a - b).collect();
        let u: Vec<f64> = v.iter().map(|t| t / h).collect();
        let k = epanechnikov(&u);
        let phi: Vec<f64> = ex.iter().map(|e| monomial(e, &v)).collect();
        for i in 0..q {
            for j in 0..q {
                a[i][j] += k * phi[i] * phi[j];
            }
        }
        rows.push((k, phi));
    }
    let sfact: f64 = s.iter().map(|&k| fact(k)).product();
    // row `pos` of A^{-1}, obtained by solving A z = e_pos (A symmetric)
    let mut e = vec![0.0; q];
    e[pos] = 1.0;
    let z = solve(a, e);
    rows.iter()
        .map(|(k, phi)| sfact * k * phi.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}
