//! Dense solves for boundary operator equations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Direct factorization below this many unknowns, restarted GMRES above.
pub const DIRECT_LIMIT: usize = 2000;
pub const GMRES_TOL: f64 = 1e-10;
pub const GMRES_MAX_ITER: usize = 500;
pub const GMRES_RESTART: usize = 100;

#[derive(Clone, Debug)]
pub struct Solve {
    pub x: DVector<f64>,
    /// `|M x - b| / |b|`, or `|M x - b|` when `b = 0`.
    pub residual: f64,
    pub iterations: usize,
}

pub fn relative_residual(m: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let r = (m * x - b).norm();
    let nb = b.norm();
    if nb > 0.0 {
        r / nb
    } else {
        r
    }
}

/// Solves `m x = b` by LU (small systems) or GMRES (large systems).
pub fn solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<Solve> {
    if m.nrows() < DIRECT_LIMIT {
        solve_direct(m, b)
    } else {
        gmres(m, b, GMRES_TOL, GMRES_RESTART, GMRES_MAX_ITER)
    }
}

pub fn solve_direct(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<Solve> {
    let lu = m.clone().lu();
    let x = lu.solve(b).ok_or(Error::IllConditioned { condition: f64::INFINITY })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned { condition: f64::INFINITY });
    }
    let residual = relative_residual(m, &x, b);
    Ok(Solve { x, residual, iterations: 1 })
}

/// Restarted GMRES with modified Gram-Schmidt and Givens rotations.
pub fn gmres(m: &DMatrix<f64>, b: &DVector<f64>, tol: f64, restart: usize, max_iter: usize) -> Result<Solve> {
    let n = b.len();
    let nb = b.norm();
    let mut x = DVector::zeros(n);
    if nb == 0.0 {
        return Ok(Solve { x, residual: 0.0, iterations: 0 });
    }
    let mut total = 0;
    loop {
        let r = b - m * &x;
        let beta = r.norm();
        if beta / nb <= tol {
            return Ok(Solve { x, residual: beta / nb, iterations: total });
        }
        if total >= max_iter {
            return Err(Error::NonConvergence { iterations: total, residual: beta / nb });
        }
        let k = restart.min(max_iter - total);
        let mut v: Vec<DVector<f64>> = vec![r / beta];
        let mut h = DMatrix::<f64>::zeros(k + 1, k);
        let (mut cs, mut sn) = (vec![0.0; k], vec![0.0; k]);
        let mut g = DVector::<f64>::zeros(k + 1);
        g[0] = beta;
        let mut used = 0;
        for j in 0..k {
            let mut w = m * &v[j];
            for (i, vi) in v.iter().enumerate() {
                h[(i, j)] = w.dot(vi);
                w.axpy(-h[(i, j)], vi, 1.0);
            }
            let nw = w.norm();
            h[(j + 1, j)] = nw;
            let breakdown = nw <= 1e-14 * beta;
            if !breakdown {
                v.push(w / nw);
            }
            for i in 0..j {
                let t = cs[i] * h[(i, j)] + sn[i] * h[(i + 1, j)];
                h[(i + 1, j)] = -sn[i] * h[(i, j)] + cs[i] * h[(i + 1, j)];
                h[(i, j)] = t;
            }
            let d = h[(j, j)].hypot(h[(j + 1, j)]);
            cs[j] = h[(j, j)] / d;
            sn[j] = h[(j + 1, j)] / d;
            h[(j, j)] = d;
            h[(j + 1, j)] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            used = j + 1;
            total += 1;
            if g[j + 1].abs() / nb <= tol || breakdown {
                break;
            }
        }
        let mut y = DVector::<f64>::zeros(used);
        for i in (0..used).rev() {
            let mut s = g[i];
            for l in i + 1..used {
                s -= h[(i, l)] * y[l];
            }
            y[i] = s / h[(i, i)];
        }
        for (i, yi) in y.iter().enumerate() {
            x.axpy(*yi, &v[i], 1.0);
        }
    }
}

/// Singular values, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// 2-norm condition number `s_max / s_min`.
pub fn condition(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    s[0] / s[s.len() - 1]
}

/// `W^(1/2) M W^(-1/2)`: the matrix of `M` in an orthonormal basis of `L^2(w)`.
pub fn weighted(m: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * (w[i] / w[j]).sqrt())
}

/// Orthonormal basis of the complement of `v` (columns).
pub fn complement_basis(v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    // Householder reflector mapping v / |v| to e_0; its remaining columns span v-perp.
    let u = v / v.norm();
    let mut e = u.clone();
    let s = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    e[0] += s;
    let ne = e.norm();
    let hh = DMatrix::<f64>::identity(n, n) - (&e * e.transpose()) * (2.0 / (ne * ne));
    hh.columns(1, n - 1).into_owned()
}

/// Singular values of `M` on `L^2(w)` restricted to `w`-mean-zero functions.
pub fn singular_values_mean_zero(m: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    let b = weighted(m, w);
    let sqrt_w = DVector::from_iterator(w.len(), w.iter().map(|x| x.sqrt()));
    let q = complement_basis(&sqrt_w);
    singular_values(&(q.transpose() * b * &q))
}

/// Hager-Higham estimate of the 1-norm condition number.
pub fn condition_estimate(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    let lu = m.clone().lu();
    let lu_t = m.transpose().lu();
    let norm1 = (0..n).map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut est = 0.0;
    for _ in 0..6 {
        let y = lu.solve(&x).ok_or(Error::IllConditioned { condition: f64::INFINITY })?;
        est = y.iter().map(|v| v.abs()).sum::<f64>();
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let z = lu_t.solve(&xi).ok_or(Error::IllConditioned { condition: f64::INFINITY })?;
        let (jmax, zmax) = z.iter().enumerate().fold((0, 0.0f64), |acc, (j, v)| if v.abs() > acc.1 { (j, v.abs()) } else { acc });
        if zmax <= z.dot(&x) {
            break;
        }
        x = DVector::zeros(n);
        x[jmax] = 1.0;
    }
    Ok(norm1 * est)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_matrix(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| if i == j { 2.0 + i as f64 * 0.01 } else { 1.0 / (1.0 + (i as f64 - j as f64).abs()).powi(2) })
    }

    #[test]
    fn gmres_matches_lu() {
        let m = test_matrix(60);
        let b = DVector::from_fn(60, |i, _| (i as f64).sin());
        let d = solve_direct(&m, &b).unwrap();
        let g = gmres(&m, &b, 1e-12, 10, 500).unwrap();
        assert!((&d.x - &g.x).norm() < 1e-9 * d.x.norm());
        assert!(g.residual <= 1e-12);
    }

    #[test]
    fn gmres_reports_nonconvergence() {
        let m = test_matrix(60);
        let b = DVector::from_element(60, 1.0);
        assert!(matches!(gmres(&m, &b, 1e-14, 2, 3), Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn complement_is_orthonormal() {
        let v = DVector::from_vec(vec![1.0, 2.0, 0.5, -1.0]);
        let q = complement_basis(&v);
        assert!((q.transpose() * &q - DMatrix::<f64>::identity(3, 3)).norm() < 1e-14);
        assert!((q.transpose() * v).norm() < 1e-14);
    }

    #[test]
    fn hager_estimate_is_a_lower_bound_close_to_exact() {
        let m = test_matrix(40);
        let inv = m.clone().try_inverse().unwrap();
        let n1 = |a: &DMatrix<f64>| (0..a.ncols()).map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let exact = n1(&m) * n1(&inv);
        let est = condition_estimate(&m).unwrap();
        assert!(est <= exact * (1.0 + 1e-12) && est >= 0.3 * exact);
    }

    #[test]
    fn condition_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 0.5]));
        assert!((condition(&m) - 8.0).abs() < 1e-13);
    }
}
