//! Corrector cell problem on the unit torus and the homogenized matrix.
//!
//! Sign convention: the corrector solves `L(chi_j) = L(y_j)` with zero mean, so
//! the oscillating solution of `L_eps w = 0` is `w_j = x_j - eps chi_j(x/eps)`
//! (not `x_j + eps chi_j`). The homogenized matrix is
//! `A0_ij = mean(a_ik (delta_kj - d_k chi_j))`.
//!
//! The cell problem is discretized by a Fourier-Galerkin method with modes
//! `|k|_inf <= cutoff`. Operator applications are pseudo-spectral on a grid
//! large enough that products with the (band-limited) coefficients are exact,
//! so the discrete operator is the exact Galerkin matrix.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::coeff::CoefficientField;
use crate::error::{invalid, Error, Result};
use crate::field::SolutionField;
use crate::small::{max_asymmetry, sym_eigenvalues, Mat, Point, Vector};

pub const DEFAULT_CUTOFF_2D: usize = 32;
pub const DEFAULT_CUTOFF_3D: usize = 16;
pub const DEFAULT_TOL_2D: f64 = 1e-10;
pub const DEFAULT_TOL_3D: f64 = 1e-8;
const MAX_ITERATIONS: usize = 2000;

pub fn default_cutoff(dim: usize) -> usize {
    if dim == 2 {
        DEFAULT_CUTOFF_2D
    } else {
        DEFAULT_CUTOFF_3D
    }
}

pub fn default_tol(dim: usize) -> f64 {
    if dim == 2 {
        DEFAULT_TOL_2D
    } else {
        DEFAULT_TOL_3D
    }
}

/// Torus-periodic correctors `chi_j`, `j = 1..d`, as truncated Fourier series.
#[derive(Clone, Debug)]
pub struct CorrectorField<const D: usize> {
    cutoff: usize,
    /// In-band coefficients `(k, [c_1k, ..., c_dk])`, all nonzero `k` with `|k|_inf <= cutoff`.
    table: Vec<([i32; D], [Complex64; D])>,
    /// Pruned half-spectrum used for evaluation: `chi = sum 2 Re(c_k e^{2 pi i k.y})`.
    half: Vec<([i32; D], [Complex64; D])>,
    residual: f64,
    iterations: usize,
    field_fingerprint: u64,
}

/// Constant effective coefficients `A0`.
#[derive(Clone, Debug, PartialEq)]
pub struct HomogenizedMatrix<const D: usize> {
    pub matrix: Mat<D>,
    pub cutoff: usize,
    pub residual: f64,
}

struct Grid<const D: usize> {
    m: usize,
    len: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    /// Wave vector per grid index.
    waves: Vec<[i32; D]>,
}

impl<const D: usize> Grid<D> {
    fn new(m: usize) -> Self {
        let mut planner = FftPlanner::new();
        let len = m.pow(D as u32);
        let waves = (0..len)
            .map(|mut idx| {
                let mut k = [0i32; D];
                for c in (0..D).rev() {
                    let i = (idx % m) as i32;
                    k[c] = if i <= m as i32 / 2 { i } else { i - m as i32 };
                    idx /= m;
                }
                k
            })
            .collect();
        Self { m, len, fft: planner.plan_fft_forward(m), ifft: planner.plan_fft_inverse(m), waves }
    }

    fn point(&self, mut idx: usize) -> Point<D> {
        let mut p = Point::<D>::zeros();
        for c in (0..D).rev() {
            p[c] = (idx % self.m) as f64 / self.m as f64;
            idx /= self.m;
        }
        p
    }

    /// In-place multidimensional transform; forward transforms are normalized
    /// so that they return Fourier coefficients.
    fn transform(&self, data: &mut [Complex64], forward: bool) {
        let m = self.m;
        let plan = if forward { &self.fft } else { &self.ifft };
        let mut line = vec![Complex64::new(0.0, 0.0); m];
        let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        for axis in 0..D {
            let stride = m.pow((D - 1 - axis) as u32);
            for base in 0..self.len {
                if (base / stride) % m != 0 {
                    continue;
                }
                for (t, v) in line.iter_mut().enumerate() {
                    *v = data[base + t * stride];
                }
                plan.process_with_scratch(&mut line, &mut scratch);
                for (t, v) in line.iter().enumerate() {
                    data[base + t * stride] = *v;
                }
            }
        }
        if forward {
            let s = 1.0 / self.len as f64;
            data.iter_mut().for_each(|v| *v *= s);
        }
    }
}

struct CellOperator<'a, const D: usize> {
    grid: &'a Grid<D>,
    /// `a_ij` sampled on the grid, indexed `[i * D + j][n]`.
    coeff: Vec<Vec<f64>>,
    band: Vec<bool>,
    mean_diag: f64,
}

impl<const D: usize> CellOperator<'_, D> {
    /// `-div(A grad u)` in Fourier space; `project` restricts to the band.
    fn apply(&self, u: &[Complex64], project: bool) -> Vec<Complex64> {
        let g = self.grid;
        let two_pi_i = Complex64::new(0.0, 2.0 * PI);
        let grads: Vec<Vec<f64>> = (0..D)
            .map(|j| {
                let mut buf: Vec<Complex64> =
                    u.iter().zip(&g.waves).map(|(c, k)| *c * two_pi_i * k[j] as f64).collect();
                g.transform(&mut buf, false);
                buf.into_iter().map(|c| c.re).collect()
            })
            .collect();
        let mut out = vec![Complex64::new(0.0, 0.0); g.len];
        for i in 0..D {
            let mut flux: Vec<Complex64> = (0..g.len)
                .map(|n| {
                    let mut s = 0.0;
                    for (j, gj) in grads.iter().enumerate() {
                        s += self.coeff[i * D + j][n] * gj[n];
                    }
                    Complex64::new(s, 0.0)
                })
                .collect();
            g.transform(&mut flux, true);
            for ((o, f), k) in out.iter_mut().zip(&flux).zip(&g.waves) {
                *o -= two_pi_i * k[i] as f64 * f;
            }
        }
        out[0] = Complex64::new(0.0, 0.0);
        if project {
            for (o, b) in out.iter_mut().zip(&self.band) {
                if !b {
                    *o = Complex64::new(0.0, 0.0);
                }
            }
        }
        out
    }

    fn dual_norm(&self, r: &[Complex64]) -> f64 {
        r.iter()
            .zip(&self.grid.waves)
            .map(|(c, k)| {
                let k2: i64 = k.iter().map(|&v| (v as i64) * (v as i64)).sum();
                if k2 == 0 {
                    0.0
                } else {
                    c.norm_sqr() / (4.0 * PI * PI * k2 as f64)
                }
            })
            .sum::<f64>()
            .sqrt()
    }

    fn precondition(&self, r: &[Complex64]) -> Vec<Complex64> {
        r.iter()
            .zip(&self.grid.waves)
            .map(|(c, k)| {
                let k2: i64 = k.iter().map(|&v| (v as i64) * (v as i64)).sum();
                if k2 == 0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    c / (4.0 * PI * PI * k2 as f64 * self.mean_diag)
                }
            })
            .collect()
    }
}

fn dot(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.conj() * y).re).sum()
}

fn grid_size(cutoff: usize, bandwidth: usize) -> usize {
    (2 * (cutoff + bandwidth) + 2).next_power_of_two().max(8)
}

/// Solves the cell problem for every direction.
pub fn solve_cell<const D: usize>(field: &CoefficientField<D>, cutoff: usize, tol: f64) -> Result<CorrectorField<D>> {
    if cutoff < 4 {
        return Err(invalid("cutoff", "must be at least 4"));
    }
    if !(tol > 0.0) {
        return Err(invalid("tol", "must be positive"));
    }
    let grid = Grid::<D>::new(grid_size(cutoff, field.bandwidth()));
    let samples: Vec<Mat<D>> = (0..grid.len).map(|n| field.eval(&grid.point(n))).collect();
    let coeff: Vec<Vec<f64>> = (0..D * D).map(|ij| samples.iter().map(|a| a[(ij / D, ij % D)]).collect()).collect();
    let band: Vec<bool> = grid
        .waves
        .iter()
        .map(|k| k.iter().all(|v| v.unsigned_abs() as usize <= cutoff) && k.iter().any(|&v| v != 0))
        .collect();
    let mean_diag = samples.iter().map(|a| a.trace()).sum::<f64>() / (grid.len * D) as f64;
    let op = CellOperator { grid: &grid, coeff, band, mean_diag };

    let solutions: Vec<Result<(Vec<Complex64>, f64, usize)>> =
        (0..D).into_par_iter().map(|j| solve_direction(&op, j, tol)).collect();
    let mut coeffs = Vec::with_capacity(D);
    let (mut residual, mut iterations) = (0.0f64, 0usize);
    for s in solutions {
        let (c, r, it) = s?;
        residual = residual.max(r);
        iterations = iterations.max(it);
        coeffs.push(c);
    }

    let mut table = Vec::new();
    for (n, k) in grid.waves.iter().enumerate() {
        if op.band[n] {
            let mut c = [Complex64::new(0.0, 0.0); D];
            for j in 0..D {
                c[j] = coeffs[j][n];
            }
            table.push((*k, c));
        }
    }
    table.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(CorrectorField::from_table(cutoff, table, residual, iterations, field.fingerprint()))
}

fn solve_direction<const D: usize>(op: &CellOperator<'_, D>, dir: usize, tol: f64) -> Result<(Vec<Complex64>, f64, usize)> {
    let g = op.grid;
    // L(y_dir) = -sum_i d_i a_{i,dir}
    let mut a_hat: Vec<Vec<Complex64>> = (0..D)
        .map(|i| op.coeff[i * D + dir].iter().map(|&v| Complex64::new(v, 0.0)).collect())
        .collect();
    for a in a_hat.iter_mut() {
        g.transform(a, true);
    }
    let two_pi_i = Complex64::new(0.0, 2.0 * PI);
    let rhs_full: Vec<Complex64> = (0..g.len)
        .map(|n| {
            if n == 0 {
                return Complex64::new(0.0, 0.0);
            }
            let mut s = Complex64::new(0.0, 0.0);
            for (i, a) in a_hat.iter().enumerate() {
                s -= two_pi_i * g.waves[n][i] as f64 * a[n];
            }
            s
        })
        .collect();
    let rhs: Vec<Complex64> =
        rhs_full.iter().zip(&op.band).map(|(v, b)| if *b { *v } else { Complex64::new(0.0, 0.0) }).collect();

    let mut x = vec![Complex64::new(0.0, 0.0); g.len];
    let mut r = rhs.clone();
    let cg_tol = 1e-3 * tol;
    let mut iterations = 0;
    if op.dual_norm(&r) > cg_tol {
        let mut z = op.precondition(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        loop {
            iterations += 1;
            let ap = op.apply(&p, true);
            let alpha = rz / dot(&p, &ap);
            for n in 0..g.len {
                x[n] += alpha * p[n];
                r[n] -= alpha * ap[n];
            }
            let res = op.dual_norm(&r);
            if res <= cg_tol {
                break;
            }
            if iterations >= MAX_ITERATIONS {
                return Err(Error::NonConvergence { iterations, residual: res });
            }
            z = op.precondition(&r);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for n in 0..g.len {
                p[n] = z[n] + beta * p[n];
            }
        }
    }
    // Full residual, including the part of L(chi) that falls outside the band.
    let lx = op.apply(&x, false);
    let full: Vec<Complex64> = lx.iter().zip(&rhs_full).map(|(a, b)| a - b).collect();
    let residual = op.dual_norm(&full);
    if residual > tol {
        let cutoff = op.band.iter().zip(&g.waves).filter(|(b, _)| **b).map(|(_, k)| k[0].unsigned_abs()).max().unwrap_or(0);
        return Err(Error::CutoffTooSmall { cutoff: cutoff as usize, residual, tol });
    }
    Ok((x, residual, iterations))
}

impl<const D: usize> CorrectorField<D> {
    pub(crate) fn from_table(
        cutoff: usize,
        table: Vec<([i32; D], [Complex64; D])>,
        residual: f64,
        iterations: usize,
        field_fingerprint: u64,
    ) -> Self {
        let max = table.iter().flat_map(|(_, c)| c.iter().map(|v| v.norm())).fold(0.0, f64::max);
        let half = table
            .iter()
            .filter(|(k, c)| {
                let first = k.iter().find(|&&v| v != 0).copied().unwrap_or(0);
                first > 0 && c.iter().any(|v| v.norm() > 1e-17 * max.max(1e-300))
            })
            .cloned()
            .collect();
        Self { cutoff, table, half, residual, iterations, field_fingerprint }
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    /// Residual of the cell equation in the discrete `H^-1` norm.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn field_fingerprint(&self) -> u64 {
        self.field_fingerprint
    }

    pub fn table(&self) -> &[([i32; D], [Complex64; D])] {
        &self.table
    }

    /// Zeroth Fourier coefficient; zero by construction.
    pub fn mean(&self) -> [f64; D] {
        [0.0; D]
    }

    fn phases(&self, y: &Point<D>) -> Vec<Vec<Complex64>> {
        let n = self.cutoff as i32;
        (0..D)
            .map(|c| {
                let t = y[c].rem_euclid(1.0);
                (-n..=n).map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 * t)).collect()
            })
            .collect()
    }

    /// `(chi_1(y), ..., chi_d(y))` and the matrix `G_ij = d_i chi_j(y)`.
    pub fn eval(&self, y: &Point<D>) -> (Vector<D>, Mat<D>) {
        let tables = self.phases(y);
        let n = self.cutoff as i32;
        let mut val = Vector::<D>::zeros();
        let mut grad = Mat::<D>::zeros();
        for (k, c) in &self.half {
            let mut e = Complex64::new(1.0, 0.0);
            for d in 0..D {
                e *= tables[d][(k[d] + n) as usize];
            }
            for j in 0..D {
                let ce = c[j] * e;
                val[j] += 2.0 * ce.re;
                // d/dy_i of 2 Re(c e) = 2 Re(2 pi i k_i c e) = -4 pi k_i Im(c e)
                for i in 0..D {
                    grad[(i, j)] -= 4.0 * PI * k[i] as f64 * ce.im;
                }
            }
        }
        (val, grad)
    }

    pub fn value(&self, y: &Point<D>) -> Vector<D> {
        self.eval(y).0
    }

    pub fn gradient(&self, y: &Point<D>) -> Mat<D> {
        self.eval(y).1
    }

    /// Max of the Frobenius norm of `grad chi` on an `n^d` grid shifted by `offset`.
    pub fn gradient_bound_on(&self, n: usize, offset: &Point<D>) -> f64 {
        crate::coeff::grid_points::<D>(n).map(|y| self.gradient(&(y + offset)).norm()).fold(0.0, f64::max)
    }

    /// `max |grad chi|` on a 128-per-dimension (2D) or 48-per-dimension (3D) grid.
    pub fn gradient_bound(&self) -> f64 {
        let n = if D == 2 { 128 } else { 48 };
        self.gradient_bound_on(n, &Point::<D>::zeros())
    }
}

/// Computes `A0` by spectral quadrature on the solver grid.
pub fn homogenized_matrix<const D: usize>(
    field: &CoefficientField<D>,
    corr: &CorrectorField<D>,
) -> Result<HomogenizedMatrix<D>> {
    if field.fingerprint() != corr.field_fingerprint {
        return Err(Error::ProvenanceMismatch);
    }
    let grid = Grid::<D>::new(grid_size(corr.cutoff, field.bandwidth()));
    let two_pi_i = Complex64::new(0.0, 2.0 * PI);
    // d_k chi_j on the grid
    let mut dchi = vec![vec![0.0; grid.len]; D * D];
    let index_of = |k: &[i32; D]| -> usize {
        let mut idx = 0;
        for c in 0..D {
            idx = idx * grid.m + k[c].rem_euclid(grid.m as i32) as usize;
        }
        idx
    };
    for j in 0..D {
        for kdir in 0..D {
            let mut buf = vec![Complex64::new(0.0, 0.0); grid.len];
            for (k, c) in &corr.table {
                buf[index_of(k)] = two_pi_i * k[kdir] as f64 * c[j];
            }
            grid.transform(&mut buf, false);
            dchi[kdir * D + j] = buf.into_iter().map(|v| v.re).collect();
        }
    }
    let mut a0 = Mat::<D>::zeros();
    for n in 0..grid.len {
        let a = field.eval(&grid.point(n));
        for i in 0..D {
            for j in 0..D {
                let mut s = a[(i, j)];
                for k in 0..D {
                    s -= a[(i, k)] * dchi[k * D + j][n];
                }
                a0[(i, j)] += s;
            }
        }
    }
    a0 /= grid.len as f64;
    let asym = max_asymmetry(&a0);
    if asym > 1e-10 {
        return Err(Error::NotSymmetric { point: vec![], asymmetry: asym });
    }
    let a0 = (a0 + a0.transpose()) * 0.5;
    let ev = sym_eigenvalues(&a0);
    let mu = field.mu();
    if ev[0] < mu * (1.0 - 1e-9) || ev[D - 1] > (1.0 / mu) * (1.0 + 1e-9) {
        return Err(Error::NotElliptic { point: vec![], min_eigenvalue: ev[0] });
    }
    Ok(HomogenizedMatrix { matrix: a0, cutoff: corr.cutoff, residual: corr.residual })
}

/// Oscillating solution `w(x) = sum_i c_i (x_i - eps chi_i(x/eps))` of `L_eps w = 0`.
#[derive(Clone)]
pub struct CorrectorSolution<const D: usize> {
    corr: Arc<CorrectorField<D>>,
    field: Arc<CoefficientField<D>>,
    eps: f64,
    weights: Vector<D>,
}

/// `w_i^eps` for a single direction.
pub fn corrector_solution<const D: usize>(
    field: Arc<CoefficientField<D>>,
    corr: Arc<CorrectorField<D>>,
    eps: f64,
    direction: usize,
) -> Result<CorrectorSolution<D>> {
    if direction >= D {
        return Err(invalid("direction", format!("{direction} >= {D}")));
    }
    let mut w = Vector::<D>::zeros();
    w[direction] = 1.0;
    corrector_combination(field, corr, eps, w)
}

pub fn corrector_combination<const D: usize>(
    field: Arc<CoefficientField<D>>,
    corr: Arc<CorrectorField<D>>,
    eps: f64,
    weights: Vector<D>,
) -> Result<CorrectorSolution<D>> {
    if !(eps > 0.0) {
        return Err(invalid("eps", "must be positive"));
    }
    if field.fingerprint() != corr.field_fingerprint {
        return Err(Error::ProvenanceMismatch);
    }
    Ok(CorrectorSolution { corr, field, eps, weights })
}

impl<const D: usize> CorrectorSolution<D> {
    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Conormal derivative `n . A(x/eps) grad w(x)`.
    pub fn conormal(&self, x: &Point<D>, n: &Vector<D>) -> f64 {
        n.dot(&(self.field.eval_scaled(x, self.eps) * self.gradient(x)))
    }
}

impl<const D: usize> SolutionField<D> for CorrectorSolution<D> {
    fn value(&self, x: &Point<D>) -> f64 {
        let chi = self.corr.value(&(x / self.eps));
        self.weights.dot(&(x - chi * self.eps))
    }

    fn gradient(&self, x: &Point<D>) -> Vector<D> {
        let g = self.corr.gradient(&(x / self.eps));
        // grad w_j = e_j - G e_j  with G_ij = d_i chi_j
        self.weights - g * self.weights
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{make_field, FieldDescriptor};
    use crate::quad::integrate;

    fn layered() -> CoefficientField<2> {
        make_field::<2>(&FieldDescriptor::layered(2, 0, 2.0, 1.0)).unwrap()
    }

    /// Harmonic mean of `2 + sin(2 pi y)` by composite Gauss quadrature.
    fn harmonic_mean() -> f64 {
        1.0 / integrate(|y| 1.0 / (2.0 + (2.0 * PI * y).sin()), 0.0, 1.0, 64, 10)
    }

    #[test]
    fn identity_has_vanishing_correctors() {
        let f = make_field::<2>(&FieldDescriptor::identity(2)).unwrap();
        let c = solve_cell(&f, 8, 1e-10).unwrap();
        assert_eq!(c.residual(), 0.0);
        let (v, g) = c.eval(&Point::<2>::new(0.3, 0.7));
        assert_eq!(v.norm(), 0.0);
        assert_eq!(g.norm(), 0.0);
        let a0 = homogenized_matrix(&f, &c).unwrap();
        assert!((a0.matrix - Mat::<2>::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn layered_matches_one_dimensional_oracle() {
        let f = layered();
        let c = solve_cell(&f, DEFAULT_CUTOFF_2D, DEFAULT_TOL_2D).unwrap();
        let abar = harmonic_mean();
        assert!((abar - 3f64.sqrt()).abs() < 1e-13);
        // chi_1(y) = int_0^y (1 - abar / a) - mean, by quadrature.
        let prim = |y: f64| integrate(|t| 1.0 - abar / (2.0 + (2.0 * PI * t).sin()), 0.0, y, 32, 10);
        let mean = integrate(prim, 0.0, 1.0, 16, 10);
        for j in 0..20 {
            let y = j as f64 / 20.0 + 0.013;
            let expect = prim(y) - mean;
            let (v, g) = c.eval(&Point::<2>::new(y, 0.37));
            assert!((v[0] - expect).abs() < 1e-8, "y={y}: {} vs {expect}", v[0]);
            assert!(v[1].abs() < 1e-12, "transverse corrector must vanish");
            assert!(g[(1, 0)].abs() < 1e-12);
        }
        let a0 = homogenized_matrix(&f, &c).unwrap();
        assert!((a0.matrix[(0, 0)] - abar).abs() < 1e-6);
        assert!((a0.matrix[(1, 1)] - 2.0).abs() < 1e-6);
        assert!(a0.matrix[(0, 1)].abs() < 1e-10);
    }

    #[test]
    fn gradient_bound_for_laminate() {
        let c = solve_cell(&layered(), 32, 1e-10).unwrap();
        let expect = 3f64.sqrt() - 1.0;
        assert!((c.gradient_bound() - expect).abs() < 1e-8);
        let shifted = c.gradient_bound_on(128, &Point::<2>::new(1.0, -2.0));
        assert!((shifted - c.gradient_bound()).abs() < 1e-12);
    }

    #[test]
    fn trig_field_a0_symmetric_and_bracketed() {
        let f = make_field::<2>(&FieldDescriptor::trig_test(2)).unwrap();
        let c = solve_cell(&f, 24, 1e-10).unwrap();
        let a0 = homogenized_matrix(&f, &c).unwrap();
        assert!(max_asymmetry(&a0.matrix) < 1e-10);
        let ev = sym_eigenvalues(&a0.matrix);
        assert!(ev[0] >= f.mu() && ev[1] <= 1.0 / f.mu());
        // Voigt bound: A0 <= mean(A) in the quadratic-form sense.
        let gap = sym_eigenvalues(&(f.mean() - a0.matrix));
        assert!(gap[0] > -1e-12);
        // refinement stability
        let c2 = solve_cell(&f, 48, 1e-10).unwrap();
        let a02 = homogenized_matrix(&f, &c2).unwrap();
        let change = (a02.matrix - a0.matrix).abs().max();
        assert!(change <= 10.0 * c.residual().max(f64::EPSILON), "{change} vs {}", c.residual());
    }

    #[test]
    fn mismatched_provenance_rejected() {
        let c = solve_cell(&layered(), 8, 1e-4).unwrap();
        let other = make_field::<2>(&FieldDescriptor::identity(2)).unwrap();
        assert!(matches!(homogenized_matrix(&other, &c), Err(Error::ProvenanceMismatch)));
    }

    #[test]
    fn small_cutoff_rejected() {
        assert!(solve_cell(&layered(), 3, 1e-6).is_err());
        // cutoff 4 cannot reach 1e-12 for the laminate (mode decay 0.27^k)
        assert!(matches!(solve_cell(&layered(), 4, 1e-12), Err(Error::CutoffTooSmall { .. })));
    }

    #[test]
    fn transverse_corrector_solution_is_linear() {
        let f = Arc::new(layered());
        let c = Arc::new(solve_cell(&f, 32, 1e-10).unwrap());
        let w2 = corrector_solution(f.clone(), c.clone(), 0.25, 1).unwrap();
        let x = Point::<2>::new(0.31, 0.77);
        assert!((w2.value(&x) - 0.77).abs() < 1e-12);
        assert!((w2.gradient(&x) - Vector::<2>::new(0.0, 1.0)).norm() < 1e-12);
        // Flux of w1 through a vertical line is the harmonic mean.
        let w1 = corrector_solution(f, c, 0.25, 0).unwrap();
        let flux = w1.conormal(&x, &Vector::<2>::new(1.0, 0.0));
        assert!((flux - 3f64.sqrt()).abs() < 1e-9);
    }
}
