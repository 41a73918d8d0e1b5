//! Fundamental solutions.
//!
//! [`ConstKernel`] is the closed-form fundamental solution `Theta(X, Y; E)` of
//! `-div(E grad)` for a constant symmetric positive definite `E`:
//!
//! * `d = 3`: `Theta = 1 / (4 pi sqrt(det E) sqrt(q))`,
//! * `d = 2`: `Theta = -ln(q) / (4 pi sqrt(det E))`,
//!
//! with `q = (X - Y) . E^-1 (X - Y)`.
//!
//! [`TwoScaleKernel`] approximates the fundamental solution of
//! `-div(A(x/eps) grad)` by freezing coefficients near the pole and by the
//! homogenized kernel with a corrector factor far from it.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::cell::{CorrectorField, HomogenizedMatrix};
use crate::coeff::CoefficientField;
use crate::error::{invalid, Error, Result};
use crate::small::{det, inverse, max_asymmetry, sym_eigenvalues, sym_norm, Mat, Point, Vector};

/// Argument slot for gradients of `Theta(X, Y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstKernel<const D: usize> {
    e: Mat<D>,
    e_inv: Mat<D>,
    sqrt_det: f64,
    c: f64,
}

impl<const D: usize> ConstKernel<D> {
    pub fn new(e: Mat<D>) -> Result<Self> {
        if D != 2 && D != 3 {
            return Err(Error::DimensionMismatch { expected: 3, found: D });
        }
        let asym = max_asymmetry(&e);
        if asym > 1e-12 * sym_norm(&e).max(1.0) {
            return Err(Error::NotSymmetric { point: vec![], asymmetry: asym });
        }
        let ev = sym_eigenvalues(&e);
        if !(ev[0] > 0.0) || e.cholesky().is_none() {
            return Err(Error::NotElliptic { point: vec![], min_eigenvalue: ev[0] });
        }
        Ok(Self::new_unchecked(e))
    }

    pub(crate) fn new_unchecked(e: Mat<D>) -> Self {
        let sqrt_det = det(&e).sqrt();
        Self { e, e_inv: inverse(&e), sqrt_det, c: 1.0 / (4.0 * PI * sqrt_det) }
    }

    pub fn laplace() -> Self {
        Self::new_unchecked(Mat::<D>::identity())
    }

    pub fn matrix(&self) -> &Mat<D> {
        &self.e
    }

    pub fn inverse_matrix(&self) -> &Mat<D> {
        &self.e_inv
    }

    pub fn sqrt_det(&self) -> f64 {
        self.sqrt_det
    }

    /// `z . E^-1 z`.
    #[inline]
    pub fn quad_form(&self, z: &Vector<D>) -> f64 {
        z.dot(&(self.e_inv * z))
    }

    /// `Theta(z, 0)` without the coincidence check.
    #[inline]
    pub fn value_at(&self, z: &Vector<D>) -> f64 {
        let q = self.quad_form(z);
        if D == 3 {
            self.c / q.sqrt()
        } else {
            -self.c * q.ln()
        }
    }

    /// `grad Theta(z, 0)`.
    #[inline]
    pub fn grad_at(&self, z: &Vector<D>) -> Vector<D> {
        let bz = self.e_inv * z;
        let q = z.dot(&bz);
        if D == 3 {
            bz * (-self.c / (q * q.sqrt()))
        } else {
            bz * (-2.0 * self.c / q)
        }
    }

    /// Hessian of `Theta(z, 0)` in `z`.
    pub fn hessian_at(&self, z: &Vector<D>) -> Mat<D> {
        let bz = self.e_inv * z;
        let q = z.dot(&bz);
        let outer = bz * bz.transpose();
        if D == 3 {
            let q32 = q * q.sqrt();
            (self.e_inv / q32 - outer * (3.0 / (q32 * q))) * (-self.c)
        } else {
            (self.e_inv / q - outer * (2.0 / (q * q))) * (-2.0 * self.c)
        }
    }

    /// `n . E grad Theta(z, 0)`.
    #[inline]
    pub fn conormal_at(&self, z: &Vector<D>, n: &Vector<D>) -> f64 {
        let q = self.quad_form(z);
        let nz = n.dot(z);
        if D == 3 {
            -self.c * nz / (q * q.sqrt())
        } else {
            -2.0 * self.c * nz / q
        }
    }

    pub fn theta(&self, x: &Point<D>, y: &Point<D>) -> Result<f64> {
        if x == y {
            return Err(Error::SingularEvaluation);
        }
        Ok(self.value_at(&(x - y)))
    }

    pub fn theta_grad(&self, x: &Point<D>, y: &Point<D>, slot: Slot) -> Result<Vector<D>> {
        if x == y {
            return Err(Error::SingularEvaluation);
        }
        let g = self.grad_at(&(x - y));
        Ok(match slot {
            Slot::First => g,
            Slot::Second => -g,
        })
    }

    /// Outward flux `-int n . E grad Theta` over the sphere of radius `r`
    /// around the pole, by product Gauss/trapezoid quadrature.
    pub fn sphere_flux(&self, r: f64, n_theta: usize) -> f64 {
        if D == 2 {
            let h = 2.0 * PI / n_theta as f64;
            (0..n_theta)
                .map(|k| {
                    let t = k as f64 * h;
                    let mut n = Vector::<D>::zeros();
                    n[0] = t.cos();
                    n[1] = t.sin();
                    -self.conormal_at(&(n * r), &n) * r * h
                })
                .sum()
        } else {
            let (nodes, weights) = crate::quad::gauss_legendre(n_theta);
            let n_phi = 2 * n_theta;
            let h = 2.0 * PI / n_phi as f64;
            let mut total = 0.0;
            for (c, w) in nodes.iter().zip(&weights) {
                let s = (1.0 - c * c).sqrt();
                for k in 0..n_phi {
                    let p = k as f64 * h;
                    let mut n = Vector::<D>::zeros();
                    n[0] = s * p.cos();
                    n[1] = s * p.sin();
                    n[2] = *c;
                    total -= self.conormal_at(&(n * r), &n) * r * r * w * h;
                }
            }
            total
        }
    }
}

/// Normalized difference quotient
/// `|grad^N Theta(X; E) - grad^N Theta(X; E~)| |X|^(d-2+N) / |E - E~|`.
pub fn theta_family_difference<const D: usize>(e: &Mat<D>, e_tilde: &Mat<D>, x: &Point<D>, order: usize) -> Result<f64> {
    if order > 1 {
        return Err(invalid("order", "must be 0 or 1"));
    }
    if x.norm() == 0.0 {
        return Err(Error::SingularEvaluation);
    }
    let norm = sym_norm(&(e - e_tilde));
    if norm == 0.0 {
        return Ok(0.0);
    }
    let (k, kt) = (ConstKernel::new(*e)?, ConstKernel::new(*e_tilde)?);
    let diff = if order == 0 {
        (k.value_at(x) - kt.value_at(x)).abs()
    } else {
        (k.grad_at(x) - kt.grad_at(x)).norm()
    };
    Ok(diff * x.norm().powi(D as i32 - 2 + order as i32) / norm)
}

/// Coefficient data at one point, reused across kernel evaluations.
#[derive(Clone, Debug)]
pub struct PointData<const D: usize> {
    /// `A(x / eps)`.
    pub a: Mat<D>,
    /// Frozen kernel `Theta(.; A(x / eps))`.
    pub frozen: ConstKernel<D>,
    /// Far-field factor `I - grad chi(x / eps)`.
    pub factor: Mat<D>,
    /// `eps chi(x / eps)`, so that the far field sees `x - shift`.
    pub shift: Vector<D>,
    /// Constant added to the frozen kernel value (2D) so that it matches the
    /// homogenized kernel at distance `eps`.
    pub log_shift: f64,
}

/// Approximate fundamental solution of `-div(A(x/eps) grad)`.
#[derive(Clone)]
pub struct TwoScaleKernel<const D: usize> {
    field: Arc<CoefficientField<D>>,
    corr: Arc<CorrectorField<D>>,
    homogenized: ConstKernel<D>,
    eps: f64,
    constant: bool,
}

impl<const D: usize> TwoScaleKernel<D> {
    pub fn new(
        field: Arc<CoefficientField<D>>,
        corr: Arc<CorrectorField<D>>,
        a0: &HomogenizedMatrix<D>,
        eps: f64,
    ) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(invalid("eps", "must be positive"));
        }
        if corr.field_fingerprint() != field.fingerprint() {
            return Err(Error::ProvenanceMismatch);
        }
        let constant = field.is_constant();
        let homogenized = ConstKernel::new(if constant { field.mean() } else { a0.matrix })?;
        Ok(Self { field, corr, homogenized, eps, constant })
    }

    /// Solves the cell problem with default settings and builds the kernel.
    pub fn from_field(field: Arc<CoefficientField<D>>, eps: f64) -> Result<Self> {
        let corr = Arc::new(crate::cell::solve_cell(&field, crate::cell::default_cutoff(D), crate::cell::default_tol(D))?);
        let a0 = crate::cell::homogenized_matrix(&field, &corr)?;
        Self::new(field, corr, &a0, eps)
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(invalid("eps", "must be positive"));
        }
        Ok(Self { eps, ..self.clone() })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn field(&self) -> &Arc<CoefficientField<D>> {
        &self.field
    }

    pub fn corrector(&self) -> &Arc<CorrectorField<D>> {
        &self.corr
    }

    pub fn homogenized(&self) -> &ConstKernel<D> {
        &self.homogenized
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    /// Identifier of the kernel: field fingerprint, scale, and cutoff.
    pub fn id(&self) -> String {
        format!("twoscale:{:016x}:eps={:e}:n={}", self.field.fingerprint(), self.eps, self.corr.cutoff())
    }

    pub fn coefficient(&self, x: &Point<D>) -> Mat<D> {
        if self.constant {
            *self.homogenized.matrix()
        } else {
            self.field.eval_scaled(x, self.eps)
        }
    }

    pub fn point_data(&self, x: &Point<D>) -> PointData<D> {
        if self.constant {
            return PointData {
                a: *self.homogenized.matrix(),
                frozen: self.homogenized.clone(),
                factor: Mat::<D>::identity(),
                shift: Vector::<D>::zeros(),
                log_shift: 0.0,
            };
        }
        let a = self.field.eval_scaled(x, self.eps);
        let (chi, grad) = self.corr.eval(&(x / self.eps));
        let frozen = ConstKernel::new_unchecked(a);
        let log_shift = if D == 2 { (frozen.c - self.homogenized.c) * (self.eps * self.eps).ln() } else { 0.0 };
        PointData { a, frozen, factor: Mat::<D>::identity() - grad, shift: chi * self.eps, log_shift }
    }

    /// Blend weight of the far-field regime.
    #[inline]
    fn blend(&self, r: f64) -> f64 {
        let t = ((r - self.eps) / self.eps).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }

    /// `Gamma_eps(X, Y)` from cached point data.
    pub fn gamma_with(&self, px: &PointData<D>, py: &PointData<D>, x: &Point<D>, y: &Point<D>) -> f64 {
        let z = x - y;
        if self.constant {
            return self.homogenized.value_at(&z);
        }
        let s = self.blend(z.norm());
        let near = if s < 1.0 {
            0.5 * (px.frozen.value_at(&z) + py.frozen.value_at(&z) + px.log_shift + py.log_shift)
        } else {
            0.0
        };
        let far = if s > 0.0 { self.homogenized.value_at(&(z - px.shift + py.shift)) } else { 0.0 };
        (1.0 - s) * near + s * far
    }

    /// `grad_X Gamma_eps(X, Y)` from cached point data.
    pub fn grad_x_with(&self, px: &PointData<D>, py: &PointData<D>, x: &Point<D>, y: &Point<D>) -> Vector<D> {
        let z = x - y;
        if self.constant {
            return self.homogenized.grad_at(&z);
        }
        let s = self.blend(z.norm());
        let near = if s < 1.0 { px.frozen.grad_at(&z) } else { Vector::<D>::zeros() };
        let far = if s > 0.0 { px.factor * self.homogenized.grad_at(&(z - px.shift + py.shift)) } else { Vector::<D>::zeros() };
        near * (1.0 - s) + far * s
    }

    /// `grad_X [v . grad_Y Gamma_eps(X, Y)]` from cached point data; the blend
    /// weight and the coefficients are held fixed.
    pub fn grad_x_of_grad_y_with(&self, px: &PointData<D>, py: &PointData<D>, x: &Point<D>, y: &Point<D>, v: &Vector<D>) -> Vector<D> {
        let z = x - y;
        if self.constant {
            return -(self.homogenized.hessian_at(&z) * v);
        }
        let s = self.blend(z.norm());
        let near = if s < 1.0 { -(py.frozen.hessian_at(&z) * v) } else { Vector::<D>::zeros() };
        let far = if s > 0.0 {
            -(px.factor * (self.homogenized.hessian_at(&(z - px.shift + py.shift)) * (py.factor.transpose() * v)))
        } else {
            Vector::<D>::zeros()
        };
        near * (1.0 - s) + far * s
    }

    pub fn gamma_approx(&self, x: &Point<D>, y: &Point<D>) -> Result<f64> {
        if x == y {
            return Err(Error::SingularEvaluation);
        }
        Ok(self.gamma_with(&self.point_data(x), &self.point_data(y), x, y))
    }

    pub fn gamma_grad_x_approx(&self, x: &Point<D>, y: &Point<D>) -> Result<Vector<D>> {
        if x == y {
            return Err(Error::SingularEvaluation);
        }
        Ok(self.grad_x_with(&self.point_data(x), &self.point_data(y), x, y))
    }

    pub fn gamma_grad_y_approx(&self, x: &Point<D>, y: &Point<D>) -> Result<Vector<D>> {
        self.gamma_grad_x_approx(y, x)
    }

    /// `n . A(P/eps) grad_P Gamma_eps(P, Y)`, the kernel of `K`.
    pub fn conormal_kernel(&self, p: &Point<D>, n: &Vector<D>, y: &Point<D>) -> Result<f64> {
        if p == y {
            return Err(Error::SingularEvaluation);
        }
        Ok(self.conormal_with(&self.point_data(p), p, n, &self.point_data(y), y))
    }

    #[inline]
    pub fn conormal_with(&self, pd: &PointData<D>, p: &Point<D>, n: &Vector<D>, py: &PointData<D>, y: &Point<D>) -> f64 {
        let z = p - y;
        if self.constant {
            return self.homogenized.conormal_at(&z, n);
        }
        let s = self.blend(z.norm());
        let near = if s < 1.0 { pd.frozen.conormal_at(&z, n) } else { 0.0 };
        let far = if s > 0.0 { (pd.a * n).dot(&(pd.factor * self.homogenized.grad_at(&(z - pd.shift + py.shift)))) } else { 0.0 };
        (1.0 - s) * near + s * far
    }

    /// `Pi(X, Y) = grad_X Gamma_eps(X, Y) - grad_1 Theta(X, Y; A(X/eps))` for the implemented kernel.
    pub fn near_residual_pi(&self, x: &Point<D>, y: &Point<D>) -> Result<Vector<D>> {
        if x == y {
            return Err(Error::SingularEvaluation);
        }
        let pd = self.point_data(x);
        Ok(self.grad_x_with(&pd, &self.point_data(y), x, y) - pd.frozen.grad_at(&(x - y)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{homogenized_matrix, solve_cell};
    use crate::coeff::{make_field, FieldDescriptor};

    fn diag3(a: f64, b: f64, c: f64) -> Mat<3> {
        Mat::<3>::from_diagonal(&Vector::<3>::new(a, b, c))
    }

    #[test]
    fn laplace_values() {
        let k = ConstKernel::<3>::laplace();
        let x = Point::<3>::new(1.0, 0.0, 0.0);
        let o = Point::<3>::zeros();
        assert!((k.theta(&x, &o).unwrap() - 1.0 / (4.0 * PI)).abs() < 1e-16);
        let g = k.theta_grad(&x, &o, Slot::First).unwrap();
        assert!((g - Vector::<3>::new(-1.0 / (4.0 * PI), 0.0, 0.0)).norm() < 1e-16);
        assert_eq!(g + k.theta_grad(&x, &o, Slot::Second).unwrap(), Vector::<3>::zeros());
        let k2 = ConstKernel::new(diag3(4.0, 1.0, 1.0)).unwrap();
        assert!((k2.theta(&x, &o).unwrap() - 1.0 / (4.0 * PI)).abs() < 1e-16);
        assert!(matches!(k.theta(&o, &o), Err(Error::SingularEvaluation)));
    }

    #[test]
    fn rejects_indefinite() {
        assert!(ConstKernel::new(diag3(1.0, -1.0, 1.0)).is_err());
        assert!(ConstKernel::<2>::new(Mat::<2>::new(1.0, 0.5, 0.0, 1.0)).is_err());
    }

    #[test]
    fn unit_flux() {
        for r in [0.1, 1.0, 10.0] {
            let f = ConstKernel::<3>::new(diag3(4.0, 1.0, 1.0)).unwrap().sphere_flux(r, 48);
            assert!((f - 1.0).abs() < 1e-10, "{f}");
            let f2 = ConstKernel::<2>::new(Mat::<2>::new(4.0, 0.0, 0.0, 1.0)).unwrap().sphere_flux(r, 256);
            assert!((f2 - 1.0).abs() < 1e-10, "{f2}");
        }
    }

    #[test]
    fn gradient_and_hessian_match_differences() {
        let e = Mat::<3>::new(2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0);
        let k = ConstKernel::new(e).unwrap();
        let z = Vector::<3>::new(0.3, -0.2, 0.5);
        let h = 1e-5;
        for i in 0..3 {
            let mut dz = Vector::<3>::zeros();
            dz[i] = h;
            let fd = (k.value_at(&(z + dz)) - k.value_at(&(z - dz))) / (2.0 * h);
            assert!((fd - k.grad_at(&z)[i]).abs() < 1e-7 * k.grad_at(&z).norm());
            let fdg = (k.grad_at(&(z + dz)) - k.grad_at(&(z - dz))) / (2.0 * h);
            assert!((fdg - k.hessian_at(&z).column(i)).norm() < 1e-6 * k.hessian_at(&z).norm());
        }
        let e2 = Mat::<2>::new(2.0, 0.3, 0.3, 1.5);
        let k2 = ConstKernel::new(e2).unwrap();
        let z2 = Vector::<2>::new(0.3, -0.7);
        for i in 0..2 {
            let mut dz = Vector::<2>::zeros();
            dz[i] = h;
            let fdg = (k2.grad_at(&(z2 + dz)) - k2.grad_at(&(z2 - dz))) / (2.0 * h);
            assert!((fdg - k2.hessian_at(&z2).column(i)).norm() < 1e-6 * k2.hessian_at(&z2).norm());
        }
    }

    #[test]
    fn family_difference_limit() {
        let x = Point::<3>::new(0.0, 0.6, 0.8);
        let h = 1e-3;
        let q = theta_family_difference(&Mat::<3>::identity(), &(Mat::<3>::identity() * (1.0 + h)), &x, 0).unwrap();
        // Theta((1+h)I) = 1 / (4 pi (1+h) |X|)
        assert!((q - 1.0 / (4.0 * PI * (1.0 + h))).abs() < 1e-12);
        let e = Mat::<3>::identity();
        assert_eq!(theta_family_difference(&e, &e, &x, 1).unwrap(), 0.0);
        let et = diag3(2.0, 1.0, 0.7);
        let a = theta_family_difference(&e, &et, &x, 1).unwrap();
        let b = theta_family_difference(&e, &et, &(x * 2.0), 1).unwrap();
        assert!((a - b).abs() < 1e-14 * a);
    }

    fn trig_kernel(eps: f64) -> TwoScaleKernel<2> {
        let f = Arc::new(make_field::<2>(&FieldDescriptor::trig_test(2)).unwrap());
        let c = Arc::new(solve_cell(&f, 24, 1e-10).unwrap());
        let a0 = homogenized_matrix(&f, &c).unwrap();
        TwoScaleKernel::new(f, c, &a0, eps).unwrap()
    }

    #[test]
    fn twoscale_symmetry_and_regimes() {
        let k = trig_kernel(0.25);
        let x = Point::<2>::new(0.13, 0.41);
        for r in [0.1, 0.3, 0.45, 0.9] {
            let y = x + Vector::<2>::new(r * 0.6, r * 0.8);
            assert_eq!(k.gamma_approx(&x, &y).unwrap(), k.gamma_approx(&y, &x).unwrap());
            assert_eq!(k.gamma_grad_y_approx(&x, &y).unwrap(), k.gamma_grad_x_approx(&y, &x).unwrap());
        }
        let y = x + Vector::<2>::new(0.1, 0.0);
        assert_eq!(k.near_residual_pi(&x, &y).unwrap(), Vector::<2>::zeros());
        let frozen = ConstKernel::new(k.coefficient(&y)).unwrap();
        assert_eq!(k.gamma_grad_y_approx(&x, &y).unwrap(), frozen.theta_grad(&y, &x, Slot::First).unwrap());
    }

    #[test]
    fn twoscale_rescaling() {
        let k = trig_kernel(0.25);
        let k1 = k.with_eps(1.0).unwrap();
        let x = Point::<2>::new(0.13, 0.41);
        for r in [0.1, 0.3, 0.45, 0.9] {
            let y = x + Vector::<2>::new(r * 0.6, -r * 0.8);
            let g = k.gamma_grad_x_approx(&x, &y).unwrap();
            let g1 = k1.gamma_grad_x_approx(&(x / 0.25), &(y / 0.25)).unwrap() / 0.25;
            assert!((g - g1).norm() < 1e-13 * g.norm());
        }
    }

    #[test]
    fn twoscale_constant_is_exact() {
        let e = Mat::<2>::new(2.0, 0.5, 0.5, 1.0);
        let f = Arc::new(make_field::<2>(&FieldDescriptor::constant(vec![vec![2.0, 0.5], vec![0.5, 1.0]])).unwrap());
        let k = TwoScaleKernel::from_field(f, 0.1).unwrap();
        let c = ConstKernel::new(e).unwrap();
        let x = Point::<2>::new(0.0, 0.0);
        for r in [0.05, 0.15, 0.5] {
            let y = Point::<2>::new(r, 0.3 * r);
            assert_eq!(k.gamma_approx(&x, &y).unwrap(), c.theta(&x, &y).unwrap());
            assert_eq!(k.gamma_grad_x_approx(&x, &y).unwrap(), c.theta_grad(&x, &y, Slot::First).unwrap());
            assert_eq!(k.near_residual_pi(&x, &y).unwrap(), Vector::<2>::zeros());
        }
    }
}
