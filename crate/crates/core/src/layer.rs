//! Layer potentials and Nystrom boundary operators.
//!
//! Densities are piecewise constant and collocated at panel centroids. For a
//! density `g` the single and double layer potentials are
//!
//! * `S(g)(X) = int Gamma(X, Y) g(Y) dsigma(Y)`,
//! * `D(g)(X) = int n(Y) . A(Y/eps) grad_Y Gamma(X, Y) g(Y) dsigma(Y)`,
//!
//! and the boundary operators are `K` (kernel `n(P) . A(P/eps) grad_P Gamma(P, Y)`)
//! and its adjoint `K*`. Interior limits are taken from the `+` side:
//! `(dS(g)/dnu)_+ = (1/2 I + K) g` and `D(g)_+ = (-1/2 I + K*) g`.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{BoundaryFunction, BoundaryMesh, Panel};
use crate::kernel::{PointData, TwoScaleKernel};
use crate::small::{Point, Vector};

/// Panels farther than this many diameters use the one-point rule.
pub const FAR_FACTOR: f64 = 10.0;
/// Subpanels closer than this many diameters are split further.
const NEAR_FACTOR: f64 = 2.5;
const GAUSS_ORDER_2D: usize = 6;
const GAUSS_ORDER_3D: usize = 5;
const SELF_ORDER_3D: usize = 16;

fn unit_gauss(n: usize) -> Vec<(f64, f64)> {
    crate::quad::gauss_interval(n, 0.0, 1.0).collect()
}

fn gauss_2d() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| unit_gauss(GAUSS_ORDER_2D))
}

fn gauss_3d() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| unit_gauss(GAUSS_ORDER_3D))
}

fn gauss_self() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| unit_gauss(SELF_ORDER_3D))
}

/// Quadrature points `(y, weight)` on `panel` adapted to the target `x`.
pub fn panel_rule<const D: usize>(panel: &Panel<D>, x: &Point<D>, out: &mut Vec<(Point<D>, f64)>) {
    out.clear();
    if (x - panel.centroid).norm() > FAR_FACTOR * panel.diameter() {
        out.push((panel.centroid, panel.measure));
        return;
    }
    subdivide(panel, x, [0.0, 1.0], [0.0, 1.0], 0, out);
}

fn subdivide<const D: usize>(panel: &Panel<D>, x: &Point<D>, u: [f64; 2], v: [f64; 2], depth: usize, out: &mut Vec<(Point<D>, f64)>) {
    let du = u[1] - u[0];
    let dv = if D == 2 { 1.0 } else { v[1] - v[0] };
    let center = panel.point(0.5 * (u[0] + u[1]), 0.5 * (v[0] + v[1]));
    let diam = if D == 2 { panel.diameter() * du } else { (panel.span[0] * du).norm().hypot((panel.span[1] * dv).norm()) };
    let max_depth = if D == 2 { 40 } else { 12 };
    if (x - center).norm() > NEAR_FACTOR * diam || depth >= max_depth {
        let measure = panel.measure * du * dv;
        if D == 2 {
            for (t, w) in gauss_2d() {
                out.push((panel.point(u[0] + du * t, 0.0), measure * w));
            }
        } else {
            for (s, ws) in gauss_3d() {
                for (t, wt) in gauss_3d() {
                    out.push((panel.point(u[0] + du * s, v[0] + dv * t), measure * ws * wt));
                }
            }
        }
        return;
    }
    let um = 0.5 * (u[0] + u[1]);
    if D == 2 {
        subdivide(panel, x, [u[0], um], v, depth + 1, out);
        subdivide(panel, x, [um, u[1]], v, depth + 1, out);
    } else {
        let vm = 0.5 * (v[0] + v[1]);
        for uu in [[u[0], um], [um, u[1]]] {
            for vv in [[v[0], vm], [vm, v[1]]] {
                subdivide(panel, x, uu, vv, depth + 1, out);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorKind {
    SingleLayer,
    /// `K`, the conormal trace operator.
    Conormal,
    /// `K*`, the double layer trace operator.
    DoubleLayer,
}

impl OperatorKind {
    pub fn code(self) -> u8 {
        match self {
            OperatorKind::SingleLayer => 0,
            OperatorKind::Conormal => 1,
            OperatorKind::DoubleLayer => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(OperatorKind::SingleLayer),
            1 => Some(OperatorKind::Conormal),
            2 => Some(OperatorKind::DoubleLayer),
            _ => None,
        }
    }
}

/// Dense Nystrom matrix acting on per-panel values.
#[derive(Clone, Debug, PartialEq)]
pub struct BemOperator {
    pub kind: OperatorKind,
    pub matrix: DMatrix<f64>,
    pub mesh_id: u64,
    pub kernel_id: String,
    pub diagonal: String,
}

impl BemOperator {
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(g)).iter().copied().collect()
    }

    /// `matrix + shift I`.
    pub fn shifted(&self, shift: f64) -> DMatrix<f64> {
        let n = self.matrix.nrows();
        &self.matrix + DMatrix::<f64>::identity(n, n) * shift
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Interior limit.
    Plus,
    /// Exterior limit.
    Minus,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Plus => 1.0,
            Side::Minus => -1.0,
        }
    }
}

/// Mesh and kernel with coefficient data cached at panel nodes.
#[derive(Clone)]
pub struct BemSystem<const D: usize> {
    mesh: Arc<BoundaryMesh<D>>,
    kernel: TwoScaleKernel<D>,
    data: Vec<PointData<D>>,
}

impl<const D: usize> BemSystem<D> {
    pub fn new(mesh: Arc<BoundaryMesh<D>>, kernel: TwoScaleKernel<D>) -> Self {
        let data = mesh.panels().par_iter().map(|p| kernel.point_data(&p.centroid)).collect();
        Self { mesh, kernel, data }
    }

    pub fn mesh(&self) -> &Arc<BoundaryMesh<D>> {
        &self.mesh
    }

    pub fn kernel(&self) -> &TwoScaleKernel<D> {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.mesh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mesh.is_empty()
    }

    pub fn node_data(&self, i: usize) -> &PointData<D> {
        &self.data[i]
    }

    /// `b = 1 / (n . A n)` at each node.
    pub fn trace_coefficients(&self) -> Vec<f64> {
        self.mesh.panels().iter().zip(&self.data).map(|(p, d)| 1.0 / p.normal.dot(&(d.a * p.normal))).collect()
    }

    fn dense(&self, entry: impl Fn(usize, usize) -> f64 + Sync) -> DMatrix<f64> {
        let n = self.len();
        let mut rows = vec![0.0; n * n];
        rows.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for (j, r) in row.iter_mut().enumerate() {
                *r = entry(i, j);
            }
        });
        DMatrix::from_row_slice(n, n, &rows)
    }

    /// Integral of the frozen kernel `Theta(.; A(P_i/eps))` over panel `i` with the pole at its centroid.
    pub fn self_single_layer(&self, i: usize) -> f64 {
        let p = &self.mesh.panels()[i];
        let k = &self.data[i].frozen;
        if D == 2 {
            let h = p.measure;
            let tq = k.quad_form(&p.tangent);
            -(h * tq.ln() + 2.0 * h * ((0.5 * h).ln() - 1.0)) / (4.0 * std::f64::consts::PI * k.sqrt_det())
        } else {
            let corners = [p.point(0.0, 0.0), p.point(1.0, 0.0), p.point(1.0, 1.0), p.point(0.0, 1.0)];
            let x = p.centroid;
            let mut total = 0.0;
            for e in 0..4 {
                let (a, b) = (corners[e], corners[(e + 1) % 4]);
                let jac = if D == 3 {
                    let (u, v) = (a - x, b - a);
                    let c = Vector::<3>::new(u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]);
                    c.norm()
                } else {
                    0.0
                };
                // Duffy: y = x + s (a - x) + s t (b - a), dA = s jac ds dt; Theta ~ 1/s.
                for (t, wt) in gauss_self() {
                    let dir = (a - x) + (b - a) * *t;
                    // Theta(s dir) s = Theta(dir) in 3D
                    total += wt * jac * k.value_at(&dir);
                }
            }
            total
        }
    }

    pub fn assemble_s(&self) -> BemOperator {
        let panels = self.mesh.panels();
        let diag: Vec<f64> = (0..self.len()).into_par_iter().map(|i| self.self_single_layer(i)).collect();
        let matrix = self.dense(|i, j| {
            if i == j {
                diag[i]
            } else {
                let (x, y) = (&panels[i].centroid, &panels[j].centroid);
                self.kernel.gamma_with(&self.data[i], &self.data[j], x, y) * panels[j].measure
            }
        });
        BemOperator {
            kind: OperatorKind::SingleLayer,
            matrix,
            mesh_id: self.mesh.id(),
            kernel_id: self.kernel.id(),
            diagonal: "frozen-analytic".into(),
        }
    }

    pub fn assemble_k(&self) -> BemOperator {
        let panels = self.mesh.panels();
        let mut matrix = self.dense(|i, j| {
            if i == j {
                0.0
            } else {
                let p = &panels[i];
                self.kernel.conormal_with(&self.data[i], &p.centroid, &p.normal, &self.data[j], &panels[j].centroid) * panels[j].measure
            }
        });
        // sum_i w_i (1/2 delta_ij + K_ij) = 0 for every column j
        for j in 0..self.len() {
            let wj = panels[j].measure;
            let off: f64 = (0..self.len()).filter(|&i| i != j).map(|i| panels[i].measure * matrix[(i, j)]).sum();
            matrix[(j, j)] = (-0.5 * wj - off) / wj;
        }
        BemOperator {
            kind: OperatorKind::Conormal,
            matrix,
            mesh_id: self.mesh.id(),
            kernel_id: self.kernel.id(),
            diagonal: "mean-value".into(),
        }
    }

    /// `K*` from the discrete duality `w_i K*_ij = w_j K_ji`.
    pub fn kstar_from(&self, k: &BemOperator) -> BemOperator {
        let w = self.mesh.weights();
        let n = self.len();
        let matrix = DMatrix::from_fn(n, n, |i, j| w[j] * k.matrix[(j, i)] / w[i]);
        BemOperator { kind: OperatorKind::DoubleLayer, matrix, mesh_id: k.mesh_id, kernel_id: k.kernel_id.clone(), diagonal: "gauss".into() }
    }

    pub fn assemble_kstar(&self) -> BemOperator {
        self.kstar_from(&self.assemble_k())
    }

    /// True if `x` is closer to the boundary than a tenth of the nearest panel size.
    pub fn near_boundary(&self, x: &Point<D>) -> bool {
        self.mesh
            .panels()
            .iter()
            .any(|p| (x - p.centroid).norm() < 0.5 * p.diameter() && self.mesh.boundary_distance(x) < 0.1 * p.diameter())
    }

    fn accumulate<T: std::ops::AddAssign>(&self, x: &Point<D>, zero: T, mut term: impl FnMut(usize, &Point<D>, f64) -> T) -> T {
        let mut total = zero;
        let mut rule = Vec::with_capacity(64);
        for (j, panel) in self.mesh.panels().iter().enumerate() {
            panel_rule(panel, x, &mut rule);
            for (y, w) in &rule {
                if y != x {
                    total += term(j, y, *w);
                }
            }
        }
        total
    }

    pub fn single_layer_eval(&self, g: &[f64], x: &Point<D>) -> f64 {
        let px = self.kernel.point_data(x);
        self.accumulate(x, 0.0, |j, y, w| if g[j] == 0.0 { 0.0 } else { g[j] * w * self.kernel.gamma_with(&px, &self.data[j], x, y) })
    }

    pub fn single_layer_grad(&self, g: &[f64], x: &Point<D>) -> Vector<D> {
        let px = self.kernel.point_data(x);
        self.accumulate(x, Vector::<D>::zeros(), |j, y, w| {
            if g[j] == 0.0 {
                Vector::<D>::zeros()
            } else {
                self.kernel.grad_x_with(&px, &self.data[j], x, y) * (g[j] * w)
            }
        })
    }

    pub fn double_layer_eval(&self, g: &[f64], x: &Point<D>) -> f64 {
        let panels = self.mesh.panels();
        let px = self.kernel.point_data(x);
        self.accumulate(x, 0.0, |j, y, w| {
            if g[j] == 0.0 {
                0.0
            } else {
                g[j] * w * self.kernel.conormal_with(&self.data[j], y, &panels[j].normal, &px, x)
            }
        })
    }

    pub fn double_layer_grad(&self, g: &[f64], x: &Point<D>) -> Vector<D> {
        let panels = self.mesh.panels();
        let px = self.kernel.point_data(x);
        self.accumulate(x, Vector::<D>::zeros(), |j, y, w| {
            if g[j] == 0.0 {
                Vector::<D>::zeros()
            } else {
                let v = self.data[j].a * panels[j].normal;
                self.kernel.grad_x_of_grad_y_with(&px, &self.data[j], x, y, &v) * (g[j] * w)
            }
        })
    }

    /// One-sided boundary gradients `(grad S(g))_+-` at the panel nodes.
    pub fn trace_grad_single_layer(&self, k: &BemOperator, g: &BoundaryFunction<f64>, side: Side) -> Result<BoundaryFunction<Vector<D>>> {
        self.mesh.check(g)?;
        if k.kind != OperatorKind::Conormal || k.mesh_id != self.mesh.id() {
            return Err(crate::error::invalid("k", "expected the conormal operator of this mesh"));
        }
        let pv = self.trace_pv(k, g);
        let b = self.trace_coefficients();
        let s = side.sign();
        let out = self.mesh.panels().iter().enumerate().map(|(i, p)| pv[i] + p.normal * (0.5 * s * b[i] * g[i])).collect();
        self.mesh.wrap(out)
    }

    /// Principal value part of the boundary gradient, shared by both sides.
    fn trace_pv(&self, k: &BemOperator, g: &[f64]) -> Vec<Vector<D>> {
        let panels = self.mesh.panels();
        let b = self.trace_coefficients();
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let x = &panels[i].centroid;
                let mut v = panels[i].normal * (b[i] * k.matrix[(i, i)] * g[i]);
                for (j, pj) in panels.iter().enumerate() {
                    if j != i && g[j] != 0.0 {
                        v += self.kernel.grad_x_with(&self.data[i], &self.data[j], x, &pj.centroid) * (g[j] * pj.measure);
                    }
                }
                v
            })
            .collect()
    }

    /// Conormal derivatives `n . A grad` of boundary gradients.
    pub fn conormal_of(&self, grads: &[Vector<D>]) -> Vec<f64> {
        self.mesh.panels().iter().zip(&self.data).zip(grads).map(|((p, d), g)| p.normal.dot(&(d.a * g))).collect()
    }

    /// Tangential projections `(I - n n^T) v`.
    pub fn tangential_of(&self, grads: &[Vector<D>]) -> Vec<Vector<D>> {
        self.mesh.panels().iter().zip(grads).map(|(p, g)| g - p.normal * p.normal.dot(g)).collect()
    }

    /// Discrete truncated maximal operator of `K`:
    /// `max over rho of |sum_{|P_j - P_i| > rho} K_ij f_j|`.
    pub fn truncated_maximal_probe(&self, k: &BemOperator, f: &BoundaryFunction<f64>, radii: &[f64]) -> Result<BoundaryFunction<f64>> {
        self.mesh.check(f)?;
        if radii.windows(2).any(|w| w[1] >= w[0]) {
            return Err(crate::error::invalid("radii", "must decrease"));
        }
        let panels = self.mesh.panels();
        let out = (0..self.len())
            .into_par_iter()
            .map(|i| {
                let mut best: f64 = 0.0;
                for &rho in radii {
                    let s: f64 = (0..self.len())
                        .filter(|&j| j != i && (panels[j].centroid - panels[i].centroid).norm() > rho)
                        .map(|j| k.matrix[(i, j)] * f[j])
                        .sum();
                    best = best.max(s.abs());
                }
                best
            })
            .collect();
        self.mesh.wrap(out)
    }
}

/// `max over densities |(K_A - K_B) f|_2 / |f|_2` for random unit densities.
pub fn operator_difference<const D: usize>(a: &BemSystem<D>, b: &BemSystem<D>, n_densities: usize, seed: u64) -> Result<f64> {
    if a.mesh.id() != b.mesh.id() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let (ka, kb) = (a.assemble_k(), b.assemble_k());
    let diff = &ka.matrix - &kb.matrix;
    let w = a.mesh.weights();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for _ in 0..n_densities {
        let f = DVector::from_fn(a.len(), |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let nf = weighted_norm(&f, &w);
        let r = &diff * &f;
        best = best.max(weighted_norm(&r, &w) / nf);
    }
    Ok(best)
}

pub fn weighted_norm(v: &DVector<f64>, w: &[f64]) -> f64 {
    v.iter().zip(w).map(|(x, w)| w * x * x).sum::<f64>().sqrt()
}
