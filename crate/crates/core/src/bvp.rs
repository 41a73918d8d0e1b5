//! Boundary value problems solved through layer potentials, Green functions, and
//! the estimate harness (Rellich ratios, nontangential norms, continuation in
//! the coefficients, difference-operator identities).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cell::{corrector_combination, CorrectorSolution};
use crate::coeff::{holder_estimate_between, sup_distance, CoefficientField};
use crate::error::{invalid, Error, Result};
use crate::field::SolutionField;
use crate::geom::{self, BoundaryFunction, BoundaryMesh, GraphPatch};
use crate::kernel::TwoScaleKernel;
use crate::layer::{operator_difference, BemOperator, BemSystem, Side};
use crate::linalg;
use crate::small::{Mat, Point, Vector};

/// Relative solve residual above which a solution is rejected.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-8;
/// Condition estimate above which `S` is declared degenerate.
pub const MAX_CONDITION: f64 = 1e12;
/// Target diameter for two-dimensional regularity solves.
pub const REGULARITY_DIAMETER: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Problem {
    Dirichlet,
    Neumann,
    Regularity,
}

impl Problem {
    pub fn name(self) -> &'static str {
        match self {
            Problem::Dirichlet => "dirichlet",
            Problem::Neumann => "neumann",
            Problem::Regularity => "regularity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dirichlet" => Some(Problem::Dirichlet),
            "neumann" => Some(Problem::Neumann),
            "regularity" => Some(Problem::Regularity),
            _ => None,
        }
    }
}

/// Solved density with field evaluators.
#[derive(Clone)]
pub struct BvpSolution<const D: usize> {
    pub problem: Problem,
    /// Density on the input mesh.
    pub density: BoundaryFunction<f64>,
    /// `|M g - rhs| / |rhs|`.
    pub residual: f64,
    /// 1-norm condition estimate of the boundary operator.
    pub condition: f64,
    /// `|int f dsigma|` removed from Neumann data.
    pub projection: f64,
    /// Dilation applied before solving (`x -> scale x`).
    pub scale: f64,
    system: Arc<BemSystem<D>>,
    k: Option<BemOperator>,
    working: Vec<f64>,
    offset: f64,
}

fn solve_checked(m: &DMatrix<f64>, rhs: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    let b = DVector::from_column_slice(rhs);
    let condition = linalg::condition_estimate(m)?;
    let s = linalg::solve(m, &b)?;
    if s.residual > SOLVE_RESIDUAL_TOL {
        return Err(Error::NonConvergence { iterations: s.iterations, residual: s.residual });
    }
    Ok((s.x.iter().copied().collect(), s.residual, condition))
}

/// `u = D(g)` with `(-1/2 I + K*) g = f`.
pub fn solve_dirichlet<const D: usize>(sys: Arc<BemSystem<D>>, f: &BoundaryFunction<f64>) -> Result<BvpSolution<D>> {
    sys.mesh().check(f)?;
    let kstar = sys.assemble_kstar();
    let (g, residual, condition) = solve_checked(&kstar.shifted(-0.5), f)?;
    Ok(BvpSolution {
        problem: Problem::Dirichlet,
        density: sys.mesh().wrap(g.clone())?,
        residual,
        condition,
        projection: 0.0,
        scale: 1.0,
        system: sys,
        k: None,
        working: g,
        offset: 0.0,
    })
}

/// `u = S(g)` with `(1/2 I + K) g = f`, after projecting `f` to mean zero.
/// The additive constant is fixed by a zero weighted mean of `u` over the panel nodes.
pub fn solve_neumann<const D: usize>(sys: Arc<BemSystem<D>>, f: &BoundaryFunction<f64>) -> Result<BvpSolution<D>> {
    let mesh = sys.mesh().clone();
    mesh.check(f)?;
    let w = mesh.weights();
    let sigma = mesh.sigma();
    let total: f64 = w.iter().zip(f.iter()).map(|(w, f)| w * f).sum();
    let data: Vec<f64> = f.iter().map(|v| v - total / sigma).collect();
    let k = sys.assemble_k();
    // The range of 1/2 I + K is the mean-zero subspace; a rank-one term selects
    // the density with zero weighted mean.
    let mut m = k.shifted(0.5);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            m[(i, j)] += w[j] / sigma;
        }
    }
    let (g, residual, condition) = solve_checked(&m, &data)?;
    let s = sys.assemble_s();
    let su = s.apply(&g);
    let offset = -w.iter().zip(&su).map(|(w, u)| w * u).sum::<f64>() / sigma;
    Ok(BvpSolution {
        problem: Problem::Neumann,
        density: mesh.wrap(g.clone())?,
        residual,
        condition,
        projection: total.abs(),
        scale: 1.0,
        system: sys,
        k: Some(k),
        working: g,
        offset,
    })
}

/// `u = S(g)` with `S g = f`. Two-dimensional domains are first dilated to
/// diameter at most one half, with the scale `eps` dilated alike.
pub fn solve_regularity<const D: usize>(sys: Arc<BemSystem<D>>, f: &BoundaryFunction<f64>) -> Result<BvpSolution<D>> {
    let mesh = sys.mesh().clone();
    mesh.check(f)?;
    let diam = mesh.diameter();
    let (scale, working_sys) = if D == 2 && diam > REGULARITY_DIAMETER {
        let rho = REGULARITY_DIAMETER / diam;
        let kernel = sys.kernel().with_eps(sys.kernel().eps() * rho)?;
        (rho, Arc::new(BemSystem::new(Arc::new(mesh.scaled(rho)?), kernel)))
    } else {
        (1.0, sys)
    };
    let s = working_sys.assemble_s();
    let condition = linalg::condition_estimate(&s.matrix)?;
    if condition > MAX_CONDITION {
        return Err(Error::IllConditioned { condition });
    }
    let (g, residual, _) = solve_checked(&s.matrix, f)?;
    let k = working_sys.assemble_k();
    let reported = g.iter().map(|v| v * scale.powi(D as i32 - 1)).collect();
    Ok(BvpSolution {
        problem: Problem::Regularity,
        density: mesh.wrap(reported)?,
        residual,
        condition,
        projection: 0.0,
        scale,
        system: working_sys,
        k: Some(k),
        working: g,
        offset: 0.0,
    })
}

pub fn solve<const D: usize>(problem: Problem, sys: Arc<BemSystem<D>>, f: &BoundaryFunction<f64>) -> Result<BvpSolution<D>> {
    match problem {
        Problem::Dirichlet => solve_dirichlet(sys, f),
        Problem::Neumann => solve_neumann(sys, f),
        Problem::Regularity => solve_regularity(sys, f),
    }
}

impl<const D: usize> BvpSolution<D> {
    pub fn system(&self) -> &Arc<BemSystem<D>> {
        &self.system
    }

    /// Boundary gradient at the panel nodes: the interior trace formula for
    /// single layer solutions, extrapolation along the inward normal otherwise.
    pub fn boundary_gradient(&self, mesh: &BoundaryMesh<D>) -> Result<Vec<Vector<D>>> {
        match self.problem {
            Problem::Neumann | Problem::Regularity => {
                let k = self.k.as_ref().expect("single layer solutions keep K");
                let g = self.system.mesh().wrap(self.working.clone())?;
                let t = self.system.trace_grad_single_layer(k, &g, Side::Plus)?;
                Ok(t.values.into_iter().map(|v| v * self.scale).collect())
            }
            Problem::Dirichlet => Ok(mesh
                .panels()
                .par_iter()
                .map(|p| {
                    let t = 0.5 * p.measure.powf(1.0 / (D as f64 - 1.0));
                    let at = |s: f64| self.gradient(&(p.centroid - p.normal * s));
                    let (g4, g2, g1) = (at(4.0 * t), at(2.0 * t), at(t));
                    Vector::<D>::from_fn(|i, _| geom::richardson(g4[i], g2[i], g1[i]))
                })
                .collect()),
        }
    }
}

impl<const D: usize> SolutionField<D> for BvpSolution<D> {
    fn value(&self, x: &Point<D>) -> f64 {
        let y = x * self.scale;
        match self.problem {
            Problem::Dirichlet => self.system.double_layer_eval(&self.working, &y),
            _ => self.system.single_layer_eval(&self.working, &y) + self.offset,
        }
    }

    fn gradient(&self, x: &Point<D>) -> Vector<D> {
        let y = x * self.scale;
        match self.problem {
            Problem::Dirichlet => self.system.double_layer_grad(&self.working, &y),
            _ => self.system.single_layer_grad(&self.working, &y) * self.scale,
        }
    }
}

/// Max over probes of `|u - exact|`, relative to the max of `|exact|` on the boundary
/// nodes. With `up_to_constant` the mean difference over the probes is removed first.
pub fn interior_error<const D: usize>(
    u: &dyn SolutionField<D>,
    exact: &dyn SolutionField<D>,
    mesh: &BoundaryMesh<D>,
    probes: &[Point<D>],
    up_to_constant: bool,
) -> f64 {
    let diffs: Vec<f64> = probes.par_iter().map(|x| u.value(x) - exact.value(x)).collect();
    let shift = if up_to_constant { diffs.iter().sum::<f64>() / diffs.len() as f64 } else { 0.0 };
    let scale = mesh.panels().iter().map(|p| exact.value(&p.centroid).abs()).fold(0.0, f64::max);
    diffs.iter().map(|d| (d - shift).abs()).fold(0.0, f64::max) / scale
}

/// Probe grid `center + [-a, a]^d` with `n` points per axis.
pub fn probe_grid<const D: usize>(center: &Point<D>, half_width: f64, n: usize) -> Vec<Point<D>> {
    geom_grid::<D>(n)
        .into_iter()
        .map(|t: Point<D>| center + t.map(|v| (2.0 * v - 1.0) * half_width))
        .collect()
}

fn geom_grid<const D: usize>(n: usize) -> Vec<Point<D>> {
    let total = n.pow(D as u32);
    (0..total)
        .map(|mut idx| {
            let mut p = Point::<D>::zeros();
            for k in (0..D).rev() {
                p[k] = if n == 1 { 0.5 } else { (idx % n) as f64 / (n - 1) as f64 };
                idx /= n;
            }
            p
        })
        .collect()
}

/// `G(X, Y) = Gamma(X, Y) - W(X, Y)` with `W` the single layer solution matching
/// `Gamma(., Y)` on the boundary.
#[derive(Clone)]
pub struct GreenFunction<const D: usize> {
    pub pole: Point<D>,
    kernel: TwoScaleKernel<D>,
    correction: BvpSolution<D>,
    mesh: Arc<BoundaryMesh<D>>,
}

pub fn green_function<const D: usize>(sys: Arc<BemSystem<D>>, pole: Point<D>) -> Result<GreenFunction<D>> {
    let mesh = sys.mesh().clone();
    if !mesh.contains(&pole) || mesh.boundary_distance(&pole) <= 2.0 * mesh.max_panel_size() {
        return Err(invalid("pole", "must lie inside, at least two panel sizes from the boundary"));
    }
    let kernel = sys.kernel().clone();
    let data = mesh.function(|p| kernel.gamma_approx(&p.centroid, &pole).expect("pole is interior"));
    let correction = solve_regularity(sys, &data)?;
    Ok(GreenFunction { pole, kernel, correction, mesh })
}

impl<const D: usize> GreenFunction<D> {
    pub fn correction(&self) -> &BvpSolution<D> {
        &self.correction
    }

    pub fn value(&self, x: &Point<D>) -> Result<f64> {
        Ok(self.kernel.gamma_approx(x, &self.pole)? - self.correction.value(x))
    }

    pub fn gradient(&self, x: &Point<D>) -> Result<Vector<D>> {
        Ok(self.kernel.gamma_grad_x_approx(x, &self.pole)? - self.correction.gradient(x))
    }

    /// `max |G|` over off-node boundary points, relative to `max |Gamma(., Y)|` on the boundary.
    pub fn trace_ratio(&self) -> f64 {
        let params: &[(f64, f64)] = if D == 2 { &[(0.25, 0.0), (0.75, 0.0)] } else { &[(0.25, 0.25), (0.75, 0.75), (0.25, 0.75)] };
        let g_max = self
            .mesh
            .panels()
            .iter()
            .map(|p| self.kernel.gamma_approx(&p.centroid, &self.pole).map(f64::abs).unwrap_or(0.0))
            .fold(0.0, f64::max);
        let worst = self
            .mesh
            .panels()
            .par_iter()
            .map(|p| {
                params
                    .iter()
                    .map(|(u, v)| self.value(&p.point(*u, *v)).map(f64::abs).unwrap_or(f64::INFINITY))
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        worst / g_max
    }

    /// `-int n . A grad G` over the sphere of radius `r` around the pole.
    pub fn pole_flux(&self, r: f64, n: usize) -> f64 {
        let eps = self.kernel.eps();
        let field = self.kernel.field().clone();
        let term = |dir: Vector<D>| -> f64 {
            let x = self.pole + dir * r;
            let a = if self.kernel.is_constant() { *self.kernel.homogenized().matrix() } else { field.eval_scaled(&x, eps) };
            -dir.dot(&(a * self.gradient(&x).unwrap_or_else(|_| Vector::<D>::zeros())))
        };
        if D == 2 {
            let h = 2.0 * std::f64::consts::PI / n as f64;
            (0..n)
                .into_par_iter()
                .map(|k| {
                    let t = k as f64 * h;
                    term(Vector::<D>::from_fn(|i, _| if i == 0 { t.cos() } else { t.sin() })) * r * h
                })
                .collect::<Vec<_>>()
                .iter()
                .sum()
        } else {
            let (nodes, weights) = crate::quad::gauss_legendre(n / 2);
            let h = 2.0 * std::f64::consts::PI / n as f64;
            nodes
                .par_iter()
                .zip(&weights)
                .map(|(c, w)| {
                    let s = (1.0 - c * c).sqrt();
                    (0..n)
                        .map(|k| {
                            let p = k as f64 * h;
                            let dir = Vector::<D>::from_fn(|i, _| [s * p.cos(), s * p.sin(), *c][i]);
                            term(dir) * r * r * w * h
                        })
                        .sum::<f64>()
                })
                .collect::<Vec<_>>()
                .iter()
                .sum()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RellichRatios {
    /// `|grad u|_2 / |du/dnu|_2`.
    pub neumann: f64,
    /// `|grad u|_2 / |grad_tan u|_2`.
    pub regularity: f64,
}

/// Coefficients `A(P/eps)` at the panel nodes.
pub fn node_coefficients<const D: usize>(kernel: &TwoScaleKernel<D>, mesh: &BoundaryMesh<D>) -> Vec<Mat<D>> {
    mesh.panels().iter().map(|p| kernel.coefficient(&p.centroid)).collect()
}

pub fn rellich_ratios<const D: usize>(mesh: &BoundaryMesh<D>, grads: &[Vector<D>], coeffs: &[Mat<D>]) -> Result<RellichRatios> {
    if grads.len() != mesh.len() || coeffs.len() != mesh.len() {
        return Err(Error::DimensionMismatch { expected: mesh.len(), found: grads.len() });
    }
    let (mut full, mut conormal, mut tangential) = (0.0, 0.0, 0.0);
    for ((p, g), a) in mesh.panels().iter().zip(grads).zip(coeffs) {
        let dn = p.normal.dot(&(a * g));
        let tan = g - p.normal * p.normal.dot(g);
        full += p.measure * g.norm_squared();
        conormal += p.measure * dn * dn;
        tangential += p.measure * tan.norm_squared();
    }
    let full = full.sqrt();
    for d in [conormal.sqrt(), tangential.sqrt()] {
        if d <= 1e-12 * full.max(f64::MIN_POSITIVE) {
            return Err(Error::DegenerateRatio { denominator: d });
        }
    }
    Ok(RellichRatios { neumann: full / conormal.sqrt(), regularity: full / tangential.sqrt() })
}

/// `|(|grad u|)^*|_2` from cone samples.
pub fn gradient_nt_norm<const D: usize>(mesh: &BoundaryMesh<D>, u: &dyn SolutionField<D>, depths: &[f64]) -> Result<f64> {
    let m = geom::nt_maximal(mesh, |x| u.gradient(x).norm(), geom::DEFAULT_APERTURE, depths)?;
    Ok(geom::l2_norm(mesh, &m))
}

/// Sampling depths resolvable by a mesh: default depths not below half the smallest panel.
pub fn resolved_depths<const D: usize>(mesh: &BoundaryMesh<D>) -> Vec<f64> {
    let h = mesh.min_panel_size();
    geom::default_depths().into_iter().filter(|t| *t >= 0.5 * h).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SweepProblem {
    /// The manufactured solution itself, no solve.
    Exact,
    Solve(Problem),
}

impl SweepProblem {
    pub fn name(self) -> &'static str {
        match self {
            SweepProblem::Exact => "exact",
            SweepProblem::Solve(p) => p.name(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "exact" {
            Some(SweepProblem::Exact)
        } else {
            Problem::parse(s).map(SweepProblem::Solve)
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepConfig<const D: usize> {
    pub eps: Vec<f64>,
    pub problems: Vec<SweepProblem>,
    /// Panels per edge at `eps = 1`.
    pub base_panels: usize,
    /// Minimum panels per `eps` along each edge.
    pub panels_per_eps: usize,
    pub max_panels: usize,
    pub grading: usize,
    /// Manufactured solution `sum_i c_i w_i^eps`.
    pub weights: Vector<D>,
    pub probes: Vec<Point<D>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub problem: String,
    pub n_panels: usize,
    pub data_norm: f64,
    pub grad_nt_norm: f64,
    pub ratio: f64,
    pub rellich_neumann: f64,
    pub rellich_regularity: f64,
    pub residual: f64,
    pub interior_error: f64,
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(epsilon: f64, problem: &str, n_panels: usize, e: &Error) -> Self {
        Self {
            epsilon,
            problem: problem.into(),
            n_panels,
            data_norm: f64::NAN,
            grad_nt_norm: f64::NAN,
            ratio: f64::NAN,
            rellich_neumann: f64::NAN,
            rellich_regularity: f64::NAN,
            residual: f64::NAN,
            interior_error: f64::NAN,
            error: Some(e.to_string()),
        }
    }
}

/// Panels per edge (2D) or per face side (3D) for scale `eps` on a unit-size
/// domain: at least `panels_per_eps / eps`, capped so the total stays below `max_panels`.
pub fn panels_for<const D: usize>(base: usize, panels_per_eps: usize, max_panels: usize, eps: f64) -> usize {
    let needed = (panels_per_eps as f64 / eps).ceil() as usize;
    let cap = if D == 2 { max_panels / 4 } else { ((max_panels / 6) as f64).sqrt() as usize };
    base.max(needed).min(cap.max(1))
}

/// One row per `(eps, problem)` for the manufactured corrector solution.
pub fn epsilon_sweep<const D: usize>(
    field: Arc<CoefficientField<D>>,
    corr: Arc<crate::cell::CorrectorField<D>>,
    a0: &crate::cell::HomogenizedMatrix<D>,
    mesh_for: &(dyn Fn(usize) -> Result<BoundaryMesh<D>> + Sync),
    cfg: &SweepConfig<D>,
) -> Result<Vec<SweepRow>> {
    if cfg.eps.is_empty() || cfg.problems.is_empty() {
        return Err(invalid("eps", "sweep needs at least one scale and one problem"));
    }
    let cells: Vec<(f64, SweepProblem)> = cfg.eps.iter().flat_map(|e| cfg.problems.iter().map(move |p| (*e, *p))).collect();
    let rows = cells
        .par_iter()
        .map(|&(eps, problem)| {
            let per_edge = panels_for::<D>(cfg.base_panels, cfg.panels_per_eps, cfg.max_panels, eps);
            let run = || -> Result<SweepRow> {
                let mesh = Arc::new(mesh_for(per_edge)?);
                let kernel = TwoScaleKernel::new(field.clone(), corr.clone(), a0, eps)?;
                let exact = corrector_combination(field.clone(), corr.clone(), eps, cfg.weights)?;
                sweep_cell(problem, mesh, kernel, &exact, &cfg.probes)
            };
            run().unwrap_or_else(|e| SweepRow::failed(eps, problem.name(), per_edge, &e))
        })
        .collect();
    Ok(rows)
}

fn sweep_cell<const D: usize>(
    problem: SweepProblem,
    mesh: Arc<BoundaryMesh<D>>,
    kernel: TwoScaleKernel<D>,
    exact: &CorrectorSolution<D>,
    probes: &[Point<D>],
) -> Result<SweepRow> {
    let coeffs = node_coefficients(&kernel, &mesh);
    let f_dir = mesh.function(|p| exact.value(&p.centroid));
    let f_neu = mesh.function(|p| exact.conormal(&p.centroid, &p.normal));
    let w12 = geom::boundary_norms(&mesh, &f_dir)?.w12;
    let neu = geom::l2_norm(&mesh, &f_neu);
    let eps = kernel.eps();
    let (data_norm, grads, nt, residual, interior) = match problem {
        SweepProblem::Exact => {
            let grads: Vec<Vector<D>> = mesh.panels().iter().map(|p| exact.gradient(&p.centroid)).collect();
            let nt = gradient_nt_norm(&mesh, exact, &geom::default_depths())?;
            (neu, grads, nt, 0.0, 0.0)
        }
        SweepProblem::Solve(p) => {
            let sys = Arc::new(BemSystem::new(mesh.clone(), kernel));
            let data = if p == Problem::Neumann { &f_neu } else { &f_dir };
            let sol = solve(p, sys, data)?;
            let grads = sol.boundary_gradient(&mesh)?;
            let nt = gradient_nt_norm(&mesh, &sol, &resolved_depths(&mesh))?;
            let err = interior_error(&sol, exact, &mesh, probes, p == Problem::Neumann);
            (if p == Problem::Neumann { neu } else { w12 }, grads, nt, sol.residual, err)
        }
    };
    let r = rellich_ratios(&mesh, &grads, &coeffs)?;
    Ok(SweepRow {
        epsilon: eps,
        problem: problem.name().into(),
        n_panels: mesh.len(),
        data_norm,
        grad_nt_norm: nt,
        ratio: nt / data_norm,
        rellich_neumann: r.neumann,
        rellich_regularity: r.regularity,
        residual,
        interior_error: interior,
        error: None,
    })
}

/// `max / min` of a positive sequence; infinite if any entry is not finite.
pub fn spread(values: &[f64]) -> f64 {
    if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return f64::INFINITY;
    }
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    let min = values.iter().copied().fold(f64::MAX, f64::min);
    max / min
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuationRow {
    pub s: f64,
    /// Condition of `1/2 I + K` on mean-zero densities in `L^2(sigma)`.
    pub cond_plus: f64,
    /// Condition of `-1/2 I + K` in `L^2(sigma)`.
    pub cond_minus: f64,
    /// `min |(1/2 I + K) f| / |f|` over random mean-zero densities.
    pub lower_plus: f64,
    /// `min |(-1/2 I + K) f| / |f|` over random densities.
    pub lower_minus: f64,
}

/// Builds the two-scale kernel for `A^s`.
pub fn family_kernel<const D: usize>(field: &CoefficientField<D>, s: f64, eps: f64) -> Result<TwoScaleKernel<D>> {
    TwoScaleKernel::from_field(Arc::new(field.interpolate_identity(s)?), eps)
}

pub fn continuation_sweep<const D: usize>(
    mesh: Arc<BoundaryMesh<D>>,
    field: &CoefficientField<D>,
    eps: f64,
    s_grid: &[f64],
    n_random: usize,
    seed: u64,
) -> Result<Vec<ContinuationRow>> {
    if s_grid.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(invalid("s_grid", "values must lie in [0, 1]"));
    }
    let w = mesh.weights();
    let sigma = mesh.sigma();
    s_grid
        .iter()
        .map(|&s| {
            let sys = BemSystem::new(mesh.clone(), family_kernel(field, s, eps)?);
            let k = sys.assemble_k();
            let (plus, minus) = (k.shifted(0.5), k.shifted(-0.5));
            let sp = linalg::singular_values_mean_zero(&plus, &w);
            let sm = linalg::singular_values(&linalg::weighted(&minus, &w));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut lp, mut lm) = (f64::INFINITY, f64::INFINITY);
            for _ in 0..n_random {
                let mut f = DVector::from_fn(w.len(), |_, _| rng.gen_range(-1.0..1.0));
                let nf = crate::layer::weighted_norm(&f, &w);
                lm = lm.min(crate::layer::weighted_norm(&(&minus * &f), &w) / nf);
                let mean = f.iter().zip(&w).map(|(f, w)| f * w).sum::<f64>() / sigma;
                f.iter_mut().for_each(|v| *v -= mean);
                let nf = crate::layer::weighted_norm(&f, &w);
                lp = lp.min(crate::layer::weighted_norm(&(&plus * &f), &w) / nf);
            }
            Ok(ContinuationRow {
                s,
                cond_plus: sp[0] / sp[sp.len() - 1],
                cond_minus: sm[0] / sm[sm.len() - 1],
                lower_plus: lp,
                lower_minus: lm,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuityProbe {
    /// `max |(K_A - K_B) f|_2 / |f|_2`.
    pub raw: f64,
    /// Sampled `|A - B|_inf + [A - B]_lambda`.
    pub proxy: f64,
    /// `raw / proxy`, zero when the fields agree.
    pub normalized: f64,
}

pub fn operator_continuity_probe<const D: usize>(
    mesh: Arc<BoundaryMesh<D>>,
    a: &TwoScaleKernel<D>,
    b: &TwoScaleKernel<D>,
    n_densities: usize,
    seed: u64,
) -> Result<ContinuityProbe> {
    if a.eps() != b.eps() {
        return Err(invalid("eps", "both kernels must use the same scale"));
    }
    let proxy = sup_distance(a.field(), b.field())
        + holder_estimate_between(a.field(), b.field(), a.field().holder_exponent(), 2048, seed);
    if proxy == 0.0 {
        return Ok(ContinuityProbe { raw: 0.0, proxy: 0.0, normalized: 0.0 });
    }
    let sa = BemSystem::new(mesh.clone(), a.clone());
    let sb = BemSystem::new(mesh, b.clone());
    let raw = operator_difference(&sa, &sb, n_densities, seed)?;
    Ok(ContinuityProbe { raw, proxy, normalized: raw / proxy })
}

/// `Q(f)(x', x_d) = f(x', x_d + 1) - f(x', x_d)`.
pub fn q_diff<const D: usize>(f: &dyn Fn(&Point<D>) -> f64, x: &Point<D>) -> f64 {
    let mut y = *x;
    y[D - 1] += 1.0;
    f(&y) - f(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QIdentityReport {
    /// Max pointwise residual of `Q(fg) - Q(f)Q(g) = f Q(g) + g Q(f)`.
    pub product_rule: f64,
    /// Relative residual of `int_D Q(f) = int_top f - int_layer f`.
    pub telescoping: f64,
    /// `int_{boundary D} (du/dnu) Q(u)`.
    pub ibp_boundary: f64,
    /// `int_D A grad u . Q(grad u)`.
    pub ibp_volume: f64,
    /// `|boundary - volume| / (int |du/dnu Q(u)| + int |A grad u . Q grad u|)`.
    pub ibp_relative: f64,
    /// Relative discrete residual of `Q(u)` as an `L`-solution on a box inside the cap.
    pub fem_residual: f64,
}

/// Difference-operator identities on a graph patch for a solution `u` of
/// `-div(A(x/eps) grad u) = 0`.
pub fn q_identity_report(
    patch: &GraphPatch,
    u: &CorrectorSolution<2>,
    field: &CoefficientField<2>,
    rho: f64,
    seed: u64,
) -> Result<QIdentityReport> {
    if !(rho > 0.0 && rho <= 2.0 * patch.r) {
        return Err(invalid("rho", "must lie in (0, 2r]"));
    }
    let eps = u.eps();
    let max_len = (0.5 * eps).min(0.25);

    // Product rule on random trigonometric functions.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coef = || [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)];
    let (cf, cg) = (coef(), coef());
    let trig = |c: [f64; 4]| move |x: &Point<2>| c[0] * (c[2] * x[0]).sin() + c[1] * (c[3] * x[1]).cos() + 0.3 * x[1];
    let (f, g) = (trig(cf), trig(cg));
    let fg = |x: &Point<2>| f(x) * g(x);
    let mut product_rule: f64 = 0.0;
    for i in 0..400 {
        let x = Point::<2>::new(-rho + 2.0 * rho * (i % 20) as f64 / 19.0, 3.0 * (i / 20) as f64 / 19.0);
        let lhs = q_diff(&fg, &x) - q_diff(&f, &x) * q_diff(&g, &x);
        let rhs = f(&x) * q_diff(&g, &x) + g(&x) * q_diff(&f, &x);
        product_rule = product_rule.max((lhs - rhs).abs());
    }

    // Telescoping identity for the solution itself.
    let uf = |x: &Point<2>| u.value(x);
    let cap = patch.cap_rule(rho, max_len);
    let left = cap.integrate(|x| q_diff(&uf, x));
    let right = patch.top_slab_rule(rho, max_len).integrate(&uf) - patch.layer_rule(rho, max_len).integrate(&uf);
    let telescoping = (left - right).abs() / left.abs().max(right.abs()).max(f64::MIN_POSITIVE);

    // Integration by parts.
    let shift = |x: &Point<2>| Point::<2>::new(x[0], x[1] + 1.0);
    let bnd = patch.cap_boundary_rule(rho, max_len);
    let b_terms: Vec<f64> = bnd
        .points
        .par_iter()
        .zip(&bnd.weights)
        .zip(&bnd.normals)
        .map(|((x, w), n)| w * u.conormal(x, n) * (u.value(&shift(x)) - u.value(x)))
        .collect();
    let v_terms: Vec<f64> = cap
        .points
        .par_iter()
        .zip(&cap.weights)
        .map(|(x, w)| {
            let a = field.eval_scaled(x, eps);
            w * (a * u.gradient(x)).dot(&(u.gradient(&shift(x)) - u.gradient(x)))
        })
        .collect();
    let ibp_boundary: f64 = b_terms.iter().sum();
    let ibp_volume: f64 = v_terms.iter().sum();
    let scale: f64 = b_terms.iter().map(|v| v.abs()).sum::<f64>() + v_terms.iter().map(|v| v.abs()).sum::<f64>();
    let ibp_relative = (ibp_boundary - ibp_volume).abs() / scale.max(f64::MIN_POSITIVE);

    // Q(u) as a discrete solution on a box above the graph.
    let top = patch.psi.eval(-rho).max(patch.psi.eval(rho)).max(patch.lipschitz * rho) + 0.25;
    let lo = Point::<2>::new(-0.5 * rho, top);
    let hi = Point::<2>::new(0.5 * rho, top + rho);
    let qu = |x: &Point<2>| u.value(&shift(x)) - u.value(x);
    let fem_residual = crate::fem::interpolant_residual(field, eps, &lo, &hi, (eps / 16.0).min(rho / 32.0), &qu)?;

    Ok(QIdentityReport { product_rule, telescoping, ibp_boundary, ibp_volume, ibp_relative, fem_residual })
}
