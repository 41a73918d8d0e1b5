//! Bilinear finite elements for `-div(A(x/eps) grad u) = 0` on axis-aligned
//! rectangles, solved by conjugate gradients with a geometric multigrid
//! preconditioner. Used as the independent oracle.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::coeff::CoefficientField;
use crate::error::{invalid, Error, Result};
use crate::field::SolutionField;
use crate::geom::{BoundaryFunction, BoundaryMesh};
use crate::kernel::ConstKernel;
use crate::quad::gauss_legendre;
use crate::small::{Point, Vector};

pub const CG_TOL: f64 = 1e-10;
pub const CG_MAX_ITER: usize = 2000;
/// Largest admissible grid.
pub const MAX_NODES: usize = 4_500_000;
/// Extrapolation weights from depths `h/2, 3h/2, 5h/2` to the boundary.
pub const EXTRAPOLATION: [f64; 3] = [1.875, -1.25, 0.375];
const COARSEST: usize = 400;
const SMOOTHING_STEPS: usize = 2;

/// Structured grid on `[lo, hi]` with `nx * ny` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct FemGrid {
    pub lo: Point<2>,
    pub hi: Point<2>,
    pub nx: usize,
    pub ny: usize,
}

fn cells_for(len: f64, h_max: f64) -> usize {
    let n = (len / h_max - 1e-9).ceil().max(2.0) as usize;
    let mut step = 1;
    while n.div_ceil(step) > 8 {
        step *= 2;
    }
    n.div_ceil(step) * step
}

impl FemGrid {
    /// Cell counts are rounded up to a small multiple of a power of two.
    pub fn new(lo: Point<2>, hi: Point<2>, h_max: f64) -> Result<Self> {
        if !(h_max > 0.0) || hi[0] <= lo[0] || hi[1] <= lo[1] {
            return Err(invalid("grid", "need lo < hi and positive h"));
        }
        let grid = Self { lo, hi, nx: cells_for(hi[0] - lo[0], h_max), ny: cells_for(hi[1] - lo[1], h_max) };
        if grid.nodes() > MAX_NODES {
            return Err(Error::TooLarge { nodes: grid.nodes() });
        }
        Ok(grid)
    }

    pub fn h(&self) -> [f64; 2] {
        [(self.hi[0] - self.lo[0]) / self.nx as f64, (self.hi[1] - self.lo[1]) / self.ny as f64]
    }

    pub fn nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + (self.nx + 1) * j
    }

    pub fn node(&self, i: usize, j: usize) -> Point<2> {
        let h = self.h();
        Point::<2>::new(self.lo[0] + i as f64 * h[0], self.lo[1] + j as f64 * h[1])
    }

    pub fn on_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.nx || j == self.ny
    }

    fn locate(&self, x: &Point<2>) -> (usize, usize, f64, f64) {
        let h = self.h();
        let s = ((x[0] - self.lo[0]) / h[0]).clamp(0.0, self.nx as f64);
        let t = ((x[1] - self.lo[1]) / h[1]).clamp(0.0, self.ny as f64);
        let i = (s.floor() as usize).min(self.nx - 1);
        let j = (t.floor() as usize).min(self.ny - 1);
        (i, j, s - i as f64, t - j as f64)
    }
}

#[derive(Clone, Debug)]
struct Csr {
    ptr: Vec<usize>,
    idx: Vec<u32>,
    val: Vec<f64>,
    cols: usize,
}

impl Csr {
    fn rows(&self) -> usize {
        self.ptr.len() - 1
    }

    fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.ptr[i]..self.ptr[i + 1];
        (&self.idx[r.clone()], &self.val[r])
    }

    fn mul(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().with_min_len(4096).for_each(|(i, yi)| {
            let (c, v) = self.row(i);
            *yi = c.iter().zip(v).map(|(c, v)| v * x[*c as usize]).sum();
        });
    }

    fn from_rows(rows: Vec<Vec<(u32, f64)>>, cols: usize) -> Self {
        let mut ptr = Vec::with_capacity(rows.len() + 1);
        ptr.push(0);
        let (mut idx, mut val) = (Vec::new(), Vec::new());
        for r in rows {
            for (c, v) in r {
                idx.push(c);
                val.push(v);
            }
            ptr.push(idx.len());
        }
        Self { ptr, idx, val, cols }
    }

    fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.cols];
        for i in 0..self.rows() {
            let (c, v) = self.row(i);
            for (c, v) in c.iter().zip(v) {
                rows[*c as usize].push((i as u32, *v));
            }
        }
        Self::from_rows(rows, self.rows())
    }

    /// `self * other`.
    fn matmul(&self, other: &Csr) -> Self {
        let rows: Vec<Vec<(u32, f64)>> = (0..self.rows())
            .into_par_iter()
            .map(|i| {
                let mut acc: Vec<(u32, f64)> = Vec::new();
                let (c, v) = self.row(i);
                for (k, a) in c.iter().zip(v) {
                    let (c2, v2) = other.row(*k as usize);
                    for (j, b) in c2.iter().zip(v2) {
                        acc.push((*j, a * b));
                    }
                }
                acc.sort_unstable_by_key(|e| e.0);
                let mut out: Vec<(u32, f64)> = Vec::with_capacity(acc.len());
                for (j, v) in acc {
                    match out.last_mut() {
                        Some(last) if last.0 == j => last.1 += v,
                        _ => out.push((j, v)),
                    }
                }
                out
            })
            .collect();
        Self::from_rows(rows, other.cols)
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).find(|(c, _)| **c as usize == i).map(|(_, v)| *v).unwrap_or(0.0)
            })
            .collect()
    }
}

struct Level {
    a: Csr,
    diag: Vec<f64>,
    /// Prolongation from the next coarser level.
    p: Option<Csr>,
    r: Option<Csr>,
}

struct Multigrid {
    levels: Vec<Level>,
    coarse: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Free-node numbering of a grid with a fixed-node mask.
#[derive(Clone)]
struct Numbering {
    nx: usize,
    ny: usize,
    fixed: Vec<bool>,
    free_index: Vec<u32>,
    n_free: usize,
}

impl Numbering {
    fn new(nx: usize, ny: usize, fixed: Vec<bool>) -> Self {
        let mut free_index = vec![u32::MAX; fixed.len()];
        let mut n_free = 0;
        for (k, f) in fixed.iter().enumerate() {
            if !f {
                free_index[k] = n_free as u32;
                n_free += 1;
            }
        }
        Self { nx, ny, fixed, free_index, n_free }
    }

    fn coarsen(&self) -> Option<Self> {
        if self.nx % 2 != 0 || self.ny % 2 != 0 || self.nx < 4 || self.ny < 4 || self.n_free <= COARSEST {
            return None;
        }
        let (cx, cy) = (self.nx / 2, self.ny / 2);
        let fixed = (0..(cx + 1) * (cy + 1))
            .map(|k| {
                let (i, j) = (k % (cx + 1), k / (cx + 1));
                self.fixed[2 * i + (self.nx + 1) * 2 * j]
            })
            .collect();
        Some(Self::new(cx, cy, fixed))
    }

    /// Bilinear prolongation from `coarse` free nodes to these free nodes.
    fn prolongation(&self, coarse: &Numbering) -> Csr {
        let axis = |i: usize| -> Vec<(usize, f64)> {
            if i % 2 == 0 {
                vec![(i / 2, 1.0)]
            } else {
                vec![((i - 1) / 2, 0.5), ((i + 1) / 2, 0.5)]
            }
        };
        let mut rows = Vec::with_capacity(self.n_free);
        for k in 0..self.fixed.len() {
            if self.fixed[k] {
                continue;
            }
            let (i, j) = (k % (self.nx + 1), k / (self.nx + 1));
            let mut row = Vec::new();
            for (ci, wi) in axis(i) {
                for (cj, wj) in axis(j) {
                    let c = ci + (coarse.nx + 1) * cj;
                    if !coarse.fixed[c] {
                        row.push((coarse.free_index[c], wi * wj));
                    }
                }
            }
            row.sort_unstable_by_key(|e| e.0);
            rows.push(row);
        }
        Csr::from_rows(rows, coarse.n_free)
    }
}

impl Multigrid {
    fn new(a: Csr, numbering: &Numbering) -> Result<Self> {
        let mut levels = vec![Level { diag: a.diagonal(), a, p: None, r: None }];
        let mut current = numbering.clone();
        while let Some(coarse) = current.coarsen() {
            let p = current.prolongation(&coarse);
            let r = p.transpose();
            let fine = levels.last_mut().expect("at least one level");
            let ac = r.matmul(&fine.a.matmul(&p));
            fine.p = Some(p);
            fine.r = Some(r);
            levels.push(Level { diag: ac.diagonal(), a: ac, p: None, r: None });
            current = coarse;
        }
        let last = &levels.last().expect("at least one level").a;
        let n = last.rows();
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let (c, v) = last.row(i);
            for (c, v) in c.iter().zip(v) {
                dense[(i, *c as usize)] = *v;
            }
        }
        let coarse = dense.cholesky().ok_or(Error::IllConditioned { condition: f64::INFINITY })?;
        Ok(Self { levels, coarse })
    }

    fn gauss_seidel(level: &Level, x: &mut [f64], b: &[f64], forward: bool) {
        let n = x.len();
        for step in 0..n {
            let i = if forward { step } else { n - 1 - step };
            let (c, v) = level.a.row(i);
            let mut s = b[i];
            for (c, v) in c.iter().zip(v) {
                if *c as usize != i {
                    s -= v * x[*c as usize];
                }
            }
            x[i] = s / level.diag[i];
        }
    }

    fn vcycle(&self, l: usize, b: &[f64]) -> Vec<f64> {
        if l + 1 == self.levels.len() {
            let rhs = nalgebra::DVector::from_column_slice(b);
            return self.coarse.solve(&rhs).iter().copied().collect();
        }
        let level = &self.levels[l];
        let mut x = vec![0.0; b.len()];
        for _ in 0..SMOOTHING_STEPS {
            Self::gauss_seidel(level, &mut x, b, true);
        }
        let mut ax = vec![0.0; b.len()];
        level.a.mul(&x, &mut ax);
        let res: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let r = level.r.as_ref().expect("non-coarsest level has restriction");
        let mut rc = vec![0.0; r.rows()];
        r.mul(&res, &mut rc);
        let ec = self.vcycle(l + 1, &rc);
        let mut e = vec![0.0; b.len()];
        level.p.as_ref().expect("non-coarsest level has prolongation").mul(&ec, &mut e);
        x.iter_mut().zip(&e).for_each(|(x, e)| *x += e);
        for _ in 0..SMOOTHING_STEPS {
            Self::gauss_seidel(level, &mut x, b, false);
        }
        x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.par_chunks(4096).zip(b.par_chunks(4096)).map(|(a, b)| a.iter().zip(b).map(|(a, b)| a * b).sum::<f64>()).collect::<Vec<_>>().iter().sum()
}

/// Preconditioned conjugate gradients; returns `(x, relative residual, iterations)`.
fn pcg(a: &Csr, mg: &Multigrid, b: &[f64]) -> Result<(Vec<f64>, f64, usize)> {
    let n = b.len();
    let bn = dot(b, b).sqrt();
    if bn == 0.0 {
        return Ok((vec![0.0; n], 0.0, 0));
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = mg.vcycle(0, &r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=CG_MAX_ITER {
        a.mul(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.par_iter_mut().zip(&ap).for_each(|(r, ap)| *r -= alpha * ap);
        let rn = dot(&r, &r).sqrt() / bn;
        if rn <= CG_TOL {
            return Ok((x, rn, it));
        }
        z = mg.vcycle(0, &r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
    }
    let rn = dot(&r, &r).sqrt() / bn;
    Err(Error::NonConvergence { iterations: CG_MAX_ITER, residual: rn })
}

/// Full-grid stiffness matrix as a 9-point stencil per node.
struct Stiffness {
    grid: FemGrid,
    stencil: Vec<[f64; 9]>,
}

fn slot(di: isize, dj: isize) -> usize {
    ((di + 1) + 3 * (dj + 1)) as usize
}

impl Stiffness {
    fn assemble(grid: &FemGrid, field: &CoefficientField<2>, eps: f64) -> Self {
        let h = grid.h();
        let (gx, gw) = gauss_legendre(3);
        let pts: Vec<(f64, f64)> = gx.iter().zip(&gw).map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w)).collect();
        let local = [(0usize, 0usize), (1, 0), (0, 1), (1, 1)];
        let element = |ei: usize, ej: usize| -> [[f64; 4]; 4] {
            let mut ke = [[0.0; 4]; 4];
            let origin = grid.node(ei, ej);
            for (xi, wx) in &pts {
                for (eta, wy) in &pts {
                    let x = Point::<2>::new(origin[0] + xi * h[0], origin[1] + eta * h[1]);
                    let a = field.eval_scaled(&x, eps);
                    let grads: Vec<Vector<2>> = local
                        .iter()
                        .map(|&(p, q)| {
                            let sx = if p == 1 { *xi } else { 1.0 - xi };
                            let sy = if q == 1 { *eta } else { 1.0 - eta };
                            let dx = if p == 1 { 1.0 } else { -1.0 } / h[0];
                            let dy = if q == 1 { 1.0 } else { -1.0 } / h[1];
                            Vector::<2>::new(dx * sy, sx * dy)
                        })
                        .collect();
                    let w = wx * wy * h[0] * h[1];
                    for r in 0..4 {
                        let ag = a * grads[r];
                        for c in 0..4 {
                            ke[r][c] += w * ag.dot(&grads[c]);
                        }
                    }
                }
            }
            ke
        };
        let mut stencil = vec![[0.0; 9]; grid.nodes()];
        const BATCH: usize = 32;
        for start in (0..grid.ny).step_by(BATCH) {
            let end = (start + BATCH).min(grid.ny);
            let batch: Vec<[[f64; 4]; 4]> = (start..end)
                .into_par_iter()
                .flat_map_iter(|ej| (0..grid.nx).map(move |ei| (ei, ej)))
                .map(|(ei, ej)| element(ei, ej))
                .collect();
            for (k, ke) in batch.iter().enumerate() {
                let (ei, ej) = (k % grid.nx, start + k / grid.nx);
                for (r, &(pr, qr)) in local.iter().enumerate() {
                    let row = grid.index(ei + pr, ej + qr);
                    for (c, &(pc, qc)) in local.iter().enumerate() {
                        stencil[row][slot(pc as isize - pr as isize, qc as isize - qr as isize)] += ke[r][c];
                    }
                }
            }
        }
        Self { grid: grid.clone(), stencil }
    }

    fn neighbours(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let nx1 = self.grid.nx + 1;
        let (i, j) = ((k % nx1) as isize, (k / nx1) as isize);
        let st = &self.stencil[k];
        (-1..=1).flat_map(move |dj| (-1..=1).map(move |di| (di, dj))).filter_map(move |(di, dj)| {
            let (ni, nj) = (i + di, j + dj);
            if ni < 0 || nj < 0 || ni > self.grid.nx as isize || nj > self.grid.ny as isize {
                return None;
            }
            Some((ni as usize + nx1 * nj as usize, st[slot(di, dj)]))
        })
    }

    fn apply(&self, u: &[f64]) -> Vec<f64> {
        (0..u.len()).into_par_iter().map(|k| self.neighbours(k).map(|(n, v)| v * u[n]).sum()).collect()
    }

    fn apply_abs(&self, u: &[f64]) -> Vec<f64> {
        (0..u.len()).into_par_iter().map(|k| self.neighbours(k).map(|(n, v)| (v * u[n]).abs()).sum()).collect()
    }

    fn restrict(&self, numbering: &Numbering) -> Csr {
        let rows = (0..self.stencil.len())
            .filter(|k| !numbering.fixed[*k])
            .map(|k| {
                self.neighbours(k)
                    .filter(|(n, _)| !numbering.fixed[*n])
                    .map(|(n, v)| (numbering.free_index[n], v))
                    .collect()
            })
            .collect();
        Csr::from_rows(rows, numbering.n_free)
    }
}

/// Boundary condition for [`fem_solve`].
pub enum BoundaryCondition<'a> {
    Dirichlet(&'a (dyn Fn(&Point<2>) -> f64 + Sync)),
    /// Conormal data `f(x, n)` with `n` the outward normal.
    Neumann(&'a (dyn Fn(&Point<2>, &Vector<2>) -> f64 + Sync)),
}

#[derive(Clone, Debug)]
pub struct FemSolution {
    pub grid: FemGrid,
    pub values: Vec<f64>,
    /// Relative residual of the free-node system.
    pub residual: f64,
    pub iterations: usize,
    /// `int grad u . A grad u`.
    pub energy: f64,
    /// `|int f dsigma|` removed from Neumann data.
    pub projection: f64,
}

fn check_resolution(grid: &FemGrid, field: &CoefficientField<2>, eps: f64) -> Result<()> {
    let h = grid.h();
    let required = eps / 8.0;
    if !field.is_constant() && h[0].max(h[1]) > required * (1.0 + 1e-12) {
        return Err(Error::Resolution { h: h[0].max(h[1]), required });
    }
    Ok(())
}

/// Lumped boundary measure and outward normals of the boundary nodes.
fn boundary_segments(grid: &FemGrid) -> Vec<(usize, usize, Vector<2>)> {
    let mut segs = Vec::new();
    for i in 0..grid.nx {
        segs.push((grid.index(i, 0), grid.index(i + 1, 0), Vector::<2>::new(0.0, -1.0)));
        segs.push((grid.index(i, grid.ny), grid.index(i + 1, grid.ny), Vector::<2>::new(0.0, 1.0)));
    }
    for j in 0..grid.ny {
        segs.push((grid.index(0, j), grid.index(0, j + 1), Vector::<2>::new(-1.0, 0.0)));
        segs.push((grid.index(grid.nx, j), grid.index(grid.nx, j + 1), Vector::<2>::new(1.0, 0.0)));
    }
    segs
}

fn node_point(grid: &FemGrid, k: usize) -> Point<2> {
    grid.node(k % (grid.nx + 1), k / (grid.nx + 1))
}

fn solve_system(
    grid: &FemGrid,
    field: &CoefficientField<2>,
    eps: f64,
    bc: &BoundaryCondition,
    load: Option<&Point<2>>,
) -> Result<FemSolution> {
    let stiff = Stiffness::assemble(grid, field, eps);
    let n = grid.nodes();
    let mut u = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut projection = 0.0;
    let fixed: Vec<bool> = match bc {
        BoundaryCondition::Dirichlet(g) => (0..n)
            .map(|k| {
                let (i, j) = (k % (grid.nx + 1), k / (grid.nx + 1));
                let b = grid.on_boundary(i, j);
                if b {
                    u[k] = g(&grid.node(i, j));
                }
                b
            })
            .collect(),
        BoundaryCondition::Neumann(f) => {
            let mut mass = vec![0.0; n];
            for (a, b, normal) in boundary_segments(grid) {
                let (pa, pb) = (node_point(grid, a), node_point(grid, b));
                let len = (pb - pa).norm();
                for (s, w) in crate::quad::gauss_interval(3, 0.0, 1.0) {
                    let x = pa + (pb - pa) * s;
                    let v = f(&x, &normal) * w * len;
                    rhs[a] += (1.0 - s) * v;
                    rhs[b] += s * v;
                }
                mass[a] += 0.5 * len;
                mass[b] += 0.5 * len;
            }
            let total: f64 = rhs.iter().sum();
            let sigma: f64 = mass.iter().sum();
            rhs.iter_mut().zip(&mass).for_each(|(r, m)| *r -= total * m / sigma);
            projection = total.abs();
            let mut fixed = vec![false; n];
            fixed[0] = true;
            fixed
        }
    };
    if let Some(y) = load {
        let (i, j, s, t) = grid.locate(y);
        for (di, dj, w) in [(0, 0, (1.0 - s) * (1.0 - t)), (1, 0, s * (1.0 - t)), (0, 1, (1.0 - s) * t), (1, 1, s * t)] {
            rhs[grid.index(i + di, j + dj)] += w;
        }
    }
    let lift = stiff.apply(&u);
    let numbering = Numbering::new(grid.nx, grid.ny, fixed);
    let b: Vec<f64> = (0..n).filter(|k| !numbering.fixed[*k]).map(|k| rhs[k] - lift[k]).collect();
    let a = stiff.restrict(&numbering);
    let mg = Multigrid::new(a.clone(), &numbering)?;
    let (x, residual, iterations) = pcg(&a, &mg, &b)?;
    for k in 0..n {
        if !numbering.fixed[k] {
            u[k] = x[numbering.free_index[k] as usize];
        }
    }
    if let BoundaryCondition::Neumann(_) = bc {
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b, _) in boundary_segments(grid) {
            let len = (node_point(grid, b) - node_point(grid, a)).norm();
            num += 0.5 * len * (u[a] + u[b]);
            den += len;
        }
        let mean = num / den;
        u.iter_mut().for_each(|v| *v -= mean);
    }
    let ku = stiff.apply(&u);
    let energy = dot(&u, &ku);
    Ok(FemSolution { grid: grid.clone(), values: u, residual, iterations, energy, projection })
}

/// Solves `-div(A(x/eps) grad u) = 0` with the given boundary condition.
/// Oscillatory fields require `h <= eps / 8`.
pub fn fem_solve(grid: &FemGrid, field: &CoefficientField<2>, eps: f64, bc: BoundaryCondition) -> Result<FemSolution> {
    check_resolution(grid, field, eps)?;
    solve_system(grid, field, eps, &bc, None)
}

impl FemSolution {
    /// Bilinear interpolant.
    pub fn value_at(&self, x: &Point<2>) -> f64 {
        let (i, j, s, t) = self.grid.locate(x);
        let g = &self.grid;
        let v = |a: usize, b: usize| self.values[g.index(i + a, j + b)];
        (1.0 - s) * (1.0 - t) * v(0, 0) + s * (1.0 - t) * v(1, 0) + (1.0 - s) * t * v(0, 1) + s * t * v(1, 1)
    }

    /// Gradient of the bilinear interpolant in the containing element.
    pub fn element_gradient(&self, x: &Point<2>) -> Vector<2> {
        let (i, j, s, t) = self.grid.locate(x);
        let g = &self.grid;
        let h = g.h();
        let v = |a: usize, b: usize| self.values[g.index(i + a, j + b)];
        Vector::<2>::new(
            ((1.0 - t) * (v(1, 0) - v(0, 0)) + t * (v(1, 1) - v(0, 1))) / h[0],
            ((1.0 - s) * (v(0, 1) - v(0, 0)) + s * (v(1, 1) - v(1, 0))) / h[1],
        )
    }

    /// Central differences of the interpolant with the grid step.
    pub fn recovered_gradient(&self, x: &Point<2>) -> Vector<2> {
        let h = self.grid.h();
        let d = |k: usize| {
            let mut e = Vector::<2>::zeros();
            e[k] = h[k];
            (self.value_at(&(x + e)) - self.value_at(&(x - e))) / (2.0 * h[k])
        };
        Vector::<2>::new(d(0), d(1))
    }

    /// Boundary gradients at panel nodes by quadratic extrapolation of element
    /// gradients along the inward normal. The panels must lie on the grid boundary.
    pub fn boundary_gradient(&self, mesh: &BoundaryMesh<2>) -> Result<BoundaryFunction<Vector<2>>> {
        let h = self.grid.h();
        let values = mesh
            .panels()
            .iter()
            .map(|p| {
                let step = (p.normal[0].abs() * h[0] + p.normal[1].abs() * h[1]).max(f64::MIN_POSITIVE);
                let at = |k: f64| self.element_gradient(&(p.centroid - p.normal * (k * step)));
                at(0.5) * EXTRAPOLATION[0] + at(1.5) * EXTRAPOLATION[1] + at(2.5) * EXTRAPOLATION[2]
            })
            .collect();
        mesh.wrap(values)
    }

    /// `int (du/dnu) u dsigma` from recovered boundary gradients.
    pub fn boundary_work(&self, mesh: &BoundaryMesh<2>, field: &CoefficientField<2>, eps: f64) -> Result<f64> {
        let grads = self.boundary_gradient(mesh)?;
        Ok(mesh
            .panels()
            .iter()
            .zip(grads.iter())
            .map(|(p, g)| p.measure * p.normal.dot(&(field.eval_scaled(&p.centroid, eps) * g)) * self.value_at(&p.centroid))
            .sum())
    }

    /// Max nodal deviation from `exact`.
    pub fn max_error(&self, exact: impl Fn(&Point<2>) -> f64) -> f64 {
        (0..self.values.len())
            .map(|k| (self.values[k] - exact(&node_point(&self.grid, k))).abs())
            .fold(0.0, f64::max)
    }
}

impl SolutionField<2> for FemSolution {
    fn value(&self, x: &Point<2>) -> f64 {
        self.value_at(x)
    }

    fn gradient(&self, x: &Point<2>) -> Vector<2> {
        self.recovered_gradient(x)
    }
}

/// Discrete residual of a function's nodal interpolant, relative to the
/// stencil-weighted magnitude; zero for the zero function.
pub fn interpolant_residual(
    field: &CoefficientField<2>,
    eps: f64,
    lo: &Point<2>,
    hi: &Point<2>,
    h: f64,
    u: &(dyn Fn(&Point<2>) -> f64 + Sync),
) -> Result<f64> {
    let grid = FemGrid::new(*lo, *hi, h)?;
    let stiff = Stiffness::assemble(&grid, field, eps);
    let values: Vec<f64> = (0..grid.nodes()).into_par_iter().map(|k| u(&node_point(&grid, k))).collect();
    let ku = stiff.apply(&values);
    let scale = stiff.apply_abs(&values);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..grid.nodes() {
        let (i, j) = (k % (grid.nx + 1), k / (grid.nx + 1));
        if !grid.on_boundary(i, j) {
            num += ku[k] * ku[k];
            den += scale[k] * scale[k];
        }
    }
    Ok(if den == 0.0 { 0.0 } else { (num / den).sqrt() })
}

pub const GREEN_MIN_BOX: f64 = 16.0;
pub const GREEN_MAX_H: f64 = 1.0 / 64.0;

/// Point-load solution on `[-L/2, L/2]^2 + Y` with far-field data from the homogenized kernel.
#[derive(Clone, Debug)]
pub struct ReferenceGreen {
    pub pole: Point<2>,
    pub solution: FemSolution,
    /// Solution at twice the grid step, for truncation estimates.
    pub coarse: Option<FemSolution>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreenSample {
    pub r: f64,
    pub angle: f64,
    pub x: Point<2>,
    pub value: f64,
    pub gradient: Vector<2>,
    /// `|u_h - u_2h| / 3`, or NaN without a coarse solve.
    pub error_estimate: f64,
}

pub fn reference_green(
    field: &CoefficientField<2>,
    eps: f64,
    homogenized: &ConstKernel<2>,
    pole: Point<2>,
    box_size: f64,
    h: f64,
    estimate_error: bool,
) -> Result<ReferenceGreen> {
    if box_size < GREEN_MIN_BOX {
        return Err(invalid("box_size", format!("must be at least {GREEN_MIN_BOX}")));
    }
    if h > GREEN_MAX_H {
        return Err(Error::Resolution { h, required: GREEN_MAX_H });
    }
    let half = Vector::<2>::new(0.5 * box_size, 0.5 * box_size);
    let data = |x: &Point<2>| homogenized.theta(x, &pole).unwrap_or(0.0);
    let run = |step: f64| -> Result<FemSolution> {
        let grid = FemGrid::new(pole - half, pole + half, step)?;
        check_resolution(&grid, field, eps)?;
        solve_system(&grid, field, eps, &BoundaryCondition::Dirichlet(&data), Some(&pole))
    };
    let solution = run(h)?;
    let coarse = if estimate_error { Some(run(2.0 * h)?) } else { None };
    Ok(ReferenceGreen { pole, solution, coarse })
}

impl ReferenceGreen {
    pub fn value(&self, x: &Point<2>) -> f64 {
        self.solution.value_at(x)
    }

    pub fn gradient(&self, x: &Point<2>) -> Vector<2> {
        self.solution.recovered_gradient(x)
    }

    pub fn samples(&self, radii: &[f64], n_angles: usize) -> Vec<GreenSample> {
        radii
            .iter()
            .flat_map(|&r| (0..n_angles).map(move |k| (r, 2.0 * std::f64::consts::PI * k as f64 / n_angles as f64)))
            .map(|(r, angle)| {
                let x = self.pole + Vector::<2>::new(angle.cos(), angle.sin()) * r;
                let value = self.value(&x);
                let error_estimate = self.coarse.as_ref().map_or(f64::NAN, |c| (value - c.value_at(&x)).abs() / 3.0);
                GreenSample { r, angle, x, value, gradient: self.gradient(&x), error_estimate }
            })
            .collect()
    }

    /// `-int n . A grad u` over the circle of radius `r` around the pole.
    pub fn flux(&self, field: &CoefficientField<2>, eps: f64, r: f64, n: usize) -> f64 {
        let dt = 2.0 * std::f64::consts::PI / n as f64;
        (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                let nrm = Vector::<2>::new(t.cos(), t.sin());
                let x = self.pole + nrm * r;
                -nrm.dot(&(field.eval_scaled(&x, eps) * self.gradient(&x))) * r * dt
            })
            .sum()
    }
}
