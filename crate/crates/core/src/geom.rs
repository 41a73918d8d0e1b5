//! Panelized boundaries, graph patches and nontangential sampling.

use std::f64::consts::PI;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::small::{Point, Vector};

/// Exterior angle above which a polygon vertex counts as a corner.
pub const CORNER_ANGLE: f64 = PI / 8.0;
pub const DEFAULT_APERTURE: f64 = 1.0;

/// Default sampling depths `2^-k`, `k = 1..10`.
pub fn default_depths() -> Vec<f64> {
    (1..=10).map(|k| 0.5f64.powi(k)).collect()
}

/// A flat panel: a segment in 2D, a parallelogram in 3D.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel<const D: usize> {
    pub centroid: Point<D>,
    pub normal: Vector<D>,
    pub tangent: Vector<D>,
    /// Second tangent (3D); zero in 2D.
    pub tangent2: Vector<D>,
    pub measure: f64,
    pub feature: usize,
    /// Panel points are `origin + u span[0] + v span[1]` for `u, v` in `[0, 1]`.
    pub origin: Point<D>,
    pub span: [Vector<D>; 2],
}

impl<const D: usize> Panel<D> {
    pub fn point(&self, u: f64, v: f64) -> Point<D> {
        self.origin + self.span[0] * u + self.span[1] * v
    }

    pub fn diameter(&self) -> f64 {
        (self.span[0] + self.span[1]).norm().max((self.span[0] - self.span[1]).norm())
    }
}

/// Smooth piece of the boundary: an edge chain (2D) or a face (3D).
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    /// Panel indices in row-major order over `shape`.
    pub panels: Vec<usize>,
    pub shape: [usize; 2],
    pub periodic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Domain<const D: usize> {
    Polygon(Vec<Point<D>>),
    Box { center: Point<D>, half_width: f64 },
    /// Region above a graph; the mesh covers part of the boundary only.
    Graph(Psi),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMesh<const D: usize> {
    panels: Vec<Panel<D>>,
    features: Vec<Feature>,
    domain: Domain<D>,
    sigma: f64,
    grading: usize,
    lipschitz: f64,
    id: u64,
}

/// Per-panel data tied to a mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryFunction<T> {
    pub mesh_id: u64,
    pub values: Vec<T>,
}

impl<T> std::ops::Deref for BoundaryFunction<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.values
    }
}

fn mesh_hash<const D: usize>(panels: &[Panel<D>]) -> u64 {
    let mut h = Sha256::new();
    h.update((D as u64).to_le_bytes());
    for p in panels {
        for v in p.centroid.iter().chain(p.normal.iter()).chain(p.origin.iter()).chain(p.span.iter().flat_map(|s| s.iter())) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(p.measure.to_bits().to_le_bytes());
        h.update((p.feature as u64).to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest length"))
}

impl<const D: usize> BoundaryMesh<D> {
    pub(crate) fn from_parts(panels: Vec<Panel<D>>, features: Vec<Feature>, domain: Domain<D>, grading: usize, lipschitz: f64) -> Self {
        let sigma = panels.iter().map(|p| p.measure).sum();
        let id = mesh_hash(&panels);
        Self { panels, features, domain, sigma, grading, lipschitz, id }
    }

    pub fn panels(&self) -> &[Panel<D>] {
        &self.panels
    }

    pub fn len(&self) -> usize {
        self.panels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.panels.is_empty()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn domain(&self) -> &Domain<D> {
        &self.domain
    }

    /// Total surface measure.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn grading(&self) -> usize {
        self.grading
    }

    /// Lipschitz character `M` recorded for the mesh.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn weights(&self) -> Vec<f64> {
        self.panels.iter().map(|p| p.measure).collect()
    }

    pub fn nodes(&self) -> Vec<Point<D>> {
        self.panels.iter().map(|p| p.centroid).collect()
    }

    /// `sum measure_j n_j`; vanishes for closed boundaries.
    pub fn closure(&self) -> Vector<D> {
        self.panels.iter().fold(Vector::<D>::zeros(), |acc, p| acc + p.normal * p.measure)
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for p in &self.panels {
            for q in &self.panels {
                d = d.max((p.origin - q.origin).norm());
            }
        }
        d.max(self.panels.iter().map(|p| p.diameter()).fold(0.0, f64::max))
    }

    pub fn max_panel_size(&self) -> f64 {
        self.panels.iter().map(|p| p.diameter()).fold(0.0, f64::max)
    }

    pub fn min_panel_size(&self) -> f64 {
        self.panels.iter().map(|p| p.diameter()).fold(f64::INFINITY, f64::min)
    }

    pub fn function<T>(&self, f: impl Fn(&Panel<D>) -> T) -> BoundaryFunction<T> {
        BoundaryFunction { mesh_id: self.id, values: self.panels.iter().map(f).collect() }
    }

    pub fn wrap<T>(&self, values: Vec<T>) -> Result<BoundaryFunction<T>> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: values.len() });
        }
        Ok(BoundaryFunction { mesh_id: self.id, values })
    }

    pub fn check<T>(&self, f: &BoundaryFunction<T>) -> Result<()> {
        if f.values.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: f.values.len() });
        }
        if f.mesh_id != self.id {
            return Err(invalid("mesh_id", "boundary function belongs to a different mesh"));
        }
        Ok(())
    }

    /// Dilation `x -> rho x` about the origin.
    pub fn scaled(&self, rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(invalid("rho", "must be positive"));
        }
        let panels = self
            .panels
            .iter()
            .map(|p| Panel {
                centroid: p.centroid * rho,
                origin: p.origin * rho,
                span: [p.span[0] * rho, p.span[1] * rho],
                measure: p.measure * rho.powi(D as i32 - 1),
                ..p.clone()
            })
            .collect();
        let domain = match &self.domain {
            Domain::Polygon(v) => Domain::Polygon(v.iter().map(|x| x * rho).collect()),
            Domain::Box { center, half_width } => Domain::Box { center: center * rho, half_width: half_width * rho },
            Domain::Graph(_) => return Err(invalid("rho", "graph patches cannot be rescaled")),
        };
        Ok(Self::from_parts(panels, self.features.clone(), domain, self.grading, self.lipschitz))
    }

    /// Whether `x` lies strictly inside the domain.
    pub fn contains(&self, x: &Point<D>) -> bool {
        match &self.domain {
            Domain::Polygon(v) => point_in_polygon(v, x),
            Domain::Box { center, half_width } => (x - center).iter().all(|c| c.abs() < *half_width),
            Domain::Graph(psi) => D == 2 && x[1] > psi.eval(x[0]),
        }
    }

    /// Distance from `x` to the boundary of the domain.
    pub fn boundary_distance(&self, x: &Point<D>) -> f64 {
        match &self.domain {
            Domain::Polygon(v) => {
                let n = v.len();
                (0..n).map(|i| segment_distance(x, &v[i], &v[(i + 1) % n])).fold(f64::INFINITY, f64::min)
            }
            Domain::Box { center, half_width } => {
                let mut outside = 0.0;
                let mut inside = f64::INFINITY;
                for c in (x - center).iter() {
                    let e = c.abs() - half_width;
                    if e > 0.0 {
                        outside += e * e;
                    }
                    inside = inside.min(-e);
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    inside
                }
            }
            Domain::Graph(_) => self
                .panels
                .iter()
                .map(|p| segment_distance(x, &p.origin, &(p.origin + p.span[0])))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Volume of the enclosed domain (polygon or box).
    pub fn volume(&self) -> Option<f64> {
        match &self.domain {
            Domain::Polygon(v) => Some(signed_area(v)),
            Domain::Box { half_width, .. } => Some((2.0 * half_width).powi(D as i32)),
            Domain::Graph(_) => None,
        }
    }

    /// Position of each panel centroid along its feature, per feature axis.
    fn feature_coordinates(&self, feature: &Feature) -> (Vec<f64>, Vec<f64>) {
        let [n1, n2] = feature.shape;
        let idx = |i: usize, j: usize| feature.panels[i * n2 + j];
        let mut u = vec![0.0; n1];
        let mut v = vec![0.0; n2];
        if D == 2 {
            for i in 1..n1 {
                let (a, b) = (&self.panels[idx(i - 1, 0)], &self.panels[idx(i, 0)]);
                u[i] = u[i - 1] + 0.5 * (a.measure + b.measure);
            }
        } else {
            let first = &self.panels[idx(0, 0)];
            for (i, ui) in u.iter_mut().enumerate() {
                *ui = (self.panels[idx(i, 0)].centroid - first.origin).dot(&first.tangent);
            }
            for (j, vj) in v.iter_mut().enumerate() {
                *vj = (self.panels[idx(0, j)].centroid - first.origin).dot(&first.tangent2);
            }
        }
        (u, v)
    }
}

fn signed_area<const D: usize>(v: &[Point<D>]) -> f64 {
    let n = v.len();
    0.5 * (0..n).map(|i| v[i][0] * v[(i + 1) % n][1] - v[(i + 1) % n][0] * v[i][1]).sum::<f64>()
}

fn segment_distance<const D: usize>(x: &Point<D>, a: &Point<D>, b: &Point<D>) -> f64 {
    let ab = b - a;
    let t = ((x - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (x - (a + ab * t)).norm()
}

fn point_in_polygon<const D: usize>(v: &[Point<D>], x: &Point<D>) -> bool {
    let n = v.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (&v[i], &v[j]);
        if (a[1] > x[1]) != (b[1] > x[1]) && x[0] < (b[0] - a[0]) * (x[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn cross2(a: &Vector<2>, b: &Vector<2>) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn segments_intersect(p1: &Point<2>, p2: &Point<2>, q1: &Point<2>, q2: &Point<2>) -> bool {
    let d1 = cross2(&(q2 - q1), &(p1 - q1));
    let d2 = cross2(&(q2 - q1), &(p2 - q1));
    let d3 = cross2(&(p2 - p1), &(q1 - p1));
    let d4 = cross2(&(p2 - p1), &(q2 - p1));
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
        || [d1, d2, d3, d4].iter().any(|d| *d == 0.0) && {
            let on = |a: &Point<2>, b: &Point<2>, c: &Point<2>| {
                cross2(&(b - a), &(c - a)) == 0.0
                    && c[0] >= a[0].min(b[0])
                    && c[0] <= a[0].max(b[0])
                    && c[1] >= a[1].min(b[1])
                    && c[1] <= a[1].max(b[1])
            };
            on(q1, q2, p1) || on(q1, q2, p2) || on(p1, p2, q1) || on(p1, p2, q2)
        }
}

/// Breakpoints in `[0, 1]` for one edge: `n` uniform panels, then the panel at
/// each graded end halved `levels` times toward that end.
pub fn graded_breaks(n: usize, levels: usize, grade_start: bool, grade_end: bool) -> Vec<f64> {
    let h = 1.0 / n as f64;
    let mut t: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    if grade_start {
        for l in 1..=levels {
            t.push(h * 0.5f64.powi(l as i32));
        }
    }
    if grade_end {
        for l in 1..=levels {
            t.push(1.0 - h * 0.5f64.powi(l as i32));
        }
    }
    t.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    t.dedup();
    t
}

fn exterior_angle(prev: &Point<2>, v: &Point<2>, next: &Point<2>) -> f64 {
    let a = v - prev;
    let b = next - v;
    cross2(&a, &b).atan2(a.dot(&b)).abs()
}

/// Mesh of a simple counterclockwise polygon, `panels_per_edge` uniform panels
/// per edge with `grading` dyadic refinement levels at each corner.
pub fn build_polygon_mesh(vertices: &[Point<2>], panels_per_edge: usize, grading: usize) -> Result<BoundaryMesh<2>> {
    let n = vertices.len();
    if n < 3 {
        return Err(invalid("vertices", "need at least 3"));
    }
    if panels_per_edge == 0 {
        return Err(invalid("panels_per_edge", "must be positive"));
    }
    for i in 0..n {
        if vertices[i] == vertices[(i + 1) % n] {
            return Err(invalid("vertices", format!("repeated vertex {i}")));
        }
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(&vertices[i], &vertices[(i + 1) % n], &vertices[j], &vertices[(j + 1) % n]) {
                return Err(Error::SelfIntersecting(i, j));
            }
        }
    }
    if signed_area(vertices) <= 0.0 {
        return Err(Error::Orientation);
    }
    let corner: Vec<bool> =
        (0..n).map(|i| exterior_angle(&vertices[(i + n - 1) % n], &vertices[i], &vertices[(i + 1) % n]) > CORNER_ANGLE).collect();

    let mut panels = Vec::new();
    let mut edge_of = Vec::new();
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[(i + 1) % n]);
        let breaks = graded_breaks(panels_per_edge, grading, corner[i], corner[(i + 1) % n]);
        let t = (b - a).normalize();
        let normal = Vector::<2>::new(t[1], -t[0]);
        for w in breaks.windows(2) {
            let (p, q) = (a + (b - a) * w[0], a + (b - a) * w[1]);
            panels.push(Panel {
                centroid: (p + q) * 0.5,
                normal,
                tangent: t,
                tangent2: Vector::<2>::zeros(),
                measure: (q - p).norm(),
                feature: 0,
                origin: p,
                span: [q - p, Vector::<2>::zeros()],
            });
            edge_of.push(i);
        }
    }
    // Features are maximal chains of edges between corners.
    let mut features = Vec::new();
    let lipschitz = 0.0;
    if corner.iter().all(|c| !c) {
        let all: Vec<usize> = (0..panels.len()).collect();
        features.push(Feature { shape: [all.len(), 1], panels: all, periodic: true });
    } else {
        let start = corner.iter().position(|c| *c).expect("some corner");
        let first_panel = edge_of.iter().position(|&e| e == start).expect("edge has panels");
        let total = panels.len();
        let mut current: Vec<usize> = Vec::new();
        for k in 0..total {
            let p = (first_panel + k) % total;
            let e = edge_of[p];
            let starts_edge = k == 0 || edge_of[(p + total - 1) % total] != e;
            if starts_edge && corner[e] && !current.is_empty() {
                features.push(Feature { shape: [current.len(), 1], panels: std::mem::take(&mut current), periodic: false });
            }
            current.push(p);
        }
        features.push(Feature { shape: [current.len(), 1], panels: current, periodic: false });
    }
    for (f, feat) in features.iter().enumerate() {
        for &p in &feat.panels {
            panels[p].feature = f;
        }
    }
    Ok(BoundaryMesh::from_parts(panels, features, Domain::Polygon(vertices.to_vec()), grading, lipschitz))
}

/// Square `[c - h, c + h]^2`.
pub fn square_vertices(center: Point<2>, half_width: f64) -> Vec<Point<2>> {
    let h = half_width;
    [(-h, -h), (h, -h), (h, h), (-h, h)].iter().map(|(x, y)| center + Vector::<2>::new(*x, *y)).collect()
}

/// Unit square centered at the origin.
pub fn unit_square(panels_per_edge: usize, grading: usize) -> Result<BoundaryMesh<2>> {
    build_polygon_mesh(&square_vertices(Point::<2>::zeros(), 0.5), panels_per_edge, grading)
}

/// Regular `n`-gon inscribed in the circle of the given radius.
pub fn circle_mesh(center: Point<2>, radius: f64, n: usize) -> Result<BoundaryMesh<2>> {
    if n < 17 {
        return Err(invalid("n", "at least 17 sides are needed for a smooth circle approximation"));
    }
    let v: Vec<Point<2>> = (0..n)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / n as f64;
            center + Vector::<2>::new(t.cos(), t.sin()) * radius
        })
        .collect();
    build_polygon_mesh(&v, 1, 0)
}

/// Surface mesh of the cube `center + [-h, h]^3`, graded toward its edges.
pub fn build_cube_mesh(center: Point<3>, half_width: f64, panels_per_side: usize, grading: usize) -> Result<BoundaryMesh<3>> {
    if !(half_width > 0.0) {
        return Err(invalid("half_width", "must be positive"));
    }
    if panels_per_side == 0 {
        return Err(invalid("panels_per_side", "must be positive"));
    }
    let breaks: Vec<f64> =
        graded_breaks(panels_per_side, grading, true, true).iter().map(|t| -half_width + 2.0 * half_width * t).collect();
    let m = breaks.len() - 1;
    let mut panels = Vec::with_capacity(6 * m * m);
    let mut features = Vec::with_capacity(6);
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut normal = Vector::<3>::zeros();
            normal[axis] = sign;
            // (u, v, n) right-handed so that u x v = n
            let (ua, va) = if sign > 0.0 { ((axis + 1) % 3, (axis + 2) % 3) } else { ((axis + 2) % 3, (axis + 1) % 3) };
            let (mut eu, mut ev) = (Vector::<3>::zeros(), Vector::<3>::zeros());
            eu[ua] = 1.0;
            ev[va] = 1.0;
            let f = features.len();
            let mut ids = Vec::with_capacity(m * m);
            for i in 0..m {
                for j in 0..m {
                    let (du, dv) = (breaks[i + 1] - breaks[i], breaks[j + 1] - breaks[j]);
                    let origin = center + normal * half_width + eu * breaks[i] + ev * breaks[j];
                    ids.push(panels.len());
                    panels.push(Panel {
                        centroid: origin + eu * (0.5 * du) + ev * (0.5 * dv),
                        normal,
                        tangent: eu,
                        tangent2: ev,
                        measure: du * dv,
                        feature: f,
                        origin,
                        span: [eu * du, ev * dv],
                    });
                }
            }
            features.push(Feature { panels: ids, shape: [m, m], periodic: false });
        }
    }
    Ok(BoundaryMesh::from_parts(panels, features, Domain::Box { center, half_width }, grading, 0.0))
}

pub fn unit_cube(panels_per_side: usize, grading: usize) -> Result<BoundaryMesh<3>> {
    build_cube_mesh(Point::<3>::zeros(), 0.5, panels_per_side, grading)
}

/// Three-point derivative weights at `x[i]` from nodes `x[a], x[b], x[c]`.
fn fd_weights(x0: f64, xs: [f64; 3]) -> [f64; 3] {
    let [a, b, c] = xs;
    [
        ((x0 - b) + (x0 - c)) / ((a - b) * (a - c)),
        ((x0 - a) + (x0 - c)) / ((b - a) * (b - c)),
        ((x0 - a) + (x0 - b)) / ((c - a) * (c - b)),
    ]
}

/// Derivative of samples `f` at positions `x` along a line of panels.
fn line_derivative(x: &[f64], f: &[f64], periodic: bool, period: f64) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let (idx, pos): ([usize; 3], [f64; 3]) = if periodic {
                let (l, r) = ((i + n - 1) % n, (i + 1) % n);
                let xl = if i == 0 { x[l] - period } else { x[l] };
                let xr = if i == n - 1 { x[r] + period } else { x[r] };
                ([l, i, r], [xl, x[i], xr])
            } else if i == 0 {
                ([0, 1, 2], [x[0], x[1], x[2]])
            } else if i == n - 1 {
                ([n - 3, n - 2, n - 1], [x[n - 3], x[n - 2], x[n - 1]])
            } else {
                ([i - 1, i, i + 1], [x[i - 1], x[i], x[i + 1]])
            };
            let w = fd_weights(x[i], pos);
            w[0] * f[idx[0]] + w[1] * f[idx[1]] + w[2] * f[idx[2]]
        })
        .collect()
}

/// Tangential gradient by second-order finite differences along each feature.
pub fn tangential_gradient<const D: usize>(mesh: &BoundaryMesh<D>, f: &BoundaryFunction<f64>) -> Result<BoundaryFunction<Vector<D>>> {
    mesh.check(f)?;
    let mut out = vec![Vector::<D>::zeros(); mesh.len()];
    for (fi, feat) in mesh.features.iter().enumerate() {
        let [n1, n2] = feat.shape;
        if n1 < 3 || (D == 3 && n2 < 3) {
            return Err(Error::MeshTooCoarse { feature: fi, panels: n1.min(if D == 3 { n2 } else { n1 }) });
        }
        let (u, v) = mesh.feature_coordinates(feat);
        let period = if feat.periodic { feat.panels.iter().map(|&p| mesh.panels[p].measure).sum() } else { 0.0 };
        for j in 0..n2 {
            let line: Vec<f64> = (0..n1).map(|i| f.values[feat.panels[i * n2 + j]]).collect();
            let d = line_derivative(&u, &line, feat.periodic, period);
            for i in 0..n1 {
                let p = feat.panels[i * n2 + j];
                out[p] += mesh.panels[p].tangent * d[i];
            }
        }
        if D == 3 {
            for i in 0..n1 {
                let line: Vec<f64> = (0..n2).map(|j| f.values[feat.panels[i * n2 + j]]).collect();
                let d = line_derivative(&v, &line, false, 0.0);
                for j in 0..n2 {
                    let p = feat.panels[i * n2 + j];
                    out[p] += mesh.panels[p].tangent2 * d[j];
                }
            }
        }
    }
    mesh.wrap(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryNorms {
    pub l2: f64,
    pub w12: f64,
}

pub fn l2_norm<const D: usize>(mesh: &BoundaryMesh<D>, f: &[f64]) -> f64 {
    mesh.panels.iter().zip(f).map(|(p, v)| p.measure * v * v).sum::<f64>().sqrt()
}

pub fn l2_norm_vec<const D: usize>(mesh: &BoundaryMesh<D>, f: &[Vector<D>]) -> f64 {
    mesh.panels.iter().zip(f).map(|(p, v)| p.measure * v.norm_squared()).sum::<f64>().sqrt()
}

/// `L^2` norm and the scale-invariant `W^{1,2}` norm
/// `|grad_tan f|_2 + sigma^(1/(1-d)) |f|_2`.
pub fn boundary_norms<const D: usize>(mesh: &BoundaryMesh<D>, f: &BoundaryFunction<f64>) -> Result<BoundaryNorms> {
    let l2 = l2_norm(mesh, f);
    let grad = tangential_gradient(mesh, f)?;
    let w12 = l2_norm_vec(mesh, &grad) + mesh.sigma.powf(1.0 / (1.0 - D as f64)) * l2;
    Ok(BoundaryNorms { l2, w12 })
}

/// Interior cone samples along the inward normal at panel `panel`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConeSamples<const D: usize> {
    pub points: Vec<Point<D>>,
    pub depths: Vec<f64>,
    /// Depths dropped because the sample left the domain or the cone.
    pub omitted: Vec<f64>,
}

/// Samples `P - t n` for each depth `t`, kept if inside the domain and inside
/// the cone `|Z - P| < (1 + aperture) dist(Z, boundary)`.
pub fn nt_sample<const D: usize>(mesh: &BoundaryMesh<D>, panel: usize, aperture: f64, depths: &[f64]) -> Result<ConeSamples<D>> {
    if panel >= mesh.len() {
        return Err(invalid("panel", format!("{panel} out of range")));
    }
    if !(aperture > 0.0) {
        return Err(invalid("aperture", "must be positive"));
    }
    if depths.iter().any(|t| !(*t > 0.0)) {
        return Err(invalid("depths", "must be positive"));
    }
    if depths.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("depths", "must decrease toward 0"));
    }
    let p = &mesh.panels[panel];
    let mut s = ConeSamples { points: Vec::new(), depths: Vec::new(), omitted: Vec::new() };
    for &t in depths {
        let z = p.centroid - p.normal * t;
        if mesh.contains(&z) && t < (1.0 + aperture) * mesh.boundary_distance(&z) {
            s.points.push(z);
            s.depths.push(t);
        } else {
            s.omitted.push(t);
        }
    }
    Ok(s)
}

/// Per-panel maximum of `|u|` over cone samples.
pub fn nt_maximal<const D: usize, F>(mesh: &BoundaryMesh<D>, u: F, aperture: f64, depths: &[f64]) -> Result<BoundaryFunction<f64>>
where
    F: Fn(&Point<D>) -> f64 + Sync,
{
    let samples: Vec<ConeSamples<D>> = (0..mesh.len()).map(|i| nt_sample(mesh, i, aperture, depths)).collect::<Result<_>>()?;
    let values = samples.par_iter().map(|s| s.points.iter().map(|z| u(z).abs()).fold(0.0, f64::max)).collect();
    mesh.wrap(values)
}

/// Extrapolates `v(t)` to `t = 0` from samples at `4t, 2t, t` (quadratic model).
pub fn richardson(v4t: f64, v2t: f64, vt: f64) -> f64 {
    (8.0 * vt - 6.0 * v2t + v4t) / 3.0
}

/// Piecewise linear Lipschitz graph with `psi(0) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub enum Psi {
    Flat,
    /// `slope |x|`.
    Cone { slope: f64 },
    /// Triangle wave of the given slope vanishing at multiples of `period`.
    Sawtooth { slope: f64, period: f64 },
}

impl Psi {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Psi::Flat => 0.0,
            Psi::Cone { slope } => slope * x.abs(),
            Psi::Sawtooth { slope, period } => {
                let r = x.rem_euclid(period);
                slope * r.min(period - r)
            }
        }
    }

    /// Kinks of `psi` strictly inside `(a, b)`.
    pub fn breakpoints(&self, a: f64, b: f64) -> Vec<f64> {
        match *self {
            Psi::Flat => Vec::new(),
            Psi::Cone { .. } => [0.0].into_iter().filter(|x| *x > a && *x < b).collect(),
            Psi::Sawtooth { period, .. } => {
                let half = 0.5 * period;
                let k0 = (a / half).floor() as i64;
                let k1 = (b / half).ceil() as i64;
                (k0..=k1).map(|k| k as f64 * half).filter(|x| *x > a && *x < b).collect()
            }
        }
    }

    fn slope_at(&self, x: f64) -> f64 {
        let h = 1e-9;
        (self.eval(x + h) - self.eval(x - h)) / (2.0 * h)
    }
}

/// Localization geometry above a Lipschitz graph (2D).
#[derive(Clone, Debug)]
pub struct GraphPatch {
    pub psi: Psi,
    pub lipschitz: f64,
    pub r: f64,
    /// Panels per unit length.
    pub resolution: usize,
    /// `Delta(2r)`.
    pub outer: BoundaryMesh<2>,
    /// `Delta(r)`.
    pub inner: BoundaryMesh<2>,
}

/// Quadrature rule: points, weights, and (for surface rules) unit normals.
#[derive(Clone, Debug, Default)]
pub struct Rule {
    pub points: Vec<Point<2>>,
    pub weights: Vec<f64>,
    pub normals: Vec<Vector<2>>,
}

impl Rule {
    pub fn integrate(&self, f: impl Fn(&Point<2>) -> f64 + Sync) -> f64 {
        self.points.par_iter().zip(&self.weights).map(|(p, w)| w * f(p)).collect::<Vec<_>>().iter().sum()
    }
}

pub const GRAPH_QUAD_ORDER: usize = 8;

impl GraphPatch {
    /// `10 sqrt(d) (M + 1)`.
    pub fn height_constant(&self) -> f64 {
        10.0 * 2f64.sqrt() * (self.lipschitz + 1.0)
    }

    fn x_breaks(&self, a: f64, b: f64, max_len: f64) -> Vec<f64> {
        let mut xs = vec![a];
        xs.extend(self.psi.breakpoints(a, b));
        xs.push(b);
        let mut out = vec![a];
        for w in xs.windows(2) {
            let k = ((w[1] - w[0]) / max_len).ceil().max(1.0) as usize;
            for i in 1..=k {
                out.push(w[0] + (w[1] - w[0]) * i as f64 / k as f64);
            }
        }
        out
    }

    /// Rule for `{|x'| < rho, lower(x') < x_d < upper(x')}` with pieces of size `max_len`.
    fn region_rule(&self, rho: f64, lower: impl Fn(f64) -> f64, upper: impl Fn(f64) -> f64, max_len: f64) -> Rule {
        let (gx, gw) = crate::quad::gauss_legendre(GRAPH_QUAD_ORDER);
        let mut rule = Rule::default();
        for w in self.x_breaks(-rho, rho, max_len).windows(2) {
            let (a, b) = (w[0], w[1]);
            for (xi, wi) in gx.iter().zip(&gw) {
                let x = 0.5 * (a + b) + 0.5 * (b - a) * xi;
                let (lo, hi) = (lower(x), upper(x));
                let k = ((hi - lo) / max_len).ceil().max(1.0) as usize;
                let dy = (hi - lo) / k as f64;
                for piece in 0..k {
                    let y0 = lo + piece as f64 * dy;
                    for (yj, wj) in gx.iter().zip(&gw) {
                        rule.points.push(Point::<2>::new(x, y0 + 0.5 * dy * (1.0 + yj)));
                        rule.weights.push(0.25 * (b - a) * dy * wi * wj);
                    }
                }
            }
        }
        rule
    }

    /// Volume rule for `D(rho) = {|x'| < rho, psi < x_d < C rho}` with `C` the height constant.
    pub fn cap_rule(&self, rho: f64, max_len: f64) -> Rule {
        let top = self.height_constant() * rho;
        let psi = self.psi.clone();
        self.region_rule(rho, move |x| psi.eval(x), move |_| top, max_len)
    }

    /// Boundary layer `{|x'| < rho, psi < x_d < psi + 1}`.
    pub fn layer_rule(&self, rho: f64, max_len: f64) -> Rule {
        let (p1, p2) = (self.psi.clone(), self.psi.clone());
        self.region_rule(rho, move |x| p1.eval(x), move |x| p2.eval(x) + 1.0, max_len)
    }

    /// Slab `{|x'| < rho, C rho < x_d < C rho + 1}`.
    pub fn top_slab_rule(&self, rho: f64, max_len: f64) -> Rule {
        let top = self.height_constant() * rho;
        self.region_rule(rho, move |_| top, move |_| top + 1.0, max_len)
    }

    /// Surface rule with outward normals on the boundary of `D(rho)`.
    pub fn cap_boundary_rule(&self, rho: f64, max_len: f64) -> Rule {
        let (gx, gw) = crate::quad::gauss_legendre(GRAPH_QUAD_ORDER);
        let top = self.height_constant() * rho;
        let mut rule = Rule::default();
        let push_segment = |a: Point<2>, b: Point<2>, normal: Vector<2>, rule: &mut Rule| {
            let len = (b - a).norm();
            let k = (len / max_len).ceil().max(1.0) as usize;
            for piece in 0..k {
                let (p, q) = (a + (b - a) * (piece as f64 / k as f64), a + (b - a) * ((piece + 1) as f64 / k as f64));
                for (xi, wi) in gx.iter().zip(&gw) {
                    rule.points.push(p + (q - p) * (0.5 * (1.0 + xi)));
                    rule.weights.push(0.5 * wi * len / k as f64);
                    rule.normals.push(normal);
                }
            }
        };
        let xs = {
            let mut v = vec![-rho];
            v.extend(self.psi.breakpoints(-rho, rho));
            v.push(rho);
            v
        };
        for w in xs.windows(2) {
            let (a, b) = (Point::<2>::new(w[0], self.psi.eval(w[0])), Point::<2>::new(w[1], self.psi.eval(w[1])));
            let t = (b - a).normalize();
            push_segment(a, b, Vector::<2>::new(t[1], -t[0]), &mut rule);
        }
        let (left, right) = (self.psi.eval(-rho), self.psi.eval(rho));
        push_segment(Point::<2>::new(rho, right), Point::<2>::new(rho, top), Vector::<2>::new(1.0, 0.0), &mut rule);
        push_segment(Point::<2>::new(rho, top), Point::<2>::new(-rho, top), Vector::<2>::new(0.0, 1.0), &mut rule);
        push_segment(Point::<2>::new(-rho, top), Point::<2>::new(-rho, left), Vector::<2>::new(-1.0, 0.0), &mut rule);
        rule
    }
}

fn graph_mesh(psi: &Psi, half: f64, resolution: usize, lipschitz: f64) -> BoundaryMesh<2> {
    let mut xs = vec![-half];
    xs.extend(psi.breakpoints(-half, half));
    xs.push(half);
    let mut panels = Vec::new();
    for w in xs.windows(2) {
        let k = ((w[1] - w[0]) * resolution as f64).ceil().max(1.0) as usize;
        for i in 0..k {
            let (x0, x1) = (w[0] + (w[1] - w[0]) * i as f64 / k as f64, w[0] + (w[1] - w[0]) * (i + 1) as f64 / k as f64);
            let (p, q) = (Point::<2>::new(x0, psi.eval(x0)), Point::<2>::new(x1, psi.eval(x1)));
            let t = (q - p).normalize();
            panels.push(Panel {
                centroid: (p + q) * 0.5,
                normal: Vector::<2>::new(t[1], -t[0]),
                tangent: t,
                tangent2: Vector::<2>::zeros(),
                measure: (q - p).norm(),
                feature: 0,
                origin: p,
                span: [q - p, Vector::<2>::zeros()],
            });
        }
    }
    let feature = Feature { panels: (0..panels.len()).collect(), shape: [panels.len(), 1], periodic: false };
    BoundaryMesh::from_parts(panels, vec![feature], Domain::Graph(psi.clone()), 0, lipschitz)
}

/// Builds `Delta(2r)`, `Delta(r)` and the volume rules above the graph of `psi`.
pub fn build_graph_patch(psi: Psi, lipschitz: f64, r: f64, resolution: usize) -> Result<GraphPatch> {
    if !(r > 0.0) {
        return Err(invalid("r", "must be positive"));
    }
    if resolution == 0 {
        return Err(invalid("resolution", "must be positive"));
    }
    if psi.eval(0.0) != 0.0 {
        return Err(invalid("psi", "must vanish at the origin"));
    }
    if let Psi::Sawtooth { period, .. } = psi {
        if !(period > 0.0) {
            return Err(invalid("period", "must be positive"));
        }
    }
    // Sampled difference quotients over a grid finer than the kinks.
    let n = 4000;
    let xs: Vec<f64> = (0..=n).map(|i| -4.0 * r + 8.0 * r * i as f64 / n as f64).collect();
    let mut worst = (0.0, 0.0, 0.0);
    for (i, a) in xs.iter().enumerate() {
        for b in xs.iter().skip(i + 1).step_by(97).chain(xs.get(i + 1)) {
            let slope = ((psi.eval(*b) - psi.eval(*a)) / (b - a)).abs();
            if slope > worst.0 {
                worst = (slope, *a, *b);
            }
        }
    }
    for x in &xs {
        let s = psi.slope_at(*x).abs();
        if s > worst.0 + 1e-6 {
            worst = (s, *x, *x);
        }
    }
    if worst.0 > lipschitz * (1.0 + 1e-12) {
        return Err(Error::LipschitzViolation { bound: lipschitz, slope: worst.0, a: worst.1, b: worst.2 });
    }
    Ok(GraphPatch {
        outer: graph_mesh(&psi, 2.0 * r, resolution, lipschitz),
        inner: graph_mesh(&psi, r, resolution, lipschitz),
        psi,
        lipschitz,
        r,
        resolution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn square_counts_and_closure() {
        let m = unit_square(8, 0).unwrap();
        assert_eq!(m.len(), 32);
        assert!((m.sigma() - 4.0).abs() < 1e-12);
        assert!(m.closure().norm() < 1e-12);
        assert_eq!(m.features().len(), 4);
        for p in m.panels() {
            assert!((p.normal.norm() - 1.0).abs() < 1e-15);
            assert!(p.normal.dot(&p.centroid) > 0.0);
        }
        let div: f64 = m.panels().iter().map(|p| p.centroid.dot(&p.normal) * p.measure).sum();
        assert!((div - 2.0).abs() < 1e-12);
    }

    #[test]
    fn l_shape_and_orientation() {
        let v: Vec<Point<2>> = [(0.0, 0.0), (2.0, 0.0), (2.0, 1.0), (1.0, 1.0), (1.0, 2.0), (0.0, 2.0)]
            .iter()
            .map(|(x, y)| Point::<2>::new(*x, *y))
            .collect();
        let m = build_polygon_mesh(&v, 4, 2).unwrap();
        assert!((m.sigma() - 8.0).abs() < 1e-12);
        assert!(m.closure().norm() < 1e-12);
        assert_eq!(m.features().len(), 6);
        let rev: Vec<Point<2>> = v.iter().rev().copied().collect();
        assert!(matches!(build_polygon_mesh(&rev, 4, 0), Err(Error::Orientation)));
        let bow: Vec<Point<2>> =
            [(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)].iter().map(|(x, y)| Point::<2>::new(*x, *y)).collect();
        assert!(matches!(build_polygon_mesh(&bow, 2, 0), Err(Error::SelfIntersecting(..))));
    }

    #[test]
    fn grading_ratio() {
        let m = unit_square(4, 3).unwrap();
        let sizes: Vec<f64> = m.features()[0].panels.iter().map(|&p| m.panels()[p].measure).collect();
        assert!((sizes[0] - 0.25 / 8.0).abs() < 1e-15);
        for k in 0..3 {
            assert!((sizes[k + 1] / sizes[k] - if k == 0 { 1.0 } else { 2.0 }).abs() < 1e-12);
        }
        assert!((m.min_panel_size() / m.max_panel_size() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn cube_counts() {
        let m = unit_cube(8, 0).unwrap();
        assert_eq!(m.len(), 384);
        assert!((m.sigma() - 6.0).abs() < 1e-12);
        assert!(m.closure().norm() < 1e-12);
        let div: f64 = m.panels().iter().map(|p| p.centroid.dot(&p.normal) * p.measure).sum();
        assert!((div - 3.0).abs() < 1e-12);
        for p in m.panels() {
            assert!((p.tangent.cross(&p.tangent2) - p.normal).norm() < 1e-15);
        }
        let g = unit_cube(4, 2).unwrap();
        assert!((g.min_panel_size() / g.max_panel_size() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn circle_tangential_derivative() {
        let mut errs = Vec::new();
        for n in [128, 256] {
            let m = circle_mesh(Point::<2>::zeros(), 1.0, n).unwrap();
            assert_eq!(m.features().len(), 1);
            let f = m.function(|p| p.centroid[0]);
            let g = tangential_gradient(&m, &f).unwrap();
            let err = m
                .panels()
                .iter()
                .zip(g.iter())
                .map(|(p, gv)| {
                    let th = p.centroid[1].atan2(p.centroid[0]);
                    let t = Vector::<2>::new(-th.sin(), th.cos());
                    (gv - t * (-th.sin())).norm()
                })
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs[1] < 1e-3);
        assert!(errs[0] / errs[1] > 3.5, "{errs:?}");
    }

    #[test]
    fn flat_face_and_constants() {
        let m = unit_square(8, 1).unwrap();
        let c = m.function(|_| 3.0);
        assert!(tangential_gradient(&m, &c).unwrap().iter().all(|v| v.norm() < 1e-12));
        let xn = m.function(|p| p.centroid.dot(&p.normal));
        assert!(tangential_gradient(&m, &xn).unwrap().iter().all(|v| v.norm() < 1e-12));
        let coarse = unit_square(2, 0).unwrap();
        assert!(matches!(tangential_gradient(&coarse, &coarse.function(|_| 1.0)), Err(Error::MeshTooCoarse { .. })));
    }

    #[test]
    fn norms_of_one() {
        let m = unit_square(8, 0).unwrap();
        let n = boundary_norms(&m, &m.function(|_| 1.0)).unwrap();
        assert!((n.l2 - 2.0).abs() < 1e-12);
        assert!((n.w12 - 0.5).abs() < 1e-12);
        let z = boundary_norms(&m, &m.function(|_| 0.0)).unwrap();
        assert_eq!((z.l2, z.w12), (0.0, 0.0));
    }

    #[test]
    fn norm_scaling_law() {
        let base = unit_square(16, 0).unwrap();
        let f = |x: &Point<2>| (3.0 * x[0]).sin() + x[1] * x[1];
        let mut vals = Vec::new();
        for rho in [1.0, 2.0, 4.0] {
            let m = base.scaled(rho).unwrap();
            let g = m.function(|p| f(&(p.centroid / rho)));
            vals.push(boundary_norms(&m, &g).unwrap().w12 * rho.powf(0.5));
        }
        assert!((vals[0] - vals[1]).abs() < 1e-12 * vals[0] && (vals[0] - vals[2]).abs() < 1e-12 * vals[0]);
        let cube = unit_cube(6, 0).unwrap();
        let mut v3 = Vec::new();
        for rho in [1.0, 2.0] {
            let m = cube.scaled(rho).unwrap();
            let g = m.function(|p| (p.centroid[0] / rho).sin());
            // (3 - d) / 2 = 0 in 3D
            v3.push(boundary_norms(&m, &g).unwrap().w12);
        }
        assert!((v3[0] - v3[1]).abs() < 1e-12 * v3[0]);
    }

    #[test]
    fn cone_samples() {
        let m = unit_square(8, 0).unwrap();
        let depths = default_depths();
        let mid = m.panels().iter().position(|p| p.centroid[0] == 0.5 && p.centroid[1].abs() < 0.1).unwrap();
        let s = nt_sample(&m, mid, 1.0, &depths).unwrap();
        assert_eq!(s.points.len(), 10);
        for (z, t) in s.points.iter().zip(&s.depths) {
            if *t <= 0.25 {
                assert!((m.boundary_distance(z) - t).abs() < 1e-14);
            }
        }
        let corner = m.features()[0].panels[0];
        let s = nt_sample(&m, corner, 1.0, &depths).unwrap();
        assert!(s.points.len() < 10 && !s.omitted.is_empty());
        for i in 0..m.len() {
            for z in nt_sample(&m, i, 1.0, &depths).unwrap().points {
                assert!(m.contains(&z));
            }
        }
        assert!(nt_sample(&m, 0, 1.0, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn maximal_function() {
        let m = unit_square(8, 0).unwrap();
        let depths = default_depths();
        let c = nt_maximal(&m, |_| -2.5, 1.0, &depths).unwrap();
        assert!(c.iter().all(|v| *v == 2.5));
        let u = nt_maximal(&m, |x| x[0], 1.0, &depths).unwrap();
        for (p, v) in m.panels().iter().zip(u.iter()) {
            if p.centroid[0] == 0.5 && p.centroid[1].abs() < 0.3 {
                assert!((v - (0.5 - depths[9])).abs() < 1e-15);
            }
        }
        let shallow = nt_maximal(&m, |x| x[0] * x[1], 1.0, &depths[..5]).unwrap();
        let deep = nt_maximal(&m, |x| x[0] * x[1], 1.0, &depths).unwrap();
        assert!(shallow.iter().zip(deep.iter()).all(|(a, b)| a <= b));
    }

    #[test]
    fn richardson_is_exact_for_quadratics() {
        let v = |t: f64| 1.5 - 0.7 * t + 3.0 * t * t;
        assert!((richardson(v(0.4), v(0.2), v(0.1)) - 1.5).abs() < 1e-14);
    }

    #[test]
    fn graph_patches() {
        let flat = build_graph_patch(Psi::Flat, 0.0, 1.0, 16).unwrap();
        assert!((flat.inner.sigma() - 2.0).abs() < 1e-12);
        assert!(build_graph_patch(Psi::Cone { slope: 0.5 }, 0.5, 1.0, 16).is_ok());
        assert!(matches!(build_graph_patch(Psi::Cone { slope: 0.5 }, 0.4, 1.0, 16), Err(Error::LipschitzViolation { .. })));
        let saw = build_graph_patch(Psi::Sawtooth { slope: 1.0, period: 0.5 }, 1.0, 1.0, 16).unwrap();
        assert!((saw.inner.sigma() - 2f64.sqrt() * 2.0).abs() < 1e-12);
        for p in saw.outer.panels() {
            assert!(p.normal[1] < 0.0);
        }
    }

    #[test]
    fn graph_rules() {
        let g = build_graph_patch(Psi::Sawtooth { slope: 1.0, period: 0.5 }, 1.0, 1.0, 16).unwrap();
        let top = g.height_constant();
        // area of D(1): 2 * top - int psi = 2 top - 2 * (0.25 * 0.25 / 2) * 4
        let area = g.cap_rule(1.0, 0.25).integrate(|_| 1.0);
        assert!((area - (2.0 * top - 0.25)).abs() < 1e-10, "{area}");
        assert!((g.layer_rule(1.0, 0.25).integrate(|_| 1.0) - 2.0).abs() < 1e-12);
        // divergence theorem for F = (x, 0): int x n_1 = area
        let b = g.cap_boundary_rule(1.0, 0.25);
        let flux: f64 = b.points.iter().zip(&b.weights).zip(&b.normals).map(|((p, w), n)| w * p[0] * n[0]).sum();
        assert!((flux - area).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn regular_polygons_close(n in 3usize..40, k in 1usize..6, r in 0.1f64..5.0) {
            let v: Vec<Point<2>> = (0..n).map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                Point::<2>::new(r * t.cos(), r * t.sin())
            }).collect();
            let m = build_polygon_mesh(&v, k, 1).unwrap();
            prop_assert!(m.closure().norm() < 1e-11 * r);
            let perim = 2.0 * n as f64 * r * (PI / n as f64).sin();
            prop_assert!((m.sigma() - perim).abs() < 1e-12 * perim);
        }
    }
}
