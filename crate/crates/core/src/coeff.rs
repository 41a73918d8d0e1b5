//! Periodic, symmetric, elliptic coefficient fields on the unit torus.
//!
//! Every field is a finite trigonometric polynomial
//! `A(Y) = M + sum_k [C_k cos(2 pi k.Y) + S_k sin(2 pi k.Y)]` with integer wave
//! vectors `k`, so periodicity is exact and the Lipschitz/Holder constants are
//! finite and computable.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::small::{max_asymmetry, sym_eigenvalues, sym_norm, Mat, Point};

/// Points per dimension of the grid on which ellipticity is verified.
pub const ELLIPTICITY_GRID: usize = 64;

const DEFAULT_HOLDER_EXPONENT: f64 = 0.5;
const HOLDER_PAIRS: usize = 4096;

/// Serializable construction recipe for a coefficient field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDescriptor {
    pub dim: usize,
    /// Declared Holder exponent, recorded as metadata.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holder_exponent: Option<f64>,
    pub coefficients: Coefficients,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coefficients {
    /// `A(Y) = matrix`.
    Constant { matrix: Vec<Vec<f64>> },
    /// Isotropic laminate `a(Y) = mean + amplitude * sin(2 pi frequency Y_axis)`.
    Layered {
        axis: usize,
        mean: f64,
        amplitude: f64,
        #[serde(default = "one")]
        frequency: u32,
    },
    /// General symmetric trigonometric polynomial.
    Trig { mean: Vec<Vec<f64>>, modes: Vec<TrigMode> },
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigMode {
    pub wave: Vec<i32>,
    #[serde(default)]
    pub cos: Vec<Vec<f64>>,
    #[serde(default)]
    pub sin: Vec<Vec<f64>>,
}

impl FieldDescriptor {
    pub fn identity(dim: usize) -> Self {
        let matrix = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { dim, holder_exponent: None, coefficients: Coefficients::Constant { matrix } }
    }

    pub fn constant(matrix: Vec<Vec<f64>>) -> Self {
        Self { dim: matrix.len(), holder_exponent: None, coefficients: Coefficients::Constant { matrix } }
    }

    pub fn layered(dim: usize, axis: usize, mean: f64, amplitude: f64) -> Self {
        Self {
            dim,
            holder_exponent: None,
            coefficients: Coefficients::Layered { axis, mean, amplitude, frequency: 1 },
        }
    }

    /// The smooth anisotropic test field used throughout the verification suite:
    /// `A = (1.5 + 0.4 sin(2 pi Y1) cos(2 pi Y2)) I + 0.25 cos(2 pi (Y1 + Y2)) (E12 + E21)`
    /// in 2D, and its natural extension to 3D.
    pub fn trig_test(dim: usize) -> Self {
        let zero = || vec![vec![0.0; dim]; dim];
        let mut mean = zero();
        for (i, row) in mean.iter_mut().enumerate() {
            row[i] = 1.5;
        }
        let mut modes = Vec::new();
        // sin(a) cos(b) = [sin(a+b) + sin(a-b)] / 2
        for sign in [1, -1] {
            let mut wave = vec![0; dim];
            wave[0] = 1;
            wave[1] = sign;
            let mut s = zero();
            for (i, row) in s.iter_mut().enumerate() {
                row[i] = 0.2;
            }
            modes.push(TrigMode { wave, cos: Vec::new(), sin: s });
        }
        let mut wave = vec![0; dim];
        wave[0] = 1;
        wave[1] = 1;
        let mut c = zero();
        c[0][1] = 0.25;
        c[1][0] = 0.25;
        modes.push(TrigMode { wave, cos: c, sin: Vec::new() });
        if dim == 3 {
            let mut wave = vec![0; dim];
            wave[2] = 1;
            let mut c = zero();
            c[2][2] = 0.3;
            modes.push(TrigMode { wave, cos: c, sin: Vec::new() });
        }
        Self { dim, holder_exponent: None, coefficients: Coefficients::Trig { mean, modes } }
    }

    /// Random symmetric trigonometric polynomial `shift * I + sum of n_modes modes`
    /// with entries uniform in `[-amplitude, amplitude]` and wave components in
    /// `-2..=2`. Positivity is not guaranteed; `make_field` decides.
    pub fn random_trig(dim: usize, seed: u64, n_modes: usize, amplitude: f64, shift: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sym = |rng: &mut ChaCha8Rng| {
            let mut m = vec![vec![0.0; dim]; dim];
            for i in 0..dim {
                for j in i..dim {
                    let v = rng.gen_range(-amplitude..=amplitude);
                    m[i][j] = v;
                    m[j][i] = v;
                }
            }
            m
        };
        let mut modes = Vec::with_capacity(n_modes);
        while modes.len() < n_modes {
            let wave: Vec<i32> = (0..dim).map(|_| rng.gen_range(-2..=2)).collect();
            if wave.iter().all(|&k| k == 0) {
                continue;
            }
            let cos = sym(&mut rng);
            let sin = sym(&mut rng);
            modes.push(TrigMode { wave, cos, sin });
        }
        let mut mean = vec![vec![0.0; dim]; dim];
        for (i, row) in mean.iter_mut().enumerate() {
            row[i] = shift;
        }
        Self { dim, holder_exponent: None, coefficients: Coefficients::Trig { mean, modes } }
    }
}

#[derive(Clone, Debug)]
struct Mode<const D: usize> {
    wave: [i32; D],
    cos: Mat<D>,
    sin: Mat<D>,
}

/// A coefficient field `A in Lambda(mu, lambda, tau)`.
#[derive(Clone, Debug)]
pub struct CoefficientField<const D: usize> {
    descriptor: FieldDescriptor,
    mean: Mat<D>,
    modes: Vec<Mode<D>>,
    mu: f64,
    holder_exponent: f64,
    holder_constant: f64,
    fingerprint: u64,
}

fn to_mat<const D: usize>(rows: &[Vec<f64>], name: &'static str) -> Result<Mat<D>> {
    if rows.is_empty() {
        return Ok(Mat::<D>::zeros());
    }
    if rows.len() != D || rows.iter().any(|r| r.len() != D) {
        return Err(invalid(name, format!("expected a {D}x{D} matrix")));
    }
    Ok(Mat::<D>::from_fn(|i, j| rows[i][j]))
}

/// Builds and validates a field from its descriptor.
pub fn make_field<const D: usize>(descriptor: &FieldDescriptor) -> Result<CoefficientField<D>> {
    if descriptor.dim != D {
        return Err(Error::DimensionMismatch { expected: D, found: descriptor.dim });
    }
    let (mean, modes) = match &descriptor.coefficients {
        Coefficients::Constant { matrix } => {
            if matrix.is_empty() {
                return Err(invalid("matrix", "empty"));
            }
            (to_mat::<D>(matrix, "matrix")?, Vec::new())
        }
        Coefficients::Layered { axis, mean, amplitude, frequency } => {
            if *axis >= D {
                return Err(invalid("axis", format!("{axis} out of range for dimension {D}")));
            }
            if *frequency == 0 {
                return Err(invalid("frequency", "must be positive"));
            }
            let mut wave = [0; D];
            wave[*axis] = *frequency as i32;
            let m = Mode { wave, cos: Mat::<D>::zeros(), sin: Mat::<D>::identity() * *amplitude };
            (Mat::<D>::identity() * *mean, vec![m])
        }
        Coefficients::Trig { mean, modes } => {
            if mean.is_empty() {
                return Err(invalid("mean", "empty"));
            }
            let mean = to_mat::<D>(mean, "mean")?;
            let mut out = Vec::with_capacity(modes.len());
            for m in modes {
                if m.wave.len() != D {
                    return Err(invalid("wave", format!("expected {D} components")));
                }
                let mut wave = [0; D];
                wave.copy_from_slice(&m.wave);
                out.push(Mode { wave, cos: to_mat::<D>(&m.cos, "cos")?, sin: to_mat::<D>(&m.sin, "sin")? });
            }
            (mean, out)
        }
    };
    let holder_exponent = descriptor.holder_exponent.unwrap_or(DEFAULT_HOLDER_EXPONENT);
    if !(holder_exponent > 0.0 && holder_exponent < 1.0) {
        return Err(invalid("holder_exponent", "must lie in (0, 1)"));
    }

    let mut hasher = Sha256::new();
    hasher.update((D as u64).to_le_bytes());
    for v in mean.iter() {
        hasher.update(v.to_bits().to_le_bytes());
    }
    for m in &modes {
        for k in m.wave {
            hasher.update(k.to_le_bytes());
        }
        for v in m.cos.iter().chain(m.sin.iter()) {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let fingerprint = u64::from_le_bytes(digest[..8].try_into().expect("digest length"));

    let mut field = CoefficientField {
        descriptor: descriptor.clone(),
        mean,
        modes,
        mu: 1.0,
        holder_exponent,
        holder_constant: 0.0,
        fingerprint,
    };

    for m in std::iter::once(&field.mean).chain(field.modes.iter().flat_map(|m| [&m.cos, &m.sin])) {
        let asym = max_asymmetry(m);
        if asym > 1e-14 {
            return Err(Error::NotSymmetric { point: vec![], asymmetry: asym });
        }
    }

    let mut mu = f64::INFINITY;
    for y in grid_points::<D>(ELLIPTICITY_GRID) {
        let ev = sym_eigenvalues(&field.eval(&y));
        let (lo, hi) = (ev[0], ev[D - 1]);
        if lo <= 0.0 {
            return Err(Error::NotElliptic { point: y.iter().copied().collect(), min_eigenvalue: lo });
        }
        mu = mu.min(lo).min(1.0 / hi);
    }
    field.mu = mu.min(1.0);
    field.holder_constant = field.holder_estimate(holder_exponent, HOLDER_PAIRS, 0);
    Ok(field)
}

/// Uniform grid `{j / n}` on the torus, flattened.
pub fn grid_points<const D: usize>(n: usize) -> impl Iterator<Item = Point<D>> {
    let total = n.pow(D as u32);
    (0..total).map(move |mut idx| {
        let mut p = Point::<D>::zeros();
        for k in (0..D).rev() {
            p[k] = (idx % n) as f64 / n as f64;
            idx /= n;
        }
        p
    })
}

impl<const D: usize> CoefficientField<D> {
    /// `A(Y)`, evaluated on the representative of `Y` in `[0,1)^D`.
    pub fn eval(&self, y: &Point<D>) -> Mat<D> {
        let mut reduced = [0.0; D];
        for k in 0..D {
            reduced[k] = y[k].rem_euclid(1.0);
        }
        let mut a = self.mean;
        for m in &self.modes {
            let mut phase = 0.0;
            for k in 0..D {
                phase += m.wave[k] as f64 * reduced[k];
            }
            let (s, c) = (2.0 * PI * phase).sin_cos();
            a += m.cos * c + m.sin * s;
        }
        a
    }

    /// `A(x / eps)`.
    pub fn eval_scaled(&self, x: &Point<D>, eps: f64) -> Mat<D> {
        self.eval(&(x / eps))
    }

    /// Gradient of entry `(i, j)` of `A`, used for exact cell right-hand sides.
    pub fn entry_gradient(&self, y: &Point<D>, i: usize, j: usize) -> Point<D> {
        let mut g = Point::<D>::zeros();
        for m in &self.modes {
            let mut phase = 0.0;
            for k in 0..D {
                phase += m.wave[k] as f64 * y[k].rem_euclid(1.0);
            }
            let (s, c) = (2.0 * PI * phase).sin_cos();
            let amp = 2.0 * PI * (m.sin[(i, j)] * c - m.cos[(i, j)] * s);
            for k in 0..D {
                g[k] += amp * m.wave[k] as f64;
            }
        }
        g
    }

    pub fn descriptor(&self) -> &FieldDescriptor {
        &self.descriptor
    }

    /// Verified two-sided ellipticity bound on the sample grid.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn holder_exponent(&self) -> f64 {
        self.holder_exponent
    }

    /// Sampled lower bound for the Holder constant at the declared exponent.
    pub fn holder_constant(&self) -> f64 {
        self.holder_constant
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn is_constant(&self) -> bool {
        self.modes.iter().all(|m| m.cos.iter().all(|v| *v == 0.0) && m.sin.iter().all(|v| *v == 0.0))
    }

    /// Largest absolute wave-vector component.
    pub fn bandwidth(&self) -> usize {
        self.modes.iter().flat_map(|m| m.wave.iter()).map(|k| k.unsigned_abs() as usize).max().unwrap_or(0)
    }

    /// Cell average of `A`.
    pub fn mean(&self) -> Mat<D> {
        self.mean
    }

    /// The affine family `A^s = s A + (1 - s) I`.
    pub fn interpolate_identity(&self, s: f64) -> Result<CoefficientField<D>> {
        if !(0.0..=1.0).contains(&s) {
            return Err(invalid("s", format!("{s} outside [0, 1]")));
        }
        let mat = |m: &Mat<D>| -> Vec<Vec<f64>> { (0..D).map(|i| (0..D).map(|j| m[(i, j)]).collect()).collect() };
        let mean = self.mean * s + Mat::<D>::identity() * (1.0 - s);
        let modes = self
            .modes
            .iter()
            .map(|m| TrigMode { wave: m.wave.to_vec(), cos: mat(&(m.cos * s)), sin: mat(&(m.sin * s)) })
            .collect();
        let descriptor = FieldDescriptor {
            dim: D,
            holder_exponent: self.descriptor.holder_exponent,
            coefficients: Coefficients::Trig { mean: mat(&mean), modes },
        };
        make_field(&descriptor)
    }

    /// Max over sampled pairs of `|A(X) - A(Y)| / |X - Y|^lambda` (spectral norm).
    ///
    /// Pairs are drawn with log-uniform separations in `[1e-4, 0.5]` so that the
    /// local Lipschitz behaviour is probed as well as the global one.
    pub fn holder_estimate(&self, lambda: f64, n_pairs: usize, seed: u64) -> f64 {
        holder_estimate_between(self, self, lambda, n_pairs, seed)
    }
}

/// Holder estimate of the difference field `A - B` (or of `A` when `b` is the zero
/// field's stand-in `a` itself).
pub fn holder_estimate_between<const D: usize>(
    a: &CoefficientField<D>,
    b: &CoefficientField<D>,
    lambda: f64,
    n_pairs: usize,
    seed: u64,
) -> f64 {
    let same = std::ptr::eq(a, b);
    let diff = |y: &Point<D>| if same { a.eval(y) } else { a.eval(y) - b.eval(y) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for _ in 0..n_pairs {
        let x = Point::<D>::from_fn(|_, _| rng.gen::<f64>());
        let mut dir = Point::<D>::from_fn(|_, _| rng.gen::<f64>() - 0.5);
        while dir.norm() < 1e-3 {
            dir = Point::<D>::from_fn(|_, _| rng.gen::<f64>() - 0.5);
        }
        let dist = 10f64.powf(rng.gen_range(-4.0..(0.5f64).log10()));
        let y = x + dir.normalize() * dist;
        let num = sym_norm(&(diff(&x) - diff(&y)));
        best = best.max(num / dist.powf(lambda));
    }
    best
}

/// Sampled sup norm of `A - B` on the ellipticity grid.
pub fn sup_distance<const D: usize>(a: &CoefficientField<D>, b: &CoefficientField<D>) -> f64 {
    grid_points::<D>(ELLIPTICITY_GRID / 2).map(|y| sym_norm(&(a.eval(&y) - b.eval(&y)))).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layered() -> CoefficientField<2> {
        make_field::<2>(&FieldDescriptor::layered(2, 0, 2.0, 1.0)).unwrap()
    }

    #[test]
    fn identity_field() {
        let f = make_field::<3>(&FieldDescriptor::identity(3)).unwrap();
        assert_eq!(f.eval(&Point::<3>::new(0.3, -2.7, 11.1)), Mat::<3>::identity());
        assert_eq!(f.mu(), 1.0);
        assert!(f.is_constant());
        assert_eq!(f.holder_estimate(0.5, 100, 1), 0.0);
    }

    #[test]
    fn layered_bounds_match_sine_extrema() {
        let f = layered();
        // Oracle: extrema of 2 + sin on a fine 1D grid.
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for j in 0..100_000 {
            let v = 2.0 + (2.0 * PI * j as f64 / 100_000.0).sin();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!((f.mu() - lo.min(1.0 / hi)).abs() < 1e-9);
        assert!((f.mu() - 1.0 / 3.0).abs() < 1e-9);
        let a = f.eval(&Point::<2>::new(0.25, 0.6));
        assert!((a - Mat::<2>::identity() * 3.0).abs().max() < 1e-15);
    }

    #[test]
    fn periodicity_is_bit_exact_for_exact_shifts() {
        let f = make_field::<2>(&FieldDescriptor::trig_test(2)).unwrap();
        for j in 0..64 {
            let y = Point::<2>::new(j as f64 / 64.0, (j * 7 % 64) as f64 / 128.0);
            let z = Point::<2>::new(1.0, -3.0);
            assert_eq!(f.eval(&y), f.eval(&(y + z)));
        }
    }

    #[test]
    fn rejects_indefinite_field() {
        let d = FieldDescriptor::layered(2, 1, 1.0, 1.5);
        match make_field::<2>(&d) {
            Err(Error::NotElliptic { point, min_eigenvalue }) => {
                assert_eq!(point.len(), 2);
                assert!(min_eigenvalue <= 0.0);
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn random_trig_accepted_iff_grid_positive() {
        for seed in 0..12 {
            let d = FieldDescriptor::random_trig(2, seed, 3, 0.4, 1.2);
            // Independent oracle: eigenvalue sweep with closed-form 2x2 eigenvalues.
            let mut min_eig = f64::INFINITY;
            let Coefficients::Trig { mean, modes } = &d.coefficients else { unreachable!() };
            for idx in 0..64 * 64 {
                let y = [(idx / 64) as f64 / 64.0, (idx % 64) as f64 / 64.0];
                let mut a = [[mean[0][0], mean[0][1]], [mean[1][0], mean[1][1]]];
                for m in modes {
                    let ph = 2.0 * PI * (m.wave[0] as f64 * y[0] + m.wave[1] as f64 * y[1]);
                    for i in 0..2 {
                        for j in 0..2 {
                            a[i][j] += m.cos[i][j] * ph.cos() + m.sin[i][j] * ph.sin();
                        }
                    }
                }
                let tr = a[0][0] + a[1][1];
                let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
                min_eig = min_eig.min(0.5 * tr - (0.25 * tr * tr - det).max(0.0).sqrt());
            }
            assert_eq!(make_field::<2>(&d).is_ok(), min_eig > 0.0, "seed {seed}");
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let f = layered();
        let f0 = f.interpolate_identity(0.0).unwrap();
        let f1 = f.interpolate_identity(1.0).unwrap();
        let fh = f.interpolate_identity(0.5).unwrap();
        let y = Point::<2>::new(0.25, 0.1);
        assert!((f0.eval(&y) - Mat::<2>::identity()).abs().max() < 1e-15);
        assert!((f1.eval(&y) - f.eval(&y)).abs().max() < 1e-15);
        assert!((fh.eval(&y) - Mat::<2>::identity() * 2.0).abs().max() < 1e-15);
        assert!(fh.mu() >= f.mu().min(1.0) - 1e-15);
        assert!(f.interpolate_identity(1.5).is_err());
    }

    #[test]
    fn holder_estimate_brackets_sine_lipschitz_constant() {
        let f = layered();
        let l = f.holder_estimate(1.0 - 1e-12, 20_000, 3);
        assert!(l <= 2.0 * PI * 1.0001, "{l}");
        assert!(l >= 6.0, "{l}");
    }

    #[test]
    fn descriptor_round_trips_through_toml() {
        for d in [FieldDescriptor::identity(2), FieldDescriptor::layered(2, 0, 2.0, 1.0), FieldDescriptor::trig_test(3)] {
            let text = toml::to_string(&d).unwrap();
            let back: FieldDescriptor = toml::from_str(&text).unwrap();
            assert_eq!(back, d);
        }
    }

    proptest! {
        #[test]
        fn affine_family_is_lipschitz_in_s(s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0, y0 in 0.0f64..1.0, y1 in 0.0f64..1.0) {
            let f = make_field::<2>(&FieldDescriptor::trig_test(2)).unwrap();
            let a1 = f.interpolate_identity(s1).unwrap();
            let a2 = f.interpolate_identity(s2).unwrap();
            let y = Point::<2>::new(y0, y1);
            let lhs = sym_norm(&(a1.eval(&y) - a2.eval(&y)));
            let rhs = (s1 - s2).abs() * sym_norm(&(f.eval(&y) - Mat::<2>::identity()));
            prop_assert!(lhs <= rhs + 1e-13);
        }

        #[test]
        fn eval_is_pure(y0 in -5.0f64..5.0, y1 in -5.0f64..5.0) {
            let f = make_field::<2>(&FieldDescriptor::trig_test(2)).unwrap();
            let y = Point::<2>::new(y0, y1);
            prop_assert_eq!(f.eval(&y), f.eval(&y));
            let a = f.eval(&y);
            prop_assert!(max_asymmetry(&a) == 0.0);
        }
    }
}
