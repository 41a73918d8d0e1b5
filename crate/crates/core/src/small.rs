//! Fixed-size helpers for the d x d (d = 2, 3) matrices that appear in every
//! kernel evaluation.

use nalgebra::{DMatrix, SMatrix, SVector};

pub type Point<const D: usize> = SVector<f64, D>;
pub type Vector<const D: usize> = SVector<f64, D>;
pub type Mat<const D: usize> = SMatrix<f64, D, D>;

pub fn det<const D: usize>(m: &Mat<D>) -> f64 {
    match D {
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        3 => {
            m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
        }
        _ => unimplemented!("dimension {D}"),
    }
}

/// Inverse via the adjugate. Callers guarantee the matrix is SPD.
pub fn inverse<const D: usize>(m: &Mat<D>) -> Mat<D> {
    let dt = det(m);
    let mut inv = Mat::<D>::zeros();
    match D {
        1 => inv[(0, 0)] = 1.0 / dt,
        2 => {
            inv[(0, 0)] = m[(1, 1)] / dt;
            inv[(1, 1)] = m[(0, 0)] / dt;
            inv[(0, 1)] = -m[(0, 1)] / dt;
            inv[(1, 0)] = -m[(1, 0)] / dt;
        }
        3 => {
            for i in 0..3 {
                for j in 0..3 {
                    let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                    let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                    inv[(i, j)] = (m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)]) / dt;
                }
            }
        }
        _ => unimplemented!("dimension {D}"),
    }
    inv
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues<const D: usize>(m: &Mat<D>) -> Vec<f64> {
    let dm = DMatrix::from_fn(D, D, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let mut ev: Vec<f64> = dm.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Spectral norm of a symmetric matrix.
pub fn sym_norm<const D: usize>(m: &Mat<D>) -> f64 {
    sym_eigenvalues(m).iter().fold(0.0f64, |acc, e| acc.max(e.abs()))
}

pub fn max_asymmetry<const D: usize>(m: &Mat<D>) -> f64 {
    (m - m.transpose()).abs().max()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip_3d() {
        let m = Mat::<3>::new(4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0);
        let p = m * inverse(&m);
        assert!((p - Mat::<3>::identity()).abs().max() < 1e-14);
        assert!((det(&m) - m.determinant()).abs() < 1e-12);
    }

    #[test]
    fn eigenvalues_sorted() {
        let m = Mat::<2>::new(2.0, 1.0, 1.0, 2.0);
        let ev = sym_eigenvalues(&m);
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
        assert!((sym_norm(&(-m)) - 3.0).abs() < 1e-14);
    }
}
