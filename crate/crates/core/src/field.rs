//! Pointwise solution fields used as exact data and as reference solutions.

use crate::small::{Point, Vector};

/// A scalar function with a gradient, defined on (a neighbourhood of) the domain.
pub trait SolutionField<const D: usize>: Send + Sync {
    fn value(&self, x: &Point<D>) -> f64;
    fn gradient(&self, x: &Point<D>) -> Vector<D>;
}

/// Affine function `c + b.x`.
#[derive(Clone, Debug)]
pub struct Affine<const D: usize> {
    pub constant: f64,
    pub slope: Vector<D>,
}

impl<const D: usize> SolutionField<D> for Affine<D> {
    fn value(&self, x: &Point<D>) -> f64 {
        self.constant + self.slope.dot(x)
    }

    fn gradient(&self, _x: &Point<D>) -> Vector<D> {
        self.slope
    }
}

/// A field given by closures.
pub struct Analytic<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<const D: usize, F, G> SolutionField<D> for Analytic<F, G>
where
    F: Fn(&Point<D>) -> f64 + Send + Sync,
    G: Fn(&Point<D>) -> Vector<D> + Send + Sync,
{
    fn value(&self, x: &Point<D>) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &Point<D>) -> Vector<D> {
        (self.gradient)(x)
    }
}

/// `sum_k w_k u_k`.
pub struct Combination<'a, const D: usize> {
    pub terms: Vec<(f64, &'a dyn SolutionField<D>)>,
}

impl<const D: usize> SolutionField<D> for Combination<'_, D> {
    fn value(&self, x: &Point<D>) -> f64 {
        self.terms.iter().map(|(w, f)| w * f.value(x)).sum()
    }

    fn gradient(&self, x: &Point<D>) -> Vector<D> {
        self.terms.iter().fold(Vector::<D>::zeros(), |acc, (w, f)| acc + f.gradient(x) * *w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combination_is_linear() {
        let a = Affine { constant: 1.0, slope: Vector::<2>::new(1.0, 2.0) };
        let b = Analytic { value: |x: &Point<2>| x[0] * x[1], gradient: |x: &Point<2>| Vector::<2>::new(x[1], x[0]) };
        let c = Combination { terms: vec![(2.0, &a as &dyn SolutionField<2>), (-1.0, &b)] };
        let x = Point::<2>::new(0.5, 3.0);
        assert_eq!(c.value(&x), 2.0 * (1.0 + 6.5) - 1.5);
        assert_eq!(c.gradient(&x), Vector::<2>::new(2.0 - 3.0, 4.0 - 0.5));
    }
}
