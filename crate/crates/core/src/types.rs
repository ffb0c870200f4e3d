//! Small fixed-size linear algebra used throughout the crate.
//!
//! State space dimension is 1 or 2. One-dimensional problems use the first
//! component only; the second component of every point, gradient and vector
//! is kept at zero.

use nalgebra::{Matrix2, Vector2};

pub type Vector = Vector2<f64>;
pub type Matrix = Matrix2<f64>;

/// Time-dependent vector field `(t, x) -> b(t, x)`.
pub trait VectorField: Send + Sync {
    fn eval(&self, t: f64, x: &Vector) -> Vector;
}

impl<F> VectorField for F
where
    F: Fn(f64, &Vector) -> Vector + Send + Sync,
{
    fn eval(&self, t: f64, x: &Vector) -> Vector {
        self(t, x)
    }
}

pub fn vector(coords: &[f64]) -> Vector {
    match coords {
        [] => Vector::zeros(),
        [x] => Vector::new(*x, 0.0),
        [x, y, ..] => Vector::new(*x, *y),
    }
}

pub(crate) fn to_vec(x: &Vector, dim: usize) -> Vec<f64> {
    x.iter().take(dim).copied().collect()
}

/// Unit vectors spread over the sphere in `dim` dimensions.
pub(crate) fn directions(dim: usize, count: usize) -> Vec<Vector> {
    if dim == 1 {
        return vec![Vector::new(1.0, 0.0), Vector::new(-1.0, 0.0)];
    }
    (0..count)
        .map(|k| {
            let th = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
            Vector::new(th.cos(), th.sin())
        })
        .collect()
}
