use std::sync::Arc;

use crate::geometry::DomainSpec;
use crate::types::{Matrix, Vector};

type MatrixFn = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;
type VectorFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;

/// Diffusion matrix `a(x)`, optionally with a factor `sigma` such that `a = sigma sigma^T`.
#[derive(Clone)]
pub struct DiffusionField {
    pub dim: usize,
    a: MatrixFn,
    sigma: Option<MatrixFn>,
    divergence: Option<VectorFn>,
    pub lipschitz_const: f64,
}

impl std::fmt::Debug for DiffusionField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionField")
            .field("dim", &self.dim)
            .field("has_sigma", &self.sigma.is_some())
            .field("lipschitz_const", &self.lipschitz_const)
            .finish()
    }
}

impl DiffusionField {
    pub fn new(dim: usize, a: impl Fn(&Vector) -> Matrix + Send + Sync + 'static, lipschitz_const: f64) -> Self {
        Self { dim, a: Arc::new(a), sigma: None, divergence: None, lipschitz_const }
    }

    pub fn with_sigma(mut self, sigma: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> Self {
        self.sigma = Some(Arc::new(sigma));
        self
    }

    /// Supplies `b~` analytically instead of by finite differences.
    pub fn with_divergence(mut self, div: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        self.divergence = Some(Arc::new(div));
        self
    }

    /// `a = c I` (restricted to the active dimensions).
    pub fn constant(dim: usize, c: f64) -> Self {
        let m = mask_dim(Matrix::identity() * c, dim);
        let s = mask_dim(Matrix::identity() * c.max(0.0).sqrt(), dim);
        Self::new(dim, move |_| m, 0.0)
            .with_sigma(move |_| s)
            .with_divergence(|_| Vector::zeros())
    }

    /// Wright-Fisher type `a = s diag(x_k (1 - x_k))`, degenerate on the faces of the unit cube.
    pub fn wright_fisher(dim: usize, scale: f64) -> Self {
        let diag = move |x: &Vector| {
            let mut m = Matrix::zeros();
            for k in 0..dim {
                m[(k, k)] = scale * x[k] * (1.0 - x[k]);
            }
            m
        };
        Self::new(dim, diag, scale)
            .with_sigma(move |x| diag(x).map(|v| v.max(0.0).sqrt()))
            .with_divergence(move |x| {
                let mut b = Vector::zeros();
                for k in 0..dim {
                    b[k] = scale * (1.0 - 2.0 * x[k]);
                }
                b
            })
    }

    pub fn a(&self, x: &Vector) -> Matrix {
        (self.a)(x)
    }

    pub fn sigma(&self, x: &Vector) -> Option<Matrix> {
        self.sigma.as_ref().map(|s| s(x))
    }

    pub fn has_sigma(&self) -> bool {
        self.sigma.is_some()
    }

    /// `b~_j = sum_i d a_ij / d x_i`.
    pub fn divergence_drift(&self, x: &Vector) -> Vector {
        if let Some(div) = &self.divergence {
            return div(x);
        }
        let h = 1e-5;
        let mut b = Vector::zeros();
        for i in 0..self.dim {
            let mut e = Vector::zeros();
            e[i] = h;
            let dp = self.a(&(x + e));
            let dm = self.a(&(x - e));
            for j in 0..self.dim {
                b[j] += (dp[(i, j)] - dm[(i, j)]) / (2.0 * h);
            }
        }
        b
    }

    /// Largest `|a - sigma sigma^T|` entry over `points`; zero when no factor is set.
    pub fn factorization_error(&self, points: &[Vector]) -> f64 {
        let Some(sigma) = &self.sigma else { return 0.0 };
        points
            .iter()
            .map(|x| {
                let s = sigma(x);
                (self.a(x) - s * s.transpose()).abs().max()
            })
            .fold(0.0, f64::max)
    }

    /// Sampled lower bound of the smallest eigenvalue of `a` on `{d >= 1/r}`.
    pub fn ellipticity(&self, domain: &DomainSpec, r: f64, samples_per_axis: usize) -> f64 {
        let mut lam = f64::INFINITY;
        let n = samples_per_axis.max(2);
        let ny = if self.dim > 1 { n } else { 1 };
        for i in 0..n {
            for j in 0..ny {
                let mut x = Vector::zeros();
                x[0] = domain.lo[0] + (i as f64 + 0.5) / n as f64 * (domain.hi[0] - domain.lo[0]);
                if self.dim > 1 {
                    x[1] = domain.lo[1] + (j as f64 + 0.5) / n as f64 * (domain.hi[1] - domain.lo[1]);
                }
                if domain.distance(&x) < 1.0 / r {
                    continue;
                }
                lam = lam.min(min_eigenvalue(&self.a(&x), self.dim));
            }
        }
        lam
    }
}

pub(crate) fn mask_dim(mut m: Matrix, dim: usize) -> Matrix {
    if dim < 2 {
        m[(0, 1)] = 0.0;
        m[(1, 0)] = 0.0;
        m[(1, 1)] = 0.0;
    }
    m
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub(crate) fn min_eigenvalue(m: &Matrix, dim: usize) -> f64 {
    if dim == 1 {
        return m[(0, 0)];
    }
    let a = m[(0, 0)];
    let d = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let mean = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    mean - rad
}

pub fn divergence_drift(a: &DiffusionField, x: &Vector) -> Vector {
    a.divergence_drift(x)
}
