//! Finite-volume pieces shared by the HJB and FP solvers.
//!
//! The diffusion part is `-div((a + eps I) D.)` with face coefficients
//! `a_kk + eps` sampled at face midpoints. Faces on the boundary of the mask
//! carry no flux, which is the discrete co-normal Neumann condition.

use crate::error::{Error, Result};
use crate::geometry::{interior_mask, DomainSpec};
use crate::grid::MaskedGrid;
use crate::linalg::SparseMatrix;
use crate::models::DiffusionField;
use crate::types::Vector;

/// Masked grid of cells with `d > shrink` inside the bounding box of `domain`.
pub(crate) fn domain_grid(domain: &DomainSpec, h: f64, shrink: f64) -> Result<MaskedGrid> {
    let cart = domain.grid(h)?;
    let mask = interior_mask(domain, &cart, shrink)?;
    MaskedGrid::new(cart, mask)
}

#[derive(Debug, Clone)]
pub(crate) struct Stencil {
    pub grid: MaskedGrid,
    /// `(a_kk + eps)(midpoint)` per face.
    pub kappa: Vec<f64>,
    /// `b~` at cell centres.
    pub tilde_b: Vec<Vector>,
    /// Normal component of `b~` at face midpoints.
    pub tilde_b_face: Vec<f64>,
}

impl Stencil {
    pub fn new(grid: MaskedGrid, a: &DiffusionField, eps: f64) -> Result<Self> {
        if a.dim != grid.dim() {
            return Err(Error::GridMismatch(format!("diffusion is {}-d, grid is {}-d", a.dim, grid.dim())));
        }
        let check_diagonal = |x: &Vector| -> Result<()> {
            if grid.dim() > 1 {
                let m = a.a(x);
                if m[(0, 1)].abs().max(m[(1, 0)].abs()) > 1e-14 * (1.0 + m.abs().max()) {
                    return Err(Error::InvalidInput(format!(
                        "diffusion has off-diagonal entries at {x:?}; only diagonal a is discretized"
                    )));
                }
            }
            Ok(())
        };
        let mut kappa = Vec::with_capacity(grid.faces.len());
        let mut tilde_b_face = Vec::with_capacity(grid.faces.len());
        for f in &grid.faces {
            check_diagonal(&f.midpoint)?;
            kappa.push(a.a(&f.midpoint)[(f.axis, f.axis)].max(0.0) + eps);
            tilde_b_face.push(a.divergence_drift(&f.midpoint)[f.axis]);
        }
        let tilde_b = (0..grid.len())
            .map(|c| {
                let x = grid.center(c);
                check_diagonal(&x)?;
                Ok(a.divergence_drift(&x))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, kappa, tilde_b, tilde_b_face })
    }

    /// Symmetric positive semidefinite matrix of `-div(kappa D.)`.
    pub fn diffusion_matrix(&self) -> SparseMatrix {
        let n = self.grid.len();
        let h2 = self.grid.h() * self.grid.h();
        let mut l = SparseMatrix::zeros(n);
        for (f, &k) in self.grid.faces.iter().zip(&self.kappa) {
            let w = k / h2;
            l.add(f.minus, f.minus, w);
            l.add(f.plus, f.plus, w);
            l.add(f.minus, f.plus, -w);
            l.add(f.plus, f.minus, -w);
        }
        l
    }

    /// Jump-process generator `Q = -L + B` for face velocities `v` (positive = towards `plus`).
    pub fn generator(&self, l: &SparseMatrix, velocity: &[f64]) -> SparseMatrix {
        let h = self.grid.h();
        let mut q = SparseMatrix::zeros(self.grid.len()).axpy(-1.0, l);
        for (f, &v) in self.grid.faces.iter().zip(velocity) {
            let up = v.max(0.0) / h;
            let down = (-v).max(0.0) / h;
            if up > 0.0 {
                q.add(f.minus, f.plus, up);
                q.add(f.minus, f.minus, -up);
            }
            if down > 0.0 {
                q.add(f.plus, f.minus, down);
                q.add(f.plus, f.plus, -down);
            }
        }
        q
    }

    /// One-sided differences `(D-, D+)` along `axis`; zero across missing neighbours.
    #[inline]
    pub fn one_sided(&self, u: &[f64], c: usize, axis: usize) -> (f64, f64) {
        let h = self.grid.h();
        let nb = &self.grid.neighbors[c][axis];
        let dm = nb[0].map_or(0.0, |m| (u[c] - u[m]) / h);
        let dp = nb[1].map_or(0.0, |p| (u[p] - u[c]) / h);
        (dm, dp)
    }

    pub fn centered_gradient(&self, u: &[f64], c: usize) -> Vector {
        self.grid.centered_gradient(u, c)
    }

    /// Gradient at a face midpoint: normal difference plus averaged tangential components.
    pub fn face_gradient(&self, u: &[f64], face: usize) -> Vector {
        let f = &self.grid.faces[face];
        let mut g = (self.centered_gradient(u, f.minus) + self.centered_gradient(u, f.plus)) * 0.5;
        g[f.axis] = (u[f.plus] - u[f.minus]) / self.grid.h();
        g
    }
}
