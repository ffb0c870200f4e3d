//! Forward solver for `m_t - div(a Dm) - div(m b) = 0` with zero boundary flux.
//!
//! The spatial operator is the transpose of a jump-process generator
//! `Q = -L + B`: `L` is the same diffusion matrix the HJB solver uses and `B`
//! moves mass across faces with the donor-cell velocity `v = -b . n`. Every
//! column of `Q^T` sums to zero, so
//! `(I - dt Q_{n+1}^T) m^{n+1} = m^n` conserves mass exactly and keeps `m >= 0`.
//!
//! A trace-form Kolmogorov equation with SDE drift `beta` is covered by
//! `b = b~ - beta` (see [`kolmogorov_drift`]).

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DensityField, SpaceTimeField, TimeAxis};
use crate::geometry::DomainSpec;
use crate::grid::MaskedGrid;
use crate::linalg::{BandedLu, LinearSolver, SparseMatrix};
use crate::models::DiffusionField;
use crate::operator::{domain_grid, Stencil};
use crate::types::{to_vec, Vector, VectorField};

/// Largest drift magnitude accepted on the mask.
pub const DRIFT_LIMIT: f64 = 1e8;

/// Undershoots below this raise [`Error::NegativeDensity`]; smaller ones are clipped.
pub const NEGATIVE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpConfig {
    #[serde(default)]
    pub eps_penalty: f64,
    #[serde(default)]
    pub shrink_eps: f64,
    pub h: f64,
    pub dt: f64,
    #[serde(default)]
    pub solver: LinearSolver,
}

impl FpConfig {
    pub fn new(h: f64, dt: f64) -> Self {
        Self { eps_penalty: 0.0, shrink_eps: 0.0, h, dt, solver: LinearSolver::Direct }
    }

    pub fn shrunk(mut self, eps: f64) -> Self {
        self.shrink_eps = eps;
        self
    }

    pub fn with_solver(mut self, solver: LinearSolver) -> Self {
        self.solver = solver;
        self
    }

    pub fn grid(&self, domain: &DomainSpec) -> Result<MaskedGrid> {
        if !(self.h > 0.0 && self.dt > 0.0 && self.eps_penalty >= 0.0 && self.shrink_eps >= 0.0) {
            return Err(Error::InvalidInput(format!("bad FP config {self:?}")));
        }
        domain_grid(domain, self.h, self.shrink_eps)
    }
}

/// `b = b~ - beta`: divergence-form FP drift for the dynamics `dX = beta dt + sqrt(2) sigma dW`.
pub fn kolmogorov_drift<'a>(a: &'a DiffusionField, beta: &'a dyn VectorField) -> impl VectorField + 'a {
    move |t: f64, x: &Vector| a.divergence_drift(x) - beta.eval(t, x)
}

pub(crate) struct FpSolver {
    pub stencil: Stencil,
    pub time: TimeAxis,
    l: SparseMatrix,
    solver: LinearSolver,
}

impl FpSolver {
    pub fn new(grid: MaskedGrid, a: &DiffusionField, time: TimeAxis, config: &FpConfig) -> Result<Self> {
        let stencil = Stencil::new(grid, a, config.eps_penalty)?;
        let l = stencil.diffusion_matrix();
        Ok(Self { stencil, time, l, solver: config.solver })
    }

    /// Face velocities `-b . n` at face midpoints at time `t`.
    pub fn face_velocities(&self, drift: &dyn VectorField, t: f64) -> Result<Vec<f64>> {
        let dim = self.stencil.grid.dim();
        self.stencil
            .grid
            .faces
            .iter()
            .map(|f| {
                let b = drift.eval(t, &f.midpoint);
                let mag = b.iter().take(dim).map(|v| if v.is_nan() { f64::INFINITY } else { v.abs() }).fold(0.0, f64::max);
                if !(mag <= DRIFT_LIMIT) {
                    return Err(Error::DriftUnboundedOnMask { value: mag, x: to_vec(&f.midpoint, dim) });
                }
                Ok(-b[f.axis])
            })
            .collect()
    }

    /// `Q = -L + B(v)`.
    pub fn generator(&self, velocity: &[f64]) -> SparseMatrix {
        self.stencil.generator(&self.l, velocity)
    }

    /// `I - dt Q^T`.
    pub fn step_matrix(&self, velocity: &[f64]) -> SparseMatrix {
        let qt = self.generator(velocity).transpose();
        SparseMatrix::identity(qt.n).axpy(-self.time.dt(), &qt)
    }

    /// Marches forward; `velocity(n)` gives the face velocities of the step into slice `n`.
    pub fn run(
        &self,
        m0: &[f64],
        mut velocity: impl FnMut(usize) -> Result<Vec<f64>>,
    ) -> Result<DensityField> {
        let n_cells = self.stencil.grid.len();
        if m0.len() != n_cells {
            return Err(Error::GridMismatch(format!("m0 has {} entries for {} cells", m0.len(), n_cells)));
        }
        if let Some(c) = m0.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!("m0 is negative or non-finite at cell {c}")));
        }
        let mut hasher = signature_hasher(&self.stencil, &self.time);
        let mut slices = Vec::with_capacity(self.time.n_slices());
        slices.push(m0.to_vec());
        let mut cached: Option<(Vec<f64>, SparseMatrix, Option<BandedLu>)> = None;
        for n in 1..self.time.n_slices() {
            let v = velocity(n)?;
            for x in &v {
                hasher.write_u64(x.to_bits());
            }
            let reuse = matches!(&cached, Some((prev, _, _)) if *prev == v);
            if !reuse {
                let a = self.step_matrix(&v);
                let lu = match self.solver {
                    LinearSolver::Direct => Some(BandedLu::factor(&a)?),
                    _ => None,
                };
                cached = Some((v, a, lu));
            }
            let (_, a, lu) = cached.as_ref().expect("step matrix cached above");
            let prev = &slices[n - 1];
            let mut m = match lu {
                Some(lu) => lu.solve(prev),
                None => self.solver.solve(a, prev, Some(prev))?,
            };
            clip_negative(&mut m, n)?;
            slices.push(m);
        }
        let field = SpaceTimeField::from_slices(self.stencil.grid.clone(), self.time, slices);
        Ok(DensityField::new(field, hasher.finish()))
    }
}

fn signature_hasher(stencil: &Stencil, time: &TimeAxis) -> DefaultHasher {
    let mut h = DefaultHasher::new();
    h.write_usize(stencil.grid.len());
    for idx in &stencil.grid.active {
        h.write_usize(*idx);
    }
    for k in &stencil.kappa {
        h.write_u64(k.to_bits());
    }
    h.write_u64(time.dt().to_bits());
    h
}

fn clip_negative(m: &mut [f64], slice: usize) -> Result<()> {
    let (cell, worst) = m
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |acc, (c, &v)| if v < acc.1 { (c, v) } else { acc });
    if worst < -NEGATIVE_TOLERANCE {
        return Err(Error::NegativeDensity { value: worst, slice, cell });
    }
    if worst < 0.0 {
        warn!("clipping undershoot {worst:.3e} at slice {slice}");
        for v in m.iter_mut() {
            *v = v.max(0.0);
        }
    }
    Ok(())
}

/// Samples `f` at the active cell centres of `grid`.
pub fn sample_density(grid: &MaskedGrid, f: impl Fn(&Vector) -> f64) -> Vec<f64> {
    (0..grid.len()).map(|c| f(&grid.center(c))).collect()
}

/// Solves the FP equation for the drift `b(t, x)` from `m0` (values on `config.grid(domain)`).
pub fn solve_fp(
    domain: &DomainSpec,
    a: &DiffusionField,
    drift: &dyn VectorField,
    m0: &[f64],
    t_final: f64,
    config: &FpConfig,
) -> Result<DensityField> {
    let grid = config.grid(domain)?;
    let time = TimeAxis::with_step(t_final, config.dt)?;
    let solver = FpSolver::new(grid, a, time, config)?;
    solver.run(m0, |n| solver.face_velocities(drift, time.time(n)))
}

/// Generator `Q` of the discrete FP operator at time `t` (the FP matrix is `Q^T`).
pub fn fp_generator(
    domain: &DomainSpec,
    a: &DiffusionField,
    drift: &dyn VectorField,
    t: f64,
    config: &FpConfig,
) -> Result<SparseMatrix> {
    let grid = config.grid(domain)?;
    let time = TimeAxis::new(1.0, 1)?;
    let solver = FpSolver::new(grid, a, time, config)?;
    Ok(solver.generator(&solver.face_velocities(drift, t)?))
}

pub fn mass_trace(m: &DensityField) -> Vec<f64> {
    m.mass_trace()
}

/// Mass in the boundary layer `0 < d < delta` per slice.
pub fn boundary_mass(m: &DensityField, domain: &DomainSpec, delta: f64) -> Vec<f64> {
    let vol = m.grid.cart.cell_volume();
    let layer: Vec<bool> = (0..m.grid.len())
        .map(|c| {
            let d = domain.distance(&m.grid.center(c));
            d > 0.0 && d < delta
        })
        .collect();
    (0..m.n_slices())
        .map(|n| m.slice(n).iter().zip(&layer).filter(|(_, l)| **l).map(|(v, _)| v).sum::<f64>() * vol)
        .collect()
}

/// `(direct, dual)` for `w = m1 - m2`.
///
/// `direct = sum_{n >= 1} dt |w^n|_{L^1}`. The dual side solves the adjoint
/// problem `(I - dt Q_n) phi^{n-1} = phi^n + dt sgn(w^n)`, `phi^N = 0`, and
/// pairs it with the initial difference plus the per-step residuals
/// `A_n w^n - w^{n-1}`, so the two numbers agree to rounding for any pair of
/// densities computed with the same drift.
pub fn dual_uniqueness_identity(
    m1: &DensityField,
    m2: &DensityField,
    domain: &DomainSpec,
    a: &DiffusionField,
    drift: &dyn VectorField,
    config: &FpConfig,
) -> Result<(f64, f64)> {
    if !m1.same_layout(m2) {
        return Err(Error::GridMismatch("densities live on different grids".into()));
    }
    if m1.drift_signature != m2.drift_signature {
        return Err(Error::DriftMismatch);
    }
    let solver = FpSolver::new(m1.grid.clone(), a, m1.time, config)?;
    if !solver.stencil.grid.same_layout(&config.grid(domain)?) {
        return Err(Error::GridMismatch("config does not reproduce the density grid".into()));
    }
    let n_steps = m1.time.n_steps;
    let dt = m1.time.dt();
    let vol = m1.grid.cart.cell_volume();
    let w: Vec<Vec<f64>> =
        (0..=n_steps).map(|n| m1.slice(n).iter().zip(m2.slice(n)).map(|(x, y)| x - y).collect()).collect();

    let mut hasher = signature_hasher(&solver.stencil, &m1.time);
    let mut matrices = Vec::with_capacity(n_steps);
    for n in 1..=n_steps {
        let v = solver.face_velocities(drift, m1.time.time(n))?;
        for x in &v {
            hasher.write_u64(x.to_bits());
        }
        matrices.push(solver.step_matrix(&v));
    }
    if hasher.finish() != m1.drift_signature {
        return Err(Error::DriftMismatch);
    }

    let direct: f64 = w[1..].iter().map(|s| s.iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() * dt * vol;

    let sgn = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    let mut phi = vec![0.0; m1.grid.len()];
    let mut dual = 0.0;
    for n in (1..=n_steps).rev() {
        let a_n = &matrices[n - 1];
        let rhs: Vec<f64> = phi.iter().zip(&w[n]).map(|(p, x)| p + dt * sgn(*x)).collect();
        phi = BandedLu::factor(&a_n.transpose())?.solve(&rhs);
        let aw = a_n.mul_vec(&w[n]);
        dual += aw.iter().zip(&w[n - 1]).zip(&phi).map(|((x, y), p)| (x - y) * p).sum::<f64>();
    }
    dual += w[0].iter().zip(&phi).map(|(x, p)| x * p).sum::<f64>();
    Ok((direct, dual * vol))
}

#[derive(Debug, Clone)]
pub struct FpContinuationStep {
    pub eps: f64,
    pub m: DensityField,
    /// `L^1(Omega)` distance to the previous member at `t = T`.
    pub l1_diff_final: Option<f64>,
    /// `sup_t` of the same distance.
    pub sup_l1_diff: Option<f64>,
}

/// Solves on the shrunk domains `{d > eps}`, zero-extends, and compares consecutive members.
pub fn epsilon_continuation_fp(
    domain: &DomainSpec,
    a: &DiffusionField,
    drift: &dyn VectorField,
    m0: &dyn Fn(&Vector) -> f64,
    t_final: f64,
    base: &FpConfig,
    eps_sequence: &[f64],
) -> Result<Vec<FpContinuationStep>> {
    if eps_sequence.windows(2).any(|w| w[1] >= w[0]) || eps_sequence.iter().any(|e| *e < 0.0) {
        return Err(Error::InvalidInput("eps sequence must be nonnegative and strictly decreasing".into()));
    }
    let mut out: Vec<FpContinuationStep> = Vec::new();
    for &eps in eps_sequence {
        let config = FpConfig { shrink_eps: eps, ..*base };
        let grid = config.grid(domain)?;
        let init = sample_density(&grid, m0);
        let m = solve_fp(domain, a, drift, &init, t_final, &config)?;
        let (l1_final, sup_l1) = match out.last() {
            Some(prev) => {
                let d = zero_extended_l1(&prev.m, &m);
                (Some(*d.last().unwrap_or(&0.0)), Some(d.iter().copied().fold(0.0, f64::max)))
            }
            None => (None, None),
        };
        out.push(FpContinuationStep { eps, m, l1_diff_final: l1_final, sup_l1_diff: sup_l1 });
    }
    Ok(out)
}

/// Per-slice `L^1` distance after extending both densities by zero to the full grid.
fn zero_extended_l1(m1: &DensityField, m2: &DensityField) -> Vec<f64> {
    let cart = &m1.grid.cart;
    let vol = cart.cell_volume();
    (0..m1.n_slices())
        .map(|n| {
            let (s1, s2) = (m1.slice(n), m2.slice(n));
            (0..cart.len())
                .map(|idx| {
                    let v1 = m1.grid.active_index(idx).map_or(0.0, |c| s1[c]);
                    let v2 = m2.grid.active_index(idx).map_or(0.0, |c| s2[c]);
                    (v1 - v2).abs()
                })
                .sum::<f64>()
                * vol
        })
        .collect()
}
