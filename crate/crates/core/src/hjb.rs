//! Backward solver for `-u_t - tr(a D^2 u) + H(t, x, Du) = F`, `u(T) = G`.
//!
//! The equation is rewritten in divergence form with `H~ = H + b~ . p` and
//! marched backward with implicit diffusion and an explicit Godunov
//! Hamiltonian:
//!
//! `(I + dt L) u^n = u^{n+1} - dt (H~(Du^{n+1}) - F^n)`.
//!
//! Two regularizations are available: the penalized problem (`eps I` added to
//! `a`, `H` clamped at `+-1/eps`, cells `d > 0`) and the shrunk problem
//! (exact `a` and `H` on cells with `d > shrink_eps`).

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{SpaceTimeField, TimeAxis};
use crate::geometry::DomainSpec;
use crate::grid::MaskedGrid;
use crate::linalg::{BandedLu, LinearSolver, SparseMatrix};
use crate::models::{truncate_hamiltonian, DiffusionField, HamiltonianModel};
use crate::operator::{domain_grid, Stencil};
use crate::types::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbConfig {
    /// Added diffusion and truncation level `1/eps`.
    #[serde(default)]
    pub eps_penalty: f64,
    /// Solve on `{d > shrink_eps}` instead of the whole domain.
    #[serde(default)]
    pub shrink_eps: f64,
    pub h: f64,
    pub dt: f64,
    #[serde(default = "default_true")]
    pub cfl_guard: bool,
    #[serde(default)]
    pub solver: LinearSolver,
}

fn default_true() -> bool {
    true
}

impl HjbConfig {
    pub fn new(h: f64, dt: f64) -> Self {
        Self { eps_penalty: 0.0, shrink_eps: 0.0, h, dt, cfl_guard: true, solver: LinearSolver::Direct }
    }

    pub fn penalized(mut self, eps: f64) -> Self {
        self.eps_penalty = eps;
        self
    }

    pub fn shrunk(mut self, eps: f64) -> Self {
        self.shrink_eps = eps;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps_penalty >= 0.0 && self.shrink_eps >= 0.0) {
            return Err(Error::InvalidInput("eps_penalty and shrink_eps must be nonnegative".into()));
        }
        if !(self.h > 0.0 && self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("need h > 0 and dt > 0, got h={}, dt={}", self.h, self.dt)));
        }
        Ok(())
    }

    /// Active cells for this configuration.
    pub fn grid(&self, domain: &DomainSpec) -> Result<MaskedGrid> {
        self.validate()?;
        domain_grid(domain, self.h, self.shrink_eps)
    }
}

/// Everything that stays fixed across the time march (and across MFG iterations).
pub(crate) struct HjbSolver {
    pub stencil: Stencil,
    pub model: HamiltonianModel,
    pub time: TimeAxis,
    config: HjbConfig,
    system: SparseMatrix,
    lu: Option<BandedLu>,
}

impl HjbSolver {
    pub fn new(
        grid: MaskedGrid,
        a: &DiffusionField,
        model: &HamiltonianModel,
        time: TimeAxis,
        config: &HjbConfig,
    ) -> Result<Self> {
        config.validate()?;
        let stencil = Stencil::new(grid, a, config.eps_penalty)?;
        let model = if config.eps_penalty > 0.0 { truncate_hamiltonian(model, config.eps_penalty)? } else { model.clone() };
        let dt = time.dt();
        let system = SparseMatrix::identity(stencil.grid.len()).axpy(dt, &stencil.diffusion_matrix());
        let lu = match config.solver {
            LinearSolver::Direct => Some(BandedLu::factor(&system)?),
            _ => None,
        };
        Ok(Self { stencil, model, time, config: *config, system, lu })
    }

    /// `H~(t, x_c, p) = H + b~ . p` and its gradient.
    #[inline]
    fn h_tilde(&self, t: f64, c: usize, x: &Vector, p: &Vector) -> f64 {
        self.model.eval(t, x, p) + self.stencil.tilde_b[c].dot(p)
    }

    #[inline]
    fn hp_tilde(&self, t: f64, c: usize, x: &Vector, p: &Vector) -> Vector {
        self.model.gradient(t, x, p) + self.stencil.tilde_b[c]
    }

    /// Godunov numerical Hamiltonian at cell `c`; returns `(H~, |H~_p|_1)`.
    pub fn numerical_hamiltonian(&self, t: f64, u: &[f64], c: usize) -> (f64, f64) {
        let x = self.stencil.grid.center(c);
        let dim = self.stencil.grid.dim();
        let centred = self.stencil.centered_gradient(u, c);
        let mut p = centred;
        for k in 0..dim {
            let (dm, dp) = self.stencil.one_sided(u, c, k);
            let with = |s: f64| {
                let mut q = centred;
                q[k] = s;
                q
            };
            let g = |s: f64| self.hp_tilde(t, c, &x, &with(s))[k];
            let (gm, gp) = (g(dm), g(dp));
            p[k] = if gp < 0.0 && gm > 0.0 {
                if self.h_tilde(t, c, &x, &with(dp)) >= self.h_tilde(t, c, &x, &with(dm)) {
                    dp
                } else {
                    dm
                }
            } else if gp < 0.0 {
                dp
            } else if gm > 0.0 {
                dm
            } else {
                // Minimum of the convex map s -> H~ lies between the two differences.
                let (mut lo, mut hi) = if dm <= dp { (dm, dp) } else { (dp, dm) };
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if g(mid) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                0.5 * (lo + hi)
            };
        }
        let speed = self.hp_tilde(t, c, &x, &p).iter().take(dim).map(|v| v.abs()).sum();
        (self.h_tilde(t, c, &x, &p), speed)
    }

    /// Runs the backward march; `f[n]` is the source on slice `n`.
    pub fn solve(&self, f: &[Vec<f64>], g: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
        let n_cells = self.stencil.grid.len();
        let nt = self.time.n_steps;
        if g.len() != n_cells || f.len() != nt + 1 || f.iter().any(|s| s.len() != n_cells) {
            return Err(Error::GridMismatch("source or terminal data does not match the HJB grid".into()));
        }
        let dt = self.time.dt();
        let h = self.stencil.grid.h();
        let mut slices = vec![Vec::new(); nt + 1];
        slices[nt] = g.to_vec();
        let mut max_cfl = 0.0f64;
        for n in (0..nt).rev() {
            let next = &slices[n + 1];
            let t = self.time.time(n + 1);
            let mut rhs = Vec::with_capacity(n_cells);
            for c in 0..n_cells {
                let (hv, speed) = self.numerical_hamiltonian(t, next, c);
                max_cfl = max_cfl.max(dt * speed / h);
                rhs.push(next[c] - dt * (hv - f[n][c]));
            }
            if self.config.cfl_guard && max_cfl > 1.0 + 1e-12 {
                return Err(Error::CflViolation { ratio: max_cfl });
            }
            let u = match &self.lu {
                Some(lu) => lu.solve(&rhs),
                None => self.config.solver.solve(&self.system, &rhs, Some(next))?,
            };
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::SolverDiverged(format!("non-finite value function at slice {n}")));
            }
            slices[n] = u;
        }
        debug!("hjb march done, max CFL ratio {max_cfl:.3}");
        Ok((slices, max_cfl))
    }
}

/// Solves the HJB equation backward from `g` with source `f`.
///
/// `f` fixes the grid and the time axis; both must agree with `config`.
pub fn solve_hjb(
    domain: &DomainSpec,
    a: &DiffusionField,
    model: &HamiltonianModel,
    f: &SpaceTimeField,
    g: &[f64],
    config: &HjbConfig,
) -> Result<SpaceTimeField> {
    let grid = config.grid(domain)?;
    if !grid.same_layout(&f.grid) {
        return Err(Error::GridMismatch("source field is not on the grid implied by the config".into()));
    }
    if (f.time.dt() - config.dt).abs() > 1e-12 * config.dt {
        return Err(Error::GridMismatch(format!("source uses dt = {}, config dt = {}", f.time.dt(), config.dt)));
    }
    let solver = HjbSolver::new(grid.clone(), a, model, f.time, config)?;
    let sources: Vec<Vec<f64>> = f.slices().map(<[f64]>::to_vec).collect();
    let (slices, cfl) = solver.solve(&sources, g)?;
    Ok(SpaceTimeField::from_slices(grid, f.time, slices)
        .with_meta("eps_penalty", config.eps_penalty)
        .with_meta("shrink_eps", config.shrink_eps)
        .with_meta("h", config.h)
        .with_meta("dt", config.dt)
        .with_meta("max_cfl", cfl))
}

/// `||G||_inf + T (||F||_inf + h0_bound)`.
pub fn max_principle_bound(f: &SpaceTimeField, g: &[f64], model: &HamiltonianModel) -> f64 {
    let g_sup = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    g_sup + f.time.t_final * (f.sup_norm() + model.h0_bound)
}

fn cell_in_region(u: &SpaceTimeField, c: usize, region: Option<(&DomainSpec, f64)>) -> bool {
    match region {
        None => true,
        Some((domain, margin)) => domain.distance(&u.grid.center(c)) > margin,
    }
}

/// Sup over slices and cells of the upwind gradient magnitude.
pub fn lipschitz_estimate(u: &SpaceTimeField, region: Option<(&DomainSpec, f64)>) -> f64 {
    let grid = &u.grid;
    let h = grid.h();
    let mut best = 0.0f64;
    for vals in u.slices() {
        for c in 0..grid.len() {
            if !cell_in_region(u, c, region) {
                continue;
            }
            let mut s = 0.0;
            for k in 0..grid.dim() {
                let nb = &grid.neighbors[c][k];
                let dm = nb[0].map_or(0.0, |m| ((vals[c] - vals[m]) / h).abs());
                let dp = nb[1].map_or(0.0, |p| ((vals[p] - vals[c]) / h).abs());
                s += dm.max(dp).powi(2);
            }
            best = best.max(s.sqrt());
        }
    }
    best
}

/// Sup of `(u(x+o) + u(x-o) - 2 u(x)) / |o|^2` over slices, cells and lattice offsets `o`.
pub fn semiconcavity_estimate(u: &SpaceTimeField, offsets: &[[i64; 2]], region: Option<(&DomainSpec, f64)>) -> f64 {
    let grid = &u.grid;
    let cart = &grid.cart;
    let mut best = f64::NEG_INFINITY;
    let shift = |idx: usize, o: [i64; 2], sign: i64| -> Option<usize> {
        let m = cart.multi(idx);
        let i = m[0] as i64 + sign * o[0];
        let j = m[1] as i64 + sign * o[1];
        if i < 0 || j < 0 || i >= cart.n[0] as i64 || j >= cart.n[1] as i64 {
            return None;
        }
        grid.active_index(cart.linear(i as usize, j as usize))
    };
    for vals in u.slices() {
        for c in 0..grid.len() {
            if !cell_in_region(u, c, region) {
                continue;
            }
            let idx = grid.active[c];
            for &o in offsets {
                let (Some(p), Some(m)) = (shift(idx, o, 1), shift(idx, o, -1)) else { continue };
                let len2 = ((o[0] * o[0] + o[1] * o[1]) as f64) * grid.h() * grid.h();
                best = best.max((vals[p] + vals[m] - 2.0 * vals[c]) / len2);
            }
        }
    }
    best
}

/// Axis-aligned unit offsets (and diagonals in 2D).
pub fn default_offsets(dim: usize) -> Vec<[i64; 2]> {
    if dim == 1 {
        vec![[1, 0]]
    } else {
        vec![[1, 0], [0, 1], [1, 1], [1, -1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuationMode {
    Penalized,
    Shrunk,
}

#[derive(Debug, Clone)]
pub struct ContinuationStep {
    pub eps: f64,
    pub u: SpaceTimeField,
    /// Sup-norm distance to the previous member on the common compact.
    pub diff: Option<f64>,
}

/// Solves for each `eps` and measures consecutive sup-norm differences on
/// cells with `d > margin` active in both members.
#[allow(clippy::too_many_arguments)]
pub fn epsilon_continuation(
    domain: &DomainSpec,
    a: &DiffusionField,
    model: &HamiltonianModel,
    f: &(dyn Fn(f64, &Vector) -> f64 + Sync),
    g: &(dyn Fn(&Vector) -> f64 + Sync),
    t_final: f64,
    base: &HjbConfig,
    mode: ContinuationMode,
    eps_sequence: &[f64],
    margin: f64,
) -> Result<Vec<ContinuationStep>> {
    if eps_sequence.windows(2).any(|w| w[1] >= w[0]) || eps_sequence.iter().any(|e| *e < 0.0) {
        return Err(Error::InvalidInput("eps sequence must be nonnegative and strictly decreasing".into()));
    }
    let time = TimeAxis::with_step(t_final, base.dt)?;
    let mut out: Vec<ContinuationStep> = Vec::new();
    for &eps in eps_sequence {
        let config = match mode {
            ContinuationMode::Penalized => HjbConfig { eps_penalty: eps, ..*base },
            ContinuationMode::Shrunk => HjbConfig { shrink_eps: eps, ..*base },
        };
        let grid = config.grid(domain)?;
        let source = SpaceTimeField::from_fn(grid.clone(), time, f)?;
        let terminal: Vec<f64> = (0..grid.len()).map(|c| g(&grid.center(c))).collect();
        let u = solve_hjb(domain, a, model, &source, &terminal, &config)?;
        let diff = out.last().map(|prev| sup_distance_on_common(&prev.u, &u, domain, margin));
        out.push(ContinuationStep { eps, u, diff });
    }
    Ok(out)
}

fn sup_distance_on_common(u: &SpaceTimeField, v: &SpaceTimeField, domain: &DomainSpec, margin: f64) -> f64 {
    let mut d = 0.0f64;
    for (c, &idx) in u.grid.active.iter().enumerate() {
        let Some(c2) = v.grid.active_index(idx) else { continue };
        if domain.distance(&u.grid.center(c)) <= margin {
            continue;
        }
        for n in 0..u.n_slices() {
            d = d.max((u.slice(n)[c] - v.slice(n)[c2]).abs());
        }
    }
    d
}
