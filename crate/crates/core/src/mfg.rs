//! Damped Picard iteration for the coupled HJB / FP system and its certificates.

use std::sync::Arc;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DensityField, SpaceTimeField, TimeAxis};
use crate::fp::{sample_density, FpConfig, FpSolver};
use crate::geometry::DomainSpec;
use crate::hjb::{default_offsets, lipschitz_estimate, semiconcavity_estimate, HjbConfig, HjbSolver};
use crate::invariance::{check_hjb_invariance, SampleSpec};
use crate::linalg::LinearSolver;
use crate::models::{check_structure, CouplingF, CouplingG, DiffusionField, HamiltonianModel, StructureSamples};
use crate::operator::domain_grid;
use crate::types::Vector;

pub type InitialDensity = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct MfgProblem {
    pub domain: DomainSpec,
    pub a: DiffusionField,
    pub model: HamiltonianModel,
    pub f: CouplingF,
    pub g: CouplingG,
    pub m0: InitialDensity,
    pub t_final: f64,
}

impl MfgProblem {
    pub fn new(
        domain: DomainSpec,
        a: DiffusionField,
        model: HamiltonianModel,
        f: CouplingF,
        g: CouplingG,
        m0: impl Fn(&Vector) -> f64 + Send + Sync + 'static,
        t_final: f64,
    ) -> Self {
        Self { domain, a, model, f, g, m0: Arc::new(m0), t_final }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfgConfig {
    #[serde(default)]
    pub eps_penalty: f64,
    #[serde(default)]
    pub shrink_eps: f64,
    pub h: f64,
    pub dt: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub solver: LinearSolver,
    /// Boundary layer width for the invariance pre-check.
    #[serde(default = "default_delta")]
    pub invariance_delta: f64,
    #[serde(default)]
    pub invariance_c: f64,
    /// Downgrades failed pre-checks to warnings.
    #[serde(default)]
    pub override_checks: bool,
    /// Accepted for globally Lipschitz `H` with a relaxed terminal-cost condition; currently has no effect.
    #[serde(default)]
    pub relaxed_g: bool,
    #[serde(default = "default_true")]
    pub cfl_guard: bool,
}

fn default_theta() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iters() -> usize {
    200
}
fn default_delta() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

impl MfgConfig {
    pub fn new(h: f64, dt: f64) -> Self {
        Self {
            eps_penalty: 0.0,
            shrink_eps: 0.0,
            h,
            dt,
            theta: default_theta(),
            tol: default_tol(),
            max_iters: default_max_iters(),
            solver: LinearSolver::Direct,
            invariance_delta: default_delta(),
            invariance_c: 0.0,
            override_checks: false,
            relaxed_g: false,
            cfl_guard: true,
        }
    }

    pub fn hjb(&self) -> HjbConfig {
        HjbConfig {
            eps_penalty: self.eps_penalty,
            shrink_eps: self.shrink_eps,
            h: self.h,
            dt: self.dt,
            cfl_guard: self.cfl_guard,
            solver: self.solver,
        }
    }

    pub fn fp(&self) -> FpConfig {
        FpConfig { eps_penalty: self.eps_penalty, shrink_eps: self.shrink_eps, h: self.h, dt: self.dt, solver: self.solver }
    }

    fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::InvalidInput(format!("damping theta must lie in (0, 1], got {}", self.theta)));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidInput("tol must be positive and max_iters at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MfgDiagnostics {
    pub lipschitz: f64,
    pub semiconcavity: f64,
    pub m_sup: f64,
    /// Worst `(b~ + H_p(Du)) . Dd` over cells in the boundary layer; `<= 0` is the good sign.
    pub boundary_margin: f64,
    pub max_cfl: f64,
    pub mass_drift: f64,
}

#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub u: SpaceTimeField,
    pub m: DensityField,
    pub iterations: usize,
    /// `sup_t ||m^{k+1} - m^k||_{L^1}` per outer iteration.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub diagnostics: MfgDiagnostics,
}

/// Pre-checks: Hamiltonian structure and the HJB invariance inequality.
pub fn precheck(problem: &MfgProblem, config: &MfgConfig) -> Result<()> {
    let structure = check_structure(
        &problem.model,
        &problem.domain,
        &problem.a,
        &StructureSamples::for_domain(&problem.domain),
    );
    if !structure.passed {
        let msg = format!("structure check failed: {:?}", structure.violations);
        if !config.override_checks {
            return Err(Error::StructureCheckFailed(msg));
        }
        warn!("{msg} (override set)");
    }
    let report = check_hjb_invariance(
        &problem.domain,
        &problem.a,
        &problem.model,
        config.invariance_delta,
        config.invariance_c,
        &SampleSpec::default(),
    );
    if !report.passed() {
        if !config.override_checks {
            return Err(Error::InvarianceNotSatisfied { min_margin: report.min_margin });
        }
        warn!("invariance check failed (min margin {:.3e}), continuing under override", report.min_margin);
    }
    Ok(())
}

struct Coupled {
    hjb: HjbSolver,
    fp: FpSolver,
    m0: Vec<f64>,
}

impl Coupled {
    fn new(problem: &MfgProblem, config: &MfgConfig) -> Result<Self> {
        let grid = domain_grid(&problem.domain, config.h, config.shrink_eps)?;
        let time = TimeAxis::with_step(problem.t_final, config.dt)?;
        let hjb = HjbSolver::new(grid.clone(), &problem.a, &problem.model, time, &config.hjb())?;
        let fp = FpSolver::new(grid.clone(), &problem.a, time, &config.fp())?;
        let m0 = sample_density(&grid, |x| (problem.m0)(x));
        if m0.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("m0 must be finite and nonnegative".into()));
        }
        Ok(Self { hjb, fp, m0 })
    }

    fn value(&self, problem: &MfgProblem, m: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, f64)> {
        let grid = &self.hjb.stencil.grid;
        let f: Vec<Vec<f64>> = m.iter().map(|s| problem.f.evaluate(grid, s)).collect();
        let g = problem.g.evaluate(grid, m.last().expect("at least one slice"));
        self.hjb.solve(&f, &g)
    }

    /// FP flow for the drift `H_p(t, x, Du) + b~` built from the face gradients of `u`.
    fn density(&self, u: &[Vec<f64>]) -> Result<DensityField> {
        let stencil = &self.hjb.stencil;
        let model = &self.hjb.model;
        let time = self.fp.time;
        self.fp.run(&self.m0, |n| {
            let t = time.time(n);
            Ok(stencil
                .grid
                .faces
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let p = stencil.face_gradient(&u[n], i);
                    -(model.gradient(t, &f.midpoint, &p)[f.axis] + stencil.tilde_b_face[i])
                })
                .collect())
        })
    }
}

fn sup_l1(a: &[Vec<f64>], b: &[Vec<f64>], vol: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() * vol)
        .fold(0.0, f64::max)
}

/// Solves the MFG system; `initial_guess` replaces the time-constant `m0` as the first iterate.
///
/// A run that hits `max_iters` returns the iterate with the smallest residual and `converged = false`.
pub fn solve_mfg(problem: &MfgProblem, config: &MfgConfig, initial_guess: Option<&DensityField>) -> Result<MfgSolution> {
    config.validate()?;
    precheck(problem, config)?;
    let coupled = Coupled::new(problem, config)?;
    let grid = coupled.hjb.stencil.grid.clone();
    let time = coupled.fp.time;
    let vol = grid.cart.cell_volume();

    let mut m: Vec<Vec<f64>> = match initial_guess {
        Some(g) => {
            if !g.grid.same_layout(&grid) || g.time != time {
                return Err(Error::GridMismatch("initial guess does not match the solver grid".into()));
            }
            g.slices().map(<[f64]>::to_vec).collect()
        }
        None => vec![coupled.m0.clone(); time.n_slices()],
    };

    let decoupled = problem.f.is_decoupled() && problem.g.is_decoupled();
    let theta = if decoupled { 1.0 } else { config.theta };
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<Vec<f64>>, DensityField, f64)> = None;
    let mut converged = false;
    for k in 0..config.max_iters {
        let (u, cfl) = coupled.value(problem, &m)?;
        let m_hat = coupled.density(&u)?;
        let next: Vec<Vec<f64>> = m
            .iter()
            .zip(m_hat.slices())
            .map(|(old, new)| old.iter().zip(new).map(|(o, n)| (1.0 - theta) * o + theta * n).collect())
            .collect();
        let residual = if decoupled { 0.0 } else { sup_l1(&next, &m, vol) };
        debug!("mfg iteration {k}: residual {residual:.3e}");
        history.push(residual);
        if best.as_ref().is_none_or(|b| residual < b.0) {
            best = Some((residual, u, m_hat, cfl));
        }
        m = next;
        if residual < config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("mfg did not converge in {} iterations, residual {:.3e}", config.max_iters, history.last().unwrap_or(&f64::NAN));
    } else {
        info!("mfg converged in {} iterations", history.len());
    }
    let (_, u_slices, m_field, max_cfl) = best.expect("at least one iteration ran");
    let u = SpaceTimeField::from_slices(grid, time, u_slices)
        .with_meta("eps_penalty", config.eps_penalty)
        .with_meta("shrink_eps", config.shrink_eps)
        .with_meta("h", config.h)
        .with_meta("dt", config.dt)
        .with_meta("max_cfl", max_cfl);
    let diagnostics = diagnostics(problem, config, &coupled, &u, &m_field, max_cfl);
    Ok(MfgSolution { u, m: m_field, iterations: history.len(), residual_history: history, converged, diagnostics })
}

fn layer_margin(problem: &MfgProblem, coupled: &Coupled, u: &SpaceTimeField, delta: f64) -> f64 {
    let stencil = &coupled.hjb.stencil;
    let model = &coupled.hjb.model;
    let mut worst = f64::NEG_INFINITY;
    for c in 0..stencil.grid.len() {
        let x = stencil.grid.center(c);
        let d = problem.domain.signed_distance(&x);
        if !(d.value > 0.0 && d.value < delta) {
            continue;
        }
        for n in 0..u.n_slices() {
            let p = stencil.centered_gradient(u.slice(n), c);
            let b = stencil.tilde_b[c] + model.gradient(u.time.time(n), &x, &p);
            worst = worst.max(b.dot(&d.grad));
        }
    }
    worst
}

fn diagnostics(
    problem: &MfgProblem,
    config: &MfgConfig,
    coupled: &Coupled,
    u: &SpaceTimeField,
    m: &DensityField,
    max_cfl: f64,
) -> MfgDiagnostics {
    let trace = m.mass_trace();
    MfgDiagnostics {
        lipschitz: lipschitz_estimate(u, None),
        semiconcavity: semiconcavity_estimate(u, &default_offsets(u.grid.dim()), None),
        m_sup: m.values().iter().copied().fold(0.0, f64::max),
        boundary_margin: layer_margin(problem, coupled, u, config.invariance_delta),
        max_cfl,
        mass_drift: trace.iter().map(|v| (v - trace[0]).abs()).fold(0.0, f64::max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityGap {
    /// `<G(m1(T)) - G(m2(T)), m1(T) - m2(T)>`.
    pub terminal: f64,
    /// `int <F(m1) - F(m2), m1 - m2> dt`.
    pub running: f64,
    /// `int <m1, E(Du2, Du1)> dt`.
    pub bregman_first: f64,
    /// `int <m2, E(Du1, Du2)> dt`.
    pub bregman_second: f64,
}

impl DualityGap {
    pub fn total(&self) -> f64 {
        self.terminal + self.running + self.bregman_first + self.bregman_second
    }

    pub fn terms(&self) -> [f64; 4] {
        [self.terminal, self.running, self.bregman_first, self.bregman_second]
    }
}

/// Monotonicity gap between two solutions of the same problem.
pub fn duality_gap(sol1: &MfgSolution, sol2: &MfgSolution, problem: &MfgProblem, config: &MfgConfig) -> Result<DualityGap> {
    if !sol1.u.same_layout(&sol2.u) || !sol1.m.same_layout(&sol2.m) || !sol1.u.grid.same_layout(&sol1.m.grid) {
        return Err(Error::GridMismatch("solutions live on different grids".into()));
    }
    let grid = &sol1.u.grid;
    let time = sol1.u.time;
    let hjb = HjbSolver::new(grid.clone(), &problem.a, &problem.model, time, &config.hjb())?;
    let (stencil, model) = (&hjb.stencil, &hjb.model);
    let vol = grid.cart.cell_volume();
    let dt = time.dt();
    let nt = time.n_steps;
    let pair = |c: &crate::models::Coupling, m1: &[f64], m2: &[f64]| -> f64 {
        let (f1, f2) = (c.evaluate(grid, m1), c.evaluate(grid, m2));
        (0..m1.len()).map(|i| (f1[i] - f2[i]) * (m1[i] - m2[i])).sum::<f64>() * vol
    };
    let terminal = pair(&problem.g, sol1.m.slice(nt), sol2.m.slice(nt));
    let running: f64 = (0..nt).map(|n| pair(&problem.f, sol1.m.slice(n), sol2.m.slice(n))).sum::<f64>() * dt;
    let (mut b1, mut b2) = (0.0, 0.0);
    for n in 0..nt {
        let t = time.time(n);
        let (u1, u2) = (sol1.u.slice(n), sol2.u.slice(n));
        let (m1, m2) = (sol1.m.slice(n), sol2.m.slice(n));
        for c in 0..grid.len() {
            let x = grid.center(c);
            let p1 = stencil.centered_gradient(u1, c);
            let p2 = stencil.centered_gradient(u2, c);
            b1 += m1[c] * model.bregman(t, &x, &p2, &p1);
            b2 += m2[c] * model.bregman(t, &x, &p1, &p2);
        }
    }
    Ok(DualityGap { terminal, running, bregman_first: b1 * vol * dt, bregman_second: b2 * vol * dt })
}

#[derive(Debug, Clone, Serialize)]
pub struct MBoundReport {
    /// Worst `(b~ + H_p(Du)) . Dd` on the layer `0 < d < delta`.
    pub worst_margin: f64,
    pub condition_holds: bool,
    pub m_sup: f64,
    pub m_sup_refined: f64,
    /// `m_sup_refined / m_sup - 1`.
    pub growth: f64,
    pub bounded: bool,
    pub passed: bool,
}

/// Checks the inward-drift condition near the boundary and the stability of `||m||_inf` under `h -> h/2`.
pub fn m_bound_check(sol: &MfgSolution, problem: &MfgProblem, config: &MfgConfig, delta: f64) -> Result<MBoundReport> {
    let coupled = Coupled::new(problem, config)?;
    if !coupled.hjb.stencil.grid.same_layout(&sol.u.grid) {
        return Err(Error::GridMismatch("solution grid does not match the config".into()));
    }
    let worst_margin = layer_margin(problem, &coupled, &sol.u, delta);
    let condition_holds = worst_margin <= 1e-10;
    let fine = MfgConfig { h: config.h / 2.0, dt: config.dt / 2.0, ..*config };
    let refined = solve_mfg(problem, &fine, None)?;
    let m_sup = sol.diagnostics.m_sup;
    let m_sup_refined = refined.diagnostics.m_sup;
    let growth = m_sup_refined / m_sup - 1.0;
    let bounded = growth < 0.1;
    Ok(MBoundReport { worst_margin, condition_holds, m_sup, m_sup_refined, growth, bounded, passed: condition_holds && bounded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fp::solve_fp;
    use crate::hjb::solve_hjb;
    use crate::models::{example1_hamiltonian, Coupling, CouplingMode, LocalCoupling, RunningCost};

    fn unit() -> DomainSpec {
        DomainSpec::interval(0.0, 1.0, 0.25).unwrap()
    }

    fn monotone_problem() -> MfgProblem {
        let dom = unit();
        let model = example1_hamiltonian(2.5, 1.0, RunningCost::Quadratic, &dom).unwrap();
        MfgProblem::new(
            dom,
            DiffusionField::wright_fisher(1, 1.0),
            model,
            Coupling::new(CouplingMode::Local(LocalCoupling::Linear { strength: 1.0 }))
                .with_profile(|x| (x[0] - 0.3).powi(2), 1.0),
            Coupling::zero().with_profile(|x| x[0], 1.0),
            |_| 1.0,
            0.5,
        )
    }

    fn config() -> MfgConfig {
        MfgConfig { tol: 1e-9, ..MfgConfig::new(1.0 / 32.0, 0.005) }
    }

    #[test]
    fn decoupled_run_matches_composed_solves() {
        let mut p = monotone_problem();
        p.f = Coupling::zero().with_profile(|x| x[0] * x[0], 1.0);
        let cfg = config();
        let sol = solve_mfg(&p, &cfg, None).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.converged);

        let grid = cfg.hjb().grid(&p.domain).unwrap();
        let time = TimeAxis::with_step(p.t_final, cfg.dt).unwrap();
        let f = SpaceTimeField::from_fn(grid.clone(), time, |_, x| x[0] * x[0]).unwrap();
        let g = sample_density(&grid, |x| x[0]);
        let u = solve_hjb(&p.domain, &p.a, &p.model, &f, &g, &cfg.hjb()).unwrap();
        assert_eq!(u.values(), sol.u.values());

        let coupled = Coupled::new(&p, &cfg).unwrap();
        let slices: Vec<Vec<f64>> = u.slices().map(<[f64]>::to_vec).collect();
        let m = coupled.density(&slices).unwrap();
        assert_eq!(m.values(), sol.m.values());
    }

    #[test]
    fn zero_data_gives_zero_value_and_pure_b_tilde_flow() {
        let dom = unit();
        let model = example1_hamiltonian(0.0, 1.0, RunningCost::Quadratic, &dom).unwrap();
        let p = MfgProblem::new(
            dom.clone(),
            DiffusionField::wright_fisher(1, 1.0),
            model,
            Coupling::zero(),
            Coupling::zero(),
            |x| 1.0 + x[0],
            0.3,
        );
        let cfg = MfgConfig { override_checks: true, ..config() };
        let sol = solve_mfg(&p, &cfg, None).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.u.values().iter().all(|v| *v == 0.0));
        let grid = cfg.fp().grid(&dom).unwrap();
        let m0 = sample_density(&grid, |x| 1.0 + x[0]);
        let a = DiffusionField::wright_fisher(1, 1.0);
        let tb = |_: f64, x: &Vector| a.divergence_drift(x);
        let m = solve_fp(&dom, &a, &tb, &m0, 0.3, &cfg.fp()).unwrap();
        let diff = m.sup_l1_distance(&sol.m).unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn monotone_runs_agree_and_certify() {
        let p = monotone_problem();
        let cfg = config();
        let s1 = solve_mfg(&p, &cfg, None).unwrap();
        assert!(s1.converged);
        let grid = cfg.hjb().grid(&p.domain).unwrap();
        let time = s1.m.time;
        let bump = SpaceTimeField::from_fn(grid, time, |_, x| if x[0] < 0.5 { 2.0 } else { 0.0 }).unwrap();
        let s2 = solve_mfg(&p, &cfg, Some(&DensityField::new(bump, 0))).unwrap();
        assert!(s2.converged);
        assert!(s1.m.sup_l1_distance(&s2.m).unwrap() <= 10.0 * cfg.tol);
        let gap = duality_gap(&s1, &s2, &p, &cfg).unwrap();
        for t in gap.terms() {
            assert!(t >= -1e-10, "{gap:?}");
        }
        assert!(gap.total() <= 1e-6, "{gap:?}");
        let same = duality_gap(&s1, &s1, &p, &cfg).unwrap();
        assert_eq!(same.total(), 0.0);
        for w in s1.residual_history.windows(2).skip(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn undamped_reaches_the_same_limit() {
        let mut p = monotone_problem();
        p.f = Coupling::new(CouplingMode::Local(LocalCoupling::Linear { strength: 0.5 }))
            .with_profile(|x| (x[0] - 0.3).powi(2), 1.0);
        let cfg = config();
        let half = solve_mfg(&p, &cfg, None).unwrap();
        let full = solve_mfg(&p, &MfgConfig { theta: 1.0, ..cfg }, None).unwrap();
        assert!(full.converged);
        assert_ne!(full.iterations, half.iterations);
        assert!(half.m.sup_l1_distance(&full.m).unwrap() <= 10.0 * cfg.tol);
    }

    #[test]
    fn mass_is_conserved_along_the_solution() {
        let sol = solve_mfg(&monotone_problem(), &config(), None).unwrap();
        assert!(sol.diagnostics.mass_drift <= 1e-10);
        assert!(sol.m.min_value() >= 0.0);
    }

    #[test]
    fn failing_invariance_is_refused_without_override() {
        let mut p = monotone_problem();
        p.model = HamiltonianModel::linear(1, |_| Vector::new(1.0, 0.0), 1.0);
        let err = solve_mfg(&p, &config(), None).unwrap_err();
        assert!(matches!(err, Error::InvarianceNotSatisfied { .. }), "{err:?}");
    }

    #[test]
    fn bad_damping_is_rejected() {
        let cfg = MfgConfig { theta: 0.0, ..config() };
        assert!(matches!(solve_mfg(&monotone_problem(), &cfg, None), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn inward_fixture_has_bounded_density() {
        let p = monotone_problem();
        let cfg = MfgConfig { tol: 1e-7, ..MfgConfig::new(1.0 / 16.0, 0.01) };
        let sol = solve_mfg(&p, &cfg, None).unwrap();
        let report = m_bound_check(&sol, &p, &cfg, 0.2).unwrap();
        assert!(report.worst_margin < 0.0, "{report:?}");
        assert!(report.passed, "{report:?}");
    }
}
