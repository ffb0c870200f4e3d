use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use viable_mfg::field::{write_density, write_field, write_slice_csv};
use viable_mfg::fp::{kolmogorov_drift, sample_density, solve_fp};
use viable_mfg::hjb::{max_principle_bound, solve_hjb};
use viable_mfg::invariance::{check_generalized, check_hjb_invariance, GeneralizedMode, InvarianceReport, SampleSpec, Verdict};
use viable_mfg::mfg::{duality_gap, solve_mfg, MfgDiagnostics, MfgProblem, MfgSolution};
use viable_mfg::sde::{feedback_drift, simulate, write_paths, InitialState, PathStore, ViabilityStats};
use viable_mfg::{DensityField, DomainKind, SpaceTimeField, TimeAxis, VectorField};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solver(#[from] viable_mfg::Error),
    #[error("writing output: {0}")]
    Io(#[from] std::io::Error),
    #[error("solver did not converge: {0}")]
    NotConverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) | CliError::Io(_) | CliError::NotConverged(_) => 3,
        }
    }
}

/// Result of a subcommand that ran to completion.
pub struct Outcome {
    /// `false` when a check or certificate failed.
    pub passed: bool,
    pub outputs: Vec<PathBuf>,
}

struct Writer<'a> {
    dir: &'a Path,
    outputs: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir, outputs: Vec::new() })
    }

    fn file(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        self.outputs.push(path);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        self.file(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::from)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn finish(self, passed: bool) -> Outcome {
        Outcome { passed, outputs: self.outputs }
    }
}

#[derive(Serialize)]
struct InvarianceSummary {
    check: String,
    verdict: Verdict,
    c: f64,
    delta: f64,
    min_margin: f64,
    fitted_c: f64,
    n_samples: usize,
    caveats: Vec<String>,
    worst_samples: Vec<viable_mfg::invariance::MarginSample>,
}

impl InvarianceSummary {
    fn new(check: &str, r: &InvarianceReport) -> Self {
        let mut worst = r.samples.clone();
        worst.sort_by(|a, b| a.margin.total_cmp(&b.margin));
        worst.truncate(10);
        Self {
            check: check.to_string(),
            verdict: r.verdict,
            c: r.c,
            delta: r.delta,
            min_margin: r.min_margin,
            fitted_c: r.fitted_c,
            n_samples: r.samples.len(),
            caveats: r.caveats.clone(),
            worst_samples: worst,
        }
    }
}

fn invariance(cfg: &RunConfig, problem: &MfgProblem) -> Result<Vec<InvarianceSummary>, CliError> {
    let spec = SampleSpec { times: vec![0.0, 0.5 * cfg.t_final, cfg.t_final], ..SampleSpec::default() };
    let (delta, c) = (cfg.solver.invariance_delta, cfg.solver.invariance_c);
    let (dom, a, model) = (&problem.domain, &problem.a, &problem.model);
    Ok(match dom.kind {
        DomainKind::Smooth => vec![InvarianceSummary::new("hjb", &check_hjb_invariance(dom, a, model, delta, c, &spec))],
        DomainKind::Generalized => vec![
            InvarianceSummary::new("per_piece", &check_generalized(dom, a, model, delta, c, GeneralizedMode::PerPiece, &spec)?),
            InvarianceSummary::new("barrier", &check_generalized(dom, a, model, delta, c, GeneralizedMode::Barrier, &spec)?),
        ],
    })
}

fn invariance_passed(reports: &[InvarianceSummary]) -> bool {
    // The barrier check only needs some finite constant.
    reports.iter().all(|r| if r.check == "barrier" { r.fitted_c.is_finite() } else { r.verdict == Verdict::Pass })
}

pub fn check_invariance(cfg: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let reports = invariance(cfg, &problem)?;
    let passed = invariance_passed(&reports);
    let mut out = Writer::new(dir)?;
    out.json("invariance.json", &reports)?;
    Ok(out.finish(passed))
}

/// `F` and `G` evaluated on the initial density, constant in time.
fn decoupled_data(cfg: &RunConfig, problem: &MfgProblem) -> Result<(SpaceTimeField, Vec<f64>), CliError> {
    let grid = cfg.solver.hjb().grid(&problem.domain)?;
    let time = TimeAxis::with_step(cfg.t_final, cfg.solver.dt)?;
    let m0 = sample_density(&grid, |x| (problem.m0)(x));
    let f_slice = problem.f.evaluate(&grid, &m0);
    let values = f_slice.iter().copied().cycle().take(f_slice.len() * time.n_slices()).collect();
    let g = problem.g.evaluate(&grid, &m0);
    Ok((SpaceTimeField::new(grid, time, values)?, g))
}

#[derive(Serialize)]
struct HjbSummary {
    sup_norm: f64,
    max_principle_bound: f64,
    max_cfl: Option<f64>,
    n_cells: usize,
    n_slices: usize,
}

pub fn solve_hjb_cmd(cfg: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let (f, g) = decoupled_data(cfg, &problem)?;
    let u = solve_hjb(&problem.domain, &problem.a, &problem.model, &f, &g, &cfg.solver.hjb())?;
    let summary = HjbSummary {
        sup_norm: u.sup_norm(),
        max_principle_bound: max_principle_bound(&f, &g, &problem.model),
        max_cfl: u.meta.get("max_cfl").copied(),
        n_cells: u.grid.len(),
        n_slices: u.n_slices(),
    };
    let mut out = Writer::new(dir)?;
    out.file("u.field", |w| Ok(write_field(w, &u)?))?;
    out.file("u0.csv", |w| Ok(write_slice_csv(w, &u, 0)?))?;
    out.json("summary.json", &summary)?;
    Ok(out.finish(true))
}

fn write_mass_csv(w: &mut impl Write, m: &DensityField) -> Result<(), CliError> {
    writeln!(w, "t,mass")?;
    for (n, mass) in m.mass_trace().iter().enumerate() {
        writeln!(w, "{},{}", m.time.time(n), mass)?;
    }
    Ok(())
}

fn relative_mass_drift(m: &DensityField) -> f64 {
    let trace = m.mass_trace();
    let drift = trace.iter().map(|v| (v - trace[0]).abs()).fold(0.0, f64::max);
    if trace[0] > 0.0 {
        drift / trace[0]
    } else {
        drift
    }
}

#[derive(Serialize)]
struct FpSummary {
    initial_mass: f64,
    relative_mass_drift: f64,
    min_value: f64,
    drift_signature: u64,
}

pub fn solve_fp_cmd(cfg: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let fp = cfg.solver.fp();
    let grid = fp.grid(&problem.domain)?;
    let m0 = sample_density(&grid, |x| (problem.m0)(x));
    let beta = cfg.drift.field(problem.domain.dim);
    let b = kolmogorov_drift(&problem.a, &beta);
    let m = solve_fp(&problem.domain, &problem.a, &b, &m0, cfg.t_final, &fp)?;
    let summary = FpSummary {
        initial_mass: m.mass(0),
        relative_mass_drift: relative_mass_drift(&m),
        min_value: m.min_value(),
        drift_signature: m.drift_signature,
    };
    let mut out = Writer::new(dir)?;
    out.file("m.field", |w| Ok(write_density(w, &m)?))?;
    out.file("mass.csv", |w| write_mass_csv(w, &m))?;
    out.json("summary.json", &summary)?;
    Ok(out.finish(true))
}

#[derive(Serialize)]
struct MfgSummary<'a> {
    iterations: usize,
    converged: bool,
    final_residual: Option<f64>,
    relative_mass_drift: f64,
    diagnostics: &'a MfgDiagnostics,
}

fn mfg_summary(sol: &MfgSolution) -> MfgSummary<'_> {
    MfgSummary {
        iterations: sol.iterations,
        converged: sol.converged,
        final_residual: sol.residual_history.last().copied(),
        relative_mass_drift: relative_mass_drift(&sol.m),
        diagnostics: &sol.diagnostics,
    }
}

pub fn solve_mfg_cmd(cfg: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let sol = solve_mfg(&problem, &cfg.solver, None)?;
    let mut out = Writer::new(dir)?;
    out.file("u.field", |w| Ok(write_field(w, &sol.u)?))?;
    out.file("m.field", |w| Ok(write_density(w, &sol.m)?))?;
    out.file("residuals.csv", |w| {
        writeln!(w, "iteration,residual")?;
        for (k, r) in sol.residual_history.iter().enumerate() {
            writeln!(w, "{},{}", k + 1, r)?;
        }
        Ok(())
    })?;
    out.json("summary.json", &mfg_summary(&sol))?;
    if !sol.converged {
        return Err(CliError::NotConverged(format!(
            "{} iterations, last residual {:?}; artifacts hold the best iterate",
            sol.iterations,
            sol.residual_history.last()
        )));
    }
    Ok(out.finish(true))
}

fn start_state(cfg: &RunConfig, problem: &MfgProblem) -> Result<InitialState, CliError> {
    Ok(match cfg.sde.x0 {
        Some(x) => InitialState::Point(x.into()),
        None => {
            let grid = cfg.solver.fp().grid(&problem.domain)?;
            let values = sample_density(&grid, |x| (problem.m0)(x));
            InitialState::Density { grid, values }
        }
    })
}

fn sweep(
    cfg: &RunConfig,
    problem: &MfgProblem,
    drift: &dyn VectorField,
) -> Result<(Vec<ViabilityStats>, Option<PathStore>), CliError> {
    let start = start_state(cfg, problem)?;
    let mut table = Vec::new();
    let mut paths = None;
    for &dt in &cfg.sde.dt {
        let run = simulate(&problem.domain, &problem.a, drift, &start, cfg.t_final, &cfg.sde.config(dt, cfg.seed))?;
        table.push(run.stats);
        paths = run.paths;
    }
    Ok((table, paths))
}

/// Each refinement may exceed the previous exit fraction by at most two combined standard errors.
fn exits_nonincreasing(table: &[ViabilityStats]) -> bool {
    table.windows(2).all(|w| {
        let se = (w[0].exit_std_error.powi(2) + w[1].exit_std_error.powi(2)).sqrt();
        w[1].exit_fraction <= w[0].exit_fraction + 2.0 * se
    })
}

#[derive(Serialize)]
struct SdeSummary<'a> {
    table: &'a [ViabilityStats],
    exit_fraction_nonincreasing: bool,
}

pub fn simulate_sde_cmd(cfg: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let beta = cfg.drift.field(problem.domain.dim);
    let (table, paths) = sweep(cfg, &problem, &beta)?;
    let mut out = Writer::new(dir)?;
    out.json("sde.json", &SdeSummary { table: &table, exit_fraction_nonincreasing: exits_nonincreasing(&table) })?;
    if let Some(store) = &paths {
        out.file("paths.bin", |w| Ok(write_paths(w, store)?))?;
    }
    Ok(out.finish(true))
}

/// Initial density times a cell-wise random factor in `[1 - amp, 1 + amp]`, rescaled to the same mass.
fn perturbed_guess(cfg: &RunConfig, problem: &MfgProblem) -> Result<DensityField, CliError> {
    let grid = cfg.solver.hjb().grid(&problem.domain)?;
    let time = TimeAxis::with_step(cfg.t_final, cfg.solver.dt)?;
    let m0 = sample_density(&grid, |x| (problem.m0)(x));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let amp = cfg.certify.perturbation;
    let mut guess: Vec<f64> = m0.iter().map(|v| v * (1.0 + amp * (2.0 * rng.random::<f64>() - 1.0))).collect();
    let (before, after) = (m0.iter().sum::<f64>(), guess.iter().sum::<f64>());
    if after > 0.0 {
        guess.iter_mut().for_each(|v| *v *= before / after);
    }
    let values = guess.iter().copied().cycle().take(guess.len() * time.n_slices()).collect();
    Ok(DensityField::new(SpaceTimeField::new(grid, time, values)?, 0))
}

#[derive(Serialize)]
struct GapSummary {
    terminal: f64,
    running: f64,
    bregman_first: f64,
    bregman_second: f64,
    total: f64,
    scale: f64,
    tolerance: f64,
    terms_nonnegative: bool,
    passed: bool,
}

#[derive(Serialize)]
struct Certificate<'a> {
    passed: bool,
    invariance_passed: bool,
    invariance: Vec<InvarianceSummary>,
    runs: [MfgSummary<'a>; 2],
    sup_l1_distance: f64,
    duality_gap: GapSummary,
    sde: SdeSummary<'a>,
}

pub fn certify(cfg: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let problem = cfg.problem()?;
    let inv = invariance(cfg, &problem)?;
    let invariance_passed = invariance_passed(&inv);
    let s1 = solve_mfg(&problem, &cfg.solver, None)?;
    let s2 = solve_mfg(&problem, &cfg.solver, Some(&perturbed_guess(cfg, &problem)?))?;
    let dist = s1.m.sup_l1_distance(&s2.m)?;
    let gap = duality_gap(&s1, &s2, &problem, &cfg.solver)?;
    let f_sup = (0..s1.m.n_slices())
        .map(|n| problem.f.evaluate(&s1.u.grid, s1.m.slice(n)).iter().fold(0.0f64, |a, v| a.max(v.abs())))
        .fold(0.0, f64::max);
    let scale = s1.m.mass(0) * f_sup * cfg.t_final;
    let tolerance = cfg.certify.gap_tol * if scale > 0.0 { scale } else { 1.0 };
    let terms_nonnegative = gap.terms().iter().all(|t| *t >= -1e-10);
    let gap_passed = terms_nonnegative && gap.total() <= tolerance;
    let duality_gap = GapSummary {
        terminal: gap.terminal,
        running: gap.running,
        bregman_first: gap.bregman_first,
        bregman_second: gap.bregman_second,
        total: gap.total(),
        scale,
        tolerance,
        terms_nonnegative,
        passed: gap_passed,
    };
    let drift = feedback_drift(&s1.u, &problem.model);
    let (table, _) = sweep(cfg, &problem, &drift)?;
    let sde_ok = exits_nonincreasing(&table);
    let converged = s1.converged && s2.converged;
    let passed = invariance_passed && converged && gap_passed && sde_ok;
    let cert = Certificate {
        passed,
        invariance_passed,
        invariance: inv,
        runs: [mfg_summary(&s1), mfg_summary(&s2)],
        sup_l1_distance: dist,
        duality_gap,
        sde: SdeSummary { table: &table, exit_fraction_nonincreasing: sde_ok },
    };
    let mut out = Writer::new(dir)?;
    out.json("certificate.json", &cert)?;
    Ok(out.finish(passed))
}
