//! Euler-Maruyama simulation of `dX = beta(s, X) ds + sqrt(2) sigma(X) dB` and viability statistics.
//!
//! A step that leaves the domain is retried from the pre-step state as two
//! half steps with fresh noise, recursively up to `substep_limit` levels; a
//! path that still leaves is flagged as exited and frozen. Each path draws from its own ChaCha stream
//! `(seed, path index)`, so results do not depend on thread scheduling.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::warn;
use nalgebra::SymmetricEigen;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{SpaceTimeField, TimeAxis};
use crate::geometry::DomainSpec;
use crate::grid::MaskedGrid;
use crate::models::{DiffusionField, HamiltonianModel};
use crate::types::{Matrix, Vector, VectorField};

const PATH_MAGIC: &[u8; 4] = b"MFGP";
const PATH_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub dt: f64,
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_substeps")]
    pub substep_limit: u32,
    /// Number of equal intervals between stored samples; `0` stores nothing.
    #[serde(default)]
    pub store_samples: usize,
}

fn default_substeps() -> u32 {
    10
}

impl SdeConfig {
    pub fn new(dt: f64, n_paths: usize, seed: u64) -> Self {
        Self { dt, n_paths, seed, substep_limit: default_substeps(), store_samples: 0 }
    }

    pub fn storing(mut self, samples: usize) -> Self {
        self.store_samples = samples;
        self
    }
}

/// Where paths start.
#[derive(Debug, Clone)]
pub enum InitialState {
    Point(Vector),
    /// Cell-wise constant density on `grid`; positions are uniform inside the chosen cell.
    Density { grid: MaskedGrid, values: Vec<f64> },
}

#[derive(Debug, Clone, Serialize)]
pub struct ViabilityStats {
    pub dt: f64,
    pub n_paths: usize,
    pub exit_fraction: f64,
    /// Binomial standard error of `exit_fraction`.
    pub exit_std_error: f64,
    /// 1%, 10% and 50% quantiles of `min_s d(X_s)` over paths (0 for exited paths).
    pub min_distance_quantiles: [f64; 3],
    /// Slope from [`lyapunov_check`] when paths were stored.
    pub lyapunov_slope: Option<f64>,
    pub refined_steps: u64,
}

/// Positions at evenly spaced sample times, plus exit times (`inf` for paths that stayed).
#[derive(Debug, Clone, PartialEq)]
pub struct PathStore {
    pub dim: usize,
    pub times: Vec<f64>,
    positions: Vec<Vector>,
    pub exit_times: Vec<f64>,
}

impl PathStore {
    pub fn n_paths(&self) -> usize {
        self.exit_times.len()
    }

    pub fn position(&self, path: usize, sample: usize) -> Vector {
        self.positions[path * self.times.len() + sample]
    }

    /// Whether the path is still running at sample `sample`.
    pub fn alive(&self, path: usize, sample: usize) -> bool {
        self.times[sample] < self.exit_times[path]
    }

    fn sample_near(&self, t: f64) -> Result<usize> {
        let span = self.times.last().copied().unwrap_or(0.0).max(1.0);
        self.times
            .iter()
            .position(|s| (s - t).abs() <= 1e-9 * span)
            .ok_or_else(|| Error::InvalidInput(format!("t = {t} is not a stored sample time")))
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub stats: ViabilityStats,
    pub paths: Option<PathStore>,
}

struct PathResult {
    exit_time: f64,
    min_distance: f64,
    samples: Vec<Vector>,
    refined: u64,
}

struct Stepper<'a> {
    domain: &'a DomainSpec,
    a: &'a DiffusionField,
    drift: &'a dyn VectorField,
    limit: u32,
    dim: usize,
}

impl Stepper<'_> {
    fn sigma(&self, x: &Vector) -> Matrix {
        self.a.sigma(x).unwrap_or_else(|| matrix_sqrt(&self.a.a(x), self.dim))
    }

    /// Advances by `dt`, halving on exit; returns the new state and its distance, `None` once exited.
    fn advance(&self, x: Vector, t: f64, dt: f64, depth: u32, rng: &mut ChaCha8Rng, refined: &mut u64) -> Option<(Vector, f64)> {
        let dw = normal(rng, self.dim) * (2.0 * dt).sqrt();
        let b = self.drift.eval(t, &x);
        let y = if self.dim == 1 {
            let s = self.sigma(&x)[(0, 0)];
            Vector::new(x[0] + b[0] * dt + s * dw[0], 0.0)
        } else {
            x + b * dt + self.sigma(&x) * dw
        };
        let d = self.domain.distance(&y);
        if d > 0.0 {
            return Some((y, d));
        }
        if depth >= self.limit {
            return None;
        }
        *refined += 1;
        let half = dt / 2.0;
        let (mid, _) = self.advance(x, t, half, depth + 1, rng, refined)?;
        self.advance(mid, t + half, half, depth + 1, rng, refined)
    }
}

fn normal(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    let mut z = Vector::zeros();
    for k in 0..dim {
        z[k] = rng.sample(StandardNormal);
    }
    z
}

/// Symmetric square root, negative eigenvalues clipped.
fn matrix_sqrt(a: &Matrix, dim: usize) -> Matrix {
    if dim == 1 {
        let mut m = Matrix::zeros();
        m[(0, 0)] = a[(0, 0)].max(0.0).sqrt();
        return m;
    }
    let eig = SymmetricEigen::new(*a);
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    eig.eigenvectors * Matrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn draw_start(state: &InitialState, sampler: Option<&WeightedIndex<f64>>, rng: &mut ChaCha8Rng) -> Vector {
    match state {
        InitialState::Point(x) => *x,
        InitialState::Density { grid, .. } => {
            let c = sampler.expect("sampler built for densities").sample(rng);
            let mut x = grid.center(c);
            for k in 0..grid.dim() {
                x[k] += (rng.random::<f64>() - 0.5) * grid.h();
            }
            x
        }
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    sorted[((sorted.len() - 1) as f64 * q).floor() as usize]
}

/// Simulates `config.n_paths` paths on `[0, t_final]` with diffusion factor taken from `a`.
pub fn simulate(
    domain: &DomainSpec,
    a: &DiffusionField,
    drift: &dyn VectorField,
    start: &InitialState,
    t_final: f64,
    config: &SdeConfig,
) -> Result<SimulationOutput> {
    if config.n_paths == 0 {
        return Err(Error::InvalidInput("n_paths must be at least 1".into()));
    }
    let time = TimeAxis::with_step(t_final, config.dt)?;
    let n_steps = time.n_steps;
    let stride = match config.store_samples {
        0 => None,
        s if n_steps % s == 0 => Some(n_steps / s),
        s => {
            return Err(Error::InvalidInput(format!("{s} sample intervals do not divide {n_steps} steps")));
        }
    };
    let sampler = match start {
        InitialState::Point(x) => {
            if !domain.contains(x) {
                return Err(Error::InvalidInput(format!("x0 = {x:?} is not strictly inside the domain")));
            }
            None
        }
        InitialState::Density { grid, values } => {
            if values.len() != grid.len() {
                return Err(Error::GridMismatch("initial density does not match its grid".into()));
            }
            Some(WeightedIndex::new(values).map_err(|e| Error::InvalidInput(format!("initial density: {e}")))?)
        }
    };
    let stepper = Stepper { domain, a, drift, limit: config.substep_limit, dim: domain.dim };
    let dt = time.dt();

    let results: Vec<PathResult> = (0..config.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(path as u64);
            let mut x = draw_start(start, sampler.as_ref(), &mut rng);
            let mut min_distance = domain.distance(&x);
            let mut exit_time = f64::INFINITY;
            let mut refined = 0;
            let mut samples = Vec::new();
            if stride.is_some() {
                samples.push(x);
            }
            for n in 0..n_steps {
                if exit_time.is_infinite() {
                    let t = n as f64 * dt;
                    match stepper.advance(x, t, dt, 0, &mut rng, &mut refined) {
                        Some((y, d)) => {
                            x = y;
                            min_distance = min_distance.min(d);
                        }
                        None => {
                            exit_time = t;
                            min_distance = 0.0;
                        }
                    }
                }
                if let Some(s) = stride {
                    if (n + 1) % s == 0 {
                        samples.push(x);
                    }
                }
            }
            PathResult { exit_time, min_distance, samples, refined }
        })
        .collect();

    let n = config.n_paths as f64;
    let exited = results.iter().filter(|r| r.exit_time.is_finite()).count() as f64;
    let p = exited / n;
    let mut mins: Vec<f64> = results.iter().map(|r| r.min_distance).collect();
    mins.sort_by(f64::total_cmp);
    let paths = stride.map(|s| {
        let times = (0..=config.store_samples).map(|k| time.time(k * s)).collect();
        let mut positions = Vec::with_capacity(results.len() * (config.store_samples + 1));
        for r in &results {
            positions.extend_from_slice(&r.samples);
        }
        PathStore { dim: domain.dim, times, positions, exit_times: results.iter().map(|r| r.exit_time).collect() }
    });
    let lyapunov_slope = match &paths {
        Some(store) if store.times.len() > 1 => Some(lyapunov_check(Some(store), domain, f64::INFINITY)?.slope),
        _ => None,
    };
    let stats = ViabilityStats {
        dt,
        n_paths: config.n_paths,
        exit_fraction: p,
        exit_std_error: (p * (1.0 - p) / n).sqrt(),
        min_distance_quantiles: [quantile(&mins, 0.01), quantile(&mins, 0.1), quantile(&mins, 0.5)],
        lyapunov_slope,
        refined_steps: results.iter().map(|r| r.refined).sum(),
    };
    Ok(SimulationOutput { stats, paths })
}

/// Runs [`simulate`] once per step size; every run uses the same seed.
pub fn sweep_dt(
    domain: &DomainSpec,
    a: &DiffusionField,
    drift: &dyn VectorField,
    start: &InitialState,
    t_final: f64,
    config: &SdeConfig,
    dts: &[f64],
) -> Result<Vec<ViabilityStats>> {
    dts.iter()
        .map(|&dt| simulate(domain, a, drift, start, t_final, &SdeConfig { dt, ..*config }).map(|o| o.stats))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovReport {
    pub times: Vec<f64>,
    /// Sample mean of `-log d(X_{s ^ tau})`; `inf` once any path has exited.
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Least-squares slope of `means - means[0]` against `s` through the origin.
    pub slope: f64,
    pub slope_std_error: f64,
    pub blow_up: bool,
    pub passed: bool,
}

/// Estimates `E[-log d(X_s)]` and checks `slope <= c_expected + 2 SE`.
pub fn lyapunov_check(paths: Option<&PathStore>, domain: &DomainSpec, c_expected: f64) -> Result<LyapunovReport> {
    let store = paths.ok_or(Error::NoStoredPaths)?;
    let n = store.n_paths() as f64;
    let mut means = Vec::new();
    let mut std_errors = Vec::new();
    for k in 0..store.times.len() {
        let vals: Vec<f64> = (0..store.n_paths())
            .map(|p| {
                let d = if store.alive(p, k) { domain.distance(&store.position(p, k)) } else { 0.0 };
                if d > 0.0 { -d.ln() } else { f64::INFINITY }
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = if mean.is_finite() {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
        } else {
            f64::INFINITY
        };
        means.push(mean);
        std_errors.push((var / n).sqrt());
    }
    let blow_up = means.iter().any(|m| !m.is_finite());
    let (slope, slope_se) = if blow_up {
        (f64::INFINITY, f64::INFINITY)
    } else {
        let s2: f64 = store.times.iter().map(|t| t * t).sum();
        if s2 == 0.0 {
            (0.0, 0.0)
        } else {
            let slope = store.times.iter().zip(&means).map(|(t, m)| t * (m - means[0])).sum::<f64>() / s2;
            let var = store.times.iter().zip(&std_errors).map(|(t, e)| (t * e / s2).powi(2)).sum::<f64>();
            (slope, var.sqrt())
        }
    };
    let passed = !blow_up && slope <= c_expected + 2.0 * slope_se;
    Ok(LyapunovReport { times: store.times.clone(), means, std_errors, slope, slope_std_error: slope_se, blow_up, passed })
}

/// Histogram of surviving paths at a stored time, normalised by `n_paths h^N`.
#[derive(Debug, Clone)]
pub struct EmpiricalDensity {
    pub values: Vec<f64>,
    /// Fraction of paths that exited or fell outside the active cells.
    pub missing_mass: f64,
}

pub fn empirical_density(paths: Option<&PathStore>, grid: &MaskedGrid, t: f64) -> Result<EmpiricalDensity> {
    let store = paths.ok_or(Error::NoStoredPaths)?;
    let k = store.sample_near(t)?;
    let mut counts = vec![0usize; grid.len()];
    let mut missing = 0usize;
    for p in 0..store.n_paths() {
        let cell = if store.alive(p, k) { grid.cart.locate(&store.position(p, k)).and_then(|i| grid.active_index(i)) } else { None };
        match cell {
            Some(c) => counts[c] += 1,
            None => missing += 1,
        }
    }
    let n = store.n_paths() as f64;
    let norm = n * grid.cart.cell_volume();
    Ok(EmpiricalDensity {
        values: counts.into_iter().map(|c| c as f64 / norm).collect(),
        missing_mass: missing as f64 / n,
    })
}

/// Feedback drift `-H_p(s, x, Du(s, x))`, optionally minus `b~`.
///
/// `Du` is bilinear in space between cell centres and piecewise constant in time.
pub struct FeedbackDrift {
    u: SpaceTimeField,
    model: HamiltonianModel,
    correction: Option<DiffusionField>,
    gradients: Vec<Vec<Vector>>,
    warned: AtomicBool,
}

pub fn feedback_drift(u: &SpaceTimeField, model: &HamiltonianModel) -> FeedbackDrift {
    let gradients = u
        .slices()
        .map(|s| (0..u.grid.len()).map(|c| u.grid.centered_gradient(s, c)).collect())
        .collect();
    FeedbackDrift { u: u.clone(), model: model.clone(), correction: None, gradients, warned: AtomicBool::new(false) }
}

impl FeedbackDrift {
    /// Subtracts `b~` from the drift.
    pub fn with_divergence_correction(mut self, a: &DiffusionField) -> Self {
        self.correction = Some(a.clone());
        self
    }

    fn clamp_warning(&self, x: &Vector) {
        if !self.warned.swap(true, Ordering::Relaxed) {
            warn!("feedback drift queried outside the grid hull at {x:?}; clamping to the nearest cell");
        }
    }

    /// Interpolated gradient of slice `n` at `x`.
    pub fn gradient(&self, n: usize, x: &Vector) -> Vector {
        let grid = &self.u.grid;
        let cart = &grid.cart;
        let dim = grid.dim();
        let mut base = [0i64; 2];
        let mut frac = [0.0f64; 2];
        for k in 0..dim {
            let raw = (x[k] - cart.lo[k]) / cart.h;
            if raw < 0.0 || raw > cart.n[k] as f64 {
                self.clamp_warning(x);
            }
            let s = (raw - 0.5).clamp(0.0, (cart.n[k] - 1) as f64);
            let i = s.floor().min((cart.n[k].max(2) - 2) as f64);
            base[k] = i as i64;
            frac[k] = s - i;
        }
        let mut acc = Vector::zeros();
        let mut weight = 0.0;
        let corners = if dim == 1 { 2 } else { 4 };
        for corner in 0..corners {
            let off = [corner & 1, corner >> 1];
            let (i, j) = (base[0] as usize + off[0], if dim > 1 { base[1] as usize + off[1] } else { 0 });
            if i >= cart.n[0] || j >= cart.n[1] {
                continue;
            }
            let Some(c) = grid.active_index(cart.linear(i, j)) else { continue };
            let mut w = 1.0;
            for k in 0..dim {
                w *= if off[k] == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            acc += self.gradients[n][c] * w;
            weight += w;
        }
        if weight > 1e-12 {
            return acc / weight;
        }
        self.clamp_warning(x);
        let nearest = (0..grid.len())
            .min_by(|&a, &b| (grid.center(a) - x).norm_squared().total_cmp(&(grid.center(b) - x).norm_squared()))
            .expect("grid has active cells");
        self.gradients[n][nearest]
    }

    fn slice_at(&self, t: f64) -> usize {
        let n = (t / self.u.time.dt() + 1e-9).floor();
        (n.max(0.0) as usize).min(self.u.time.n_steps)
    }
}

impl VectorField for FeedbackDrift {
    fn eval(&self, t: f64, x: &Vector) -> Vector {
        let p = self.gradient(self.slice_at(t), x);
        let mut b = -self.model.gradient(t, x, &p);
        if let Some(a) = &self.correction {
            b -= a.divergence_drift(x);
        }
        b
    }
}

/// Writes a path file: header, then `(t, x, y)` float64 triplets per path and sample, then exit times.
pub fn write_paths(w: &mut impl Write, store: &PathStore) -> Result<()> {
    w.write_all(PATH_MAGIC)?;
    w.write_u32::<LittleEndian>(PATH_VERSION)?;
    w.write_u32::<LittleEndian>(store.dim as u32)?;
    w.write_u64::<LittleEndian>(store.n_paths() as u64)?;
    w.write_u64::<LittleEndian>(store.times.len() as u64)?;
    for p in 0..store.n_paths() {
        for (k, t) in store.times.iter().enumerate() {
            let x = store.position(p, k);
            for v in [*t, x[0], x[1]] {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
    }
    for t in &store.exit_times {
        w.write_f64::<LittleEndian>(*t)?;
    }
    Ok(())
}

pub fn read_paths(r: &mut impl Read) -> Result<PathStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PATH_MAGIC {
        return Err(Error::Format("not a path file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != PATH_VERSION {
        return Err(Error::Format(format!("unsupported path file version {version}")));
    }
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let n_paths = r.read_u64::<LittleEndian>()? as usize;
    let n_samples = r.read_u64::<LittleEndian>()? as usize;
    if !(1..=2).contains(&dim) {
        return Err(Error::Format(format!("bad dimension {dim}")));
    }
    let mut times = Vec::with_capacity(n_samples);
    let mut positions = Vec::with_capacity(n_paths * n_samples);
    for p in 0..n_paths {
        for _ in 0..n_samples {
            let t = r.read_f64::<LittleEndian>()?;
            let x = r.read_f64::<LittleEndian>()?;
            let y = r.read_f64::<LittleEndian>()?;
            if p == 0 {
                times.push(t);
            }
            positions.push(Vector::new(x, y));
        }
    }
    let exit_times = (0..n_paths).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
    Ok(PathStore { dim, times, positions, exit_times })
}
