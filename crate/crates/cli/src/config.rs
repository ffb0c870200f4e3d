//! Run configuration: JSON schema, validation and construction of solver inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use viable_mfg::mfg::{MfgConfig, MfgProblem};
use viable_mfg::models::{example1_hamiltonian, example2_hamiltonian, CouplingMode, RunningCost};
use viable_mfg::sde::SdeConfig;
use viable_mfg::{Coupling, DiffusionField, DomainSpec, HamiltonianModel, Vector, VectorField};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}, column {column}, at `{field}`: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, field: String, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(default)]
    pub seed: u64,
    pub domain: DomainBlock,
    pub diffusion: DiffusionBlock,
    pub hamiltonian: HamiltonianBlock,
    #[serde(default)]
    pub couplings: CouplingsBlock,
    #[serde(default)]
    pub initial_density: DensitySpec,
    /// Fixed drift `beta` of the state equation, used by `solve-fp` and `simulate-sde`.
    #[serde(default)]
    pub drift: DriftSpec,
    pub solver: MfgConfig,
    #[serde(default)]
    pub sde: SdeBlock,
    #[serde(default)]
    pub certify: CertifyBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainBlock {
    Interval { lo: f64, hi: f64, tube_width: f64 },
    Rectangle { lo: [f64; 2], hi: [f64; 2], tube_width: f64 },
    Disk { center: [f64; 2], radius: f64, tube_width: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionBlock {
    /// `a = value I`.
    Constant { value: f64 },
    /// `a = scale diag(x_k (1 - x_k))`.
    WrightFisher { scale: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianBlock {
    Zero,
    Quadratic,
    /// Bounded controls with quadratic running cost.
    BoundedControl { m: f64, radius: f64 },
    /// Cone controls with power running cost.
    ConeControl {
        m: f64,
        eta: f64,
        q: f64,
        #[serde(default = "default_true")]
        quadratic_guard: bool,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingsBlock {
    #[serde(default)]
    pub f: CouplingSpec,
    #[serde(default)]
    pub g: CouplingSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    #[serde(default = "no_coupling")]
    pub law: CouplingMode,
    #[serde(default)]
    pub profile: Option<ProfileSpec>,
}

fn no_coupling() -> CouplingMode {
    CouplingMode::None
}

impl Default for CouplingSpec {
    fn default() -> Self {
        Self { law: CouplingMode::None, profile: None }
    }
}

/// Density-independent part of a coupling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSpec {
    Constant { value: f64 },
    /// `scale |x - center|^2`.
    Quadratic { center: [f64; 2], scale: f64 },
    /// `coeffs . x + offset`.
    Linear { coeffs: [f64; 2], offset: f64 },
}

impl ProfileSpec {
    fn eval(&self, x: &Vector) -> f64 {
        match *self {
            ProfileSpec::Constant { value } => value,
            ProfileSpec::Quadratic { center, scale } => scale * (x - Vector::from(center)).norm_squared(),
            ProfileSpec::Linear { coeffs, offset } => Vector::from(coeffs).dot(x) + offset,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    Constant { value: f64 },
    /// `peak exp(-|x - center|^2 / (2 width^2))`.
    Gaussian { center: [f64; 2], width: f64, peak: f64 },
}

impl Default for DensitySpec {
    fn default() -> Self {
        DensitySpec::Constant { value: 1.0 }
    }
}

impl DensitySpec {
    pub fn eval(&self, x: &Vector) -> f64 {
        match *self {
            DensitySpec::Constant { value } => value,
            DensitySpec::Gaussian { center, width, peak } => {
                peak * (-(x - Vector::from(center)).norm_squared() / (2.0 * width * width)).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    #[default]
    Zero,
    Constant { value: [f64; 2] },
    /// `scale (1 - 2 x_k)` per active axis.
    WrightFisher { scale: f64 },
    /// `rate (target - x)`.
    Toward { target: [f64; 2], rate: f64 },
}

impl DriftSpec {
    pub fn field(self, dim: usize) -> impl VectorField {
        move |_: f64, x: &Vector| {
            let mut b = match self {
                DriftSpec::Zero => Vector::zeros(),
                DriftSpec::Constant { value } => Vector::from(value),
                DriftSpec::WrightFisher { scale } => Vector::new(1.0 - 2.0 * x[0], 1.0 - 2.0 * x[1]) * scale,
                DriftSpec::Toward { target, rate } => (Vector::from(target) - x) * rate,
            };
            if dim < 2 {
                b[1] = 0.0;
            }
            b
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeBlock {
    /// Step sizes to sweep, coarsest first.
    #[serde(default = "default_dts")]
    pub dt: Vec<f64>,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_substeps")]
    pub substep_limit: u32,
    #[serde(default)]
    pub store_samples: usize,
    /// Start point; paths are drawn from the initial density when absent.
    #[serde(default)]
    pub x0: Option<[f64; 2]>,
}

fn default_dts() -> Vec<f64> {
    vec![1e-2, 1e-3]
}
fn default_paths() -> usize {
    1000
}
fn default_substeps() -> u32 {
    10
}

impl Default for SdeBlock {
    fn default() -> Self {
        Self { dt: default_dts(), n_paths: default_paths(), substep_limit: default_substeps(), store_samples: 0, x0: None }
    }
}

impl SdeBlock {
    pub fn config(&self, dt: f64, seed: u64) -> SdeConfig {
        SdeConfig { dt, n_paths: self.n_paths, seed, substep_limit: self.substep_limit, store_samples: self.store_samples }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyBlock {
    /// Duality gap tolerance relative to `mass * sup|F| * T`.
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
    /// Amplitude of the random perturbation used as the second initial guess.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
}

fn default_gap_tol() -> f64 {
    1e-3
}
fn default_perturbation() -> f64 {
    0.5
}

impl Default for CertifyBlock {
    fn default() -> Self {
        Self { gap_tol: default_gap_tol(), perturbation: default_perturbation() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

/// Parsed configuration together with its raw bytes (hashed into the manifest).
pub struct LoadedConfig {
    pub config: RunConfig,
    pub raw: Vec<u8>,
    pub path: PathBuf,
}

pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let raw = std::fs::read(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    let config = parse(&raw).map_err(|e| match e {
        ConfigError::Parse { line, column, field, message, .. } => {
            ConfigError::Parse { path: path.to_path_buf(), line, column, field, message }
        }
        other => other,
    })?;
    Ok(LoadedConfig { config, raw, path: path.to_path_buf() })
}

pub fn parse(raw: &[u8]) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_slice(raw);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        ConfigError::Parse {
            path: PathBuf::new(),
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })?;
    config.validate()?;
    Ok(config)
}

fn finite(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("{v} is not finite")))
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

fn nonnegative(field: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be nonnegative and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("T", self.t_final)?;
        match &self.domain {
            DomainBlock::Interval { lo, hi, tube_width } => {
                finite("domain.lo", *lo)?;
                finite("domain.hi", *hi)?;
                positive("domain.tube_width", *tube_width)?;
            }
            DomainBlock::Rectangle { lo, hi, tube_width } => {
                for k in 0..2 {
                    finite("domain.lo", lo[k])?;
                    finite("domain.hi", hi[k])?;
                }
                positive("domain.tube_width", *tube_width)?;
            }
            DomainBlock::Disk { center, radius, tube_width } => {
                finite("domain.center", center[0])?;
                finite("domain.center", center[1])?;
                positive("domain.radius", *radius)?;
                positive("domain.tube_width", *tube_width)?;
            }
        }
        match self.diffusion {
            DiffusionBlock::Constant { value } => nonnegative("diffusion.value", value)?,
            DiffusionBlock::WrightFisher { scale } => nonnegative("diffusion.scale", scale)?,
        }
        match self.hamiltonian {
            HamiltonianBlock::BoundedControl { m, radius } => {
                nonnegative("hamiltonian.m", m)?;
                positive("hamiltonian.radius", radius)?;
            }
            HamiltonianBlock::ConeControl { m, eta, q, .. } => {
                nonnegative("hamiltonian.m", m)?;
                positive("hamiltonian.eta", eta)?;
                if !(q > 1.0 && q.is_finite()) {
                    return Err(invalid("hamiltonian.q", format!("must exceed 1, got {q}")));
                }
            }
            HamiltonianBlock::Zero | HamiltonianBlock::Quadratic => {}
        }
        for (name, spec) in [("couplings.f", &self.couplings.f), ("couplings.g", &self.couplings.g)] {
            validate_coupling(name, spec)?;
        }
        match self.initial_density {
            DensitySpec::Constant { value } => nonnegative("initial_density.value", value)?,
            DensitySpec::Gaussian { width, peak, .. } => {
                positive("initial_density.width", width)?;
                nonnegative("initial_density.peak", peak)?;
            }
        }
        let s = &self.solver;
        positive("solver.h", s.h)?;
        positive("solver.dt", s.dt)?;
        nonnegative("solver.eps_penalty", s.eps_penalty)?;
        nonnegative("solver.shrink_eps", s.shrink_eps)?;
        if !(s.theta > 0.0 && s.theta <= 1.0) {
            return Err(invalid("solver.theta", format!("must lie in (0, 1], got {}", s.theta)));
        }
        positive("solver.tol", s.tol)?;
        if s.max_iters == 0 {
            return Err(invalid("solver.max_iters", "must be at least 1"));
        }
        positive("solver.invariance_delta", s.invariance_delta)?;
        finite("solver.invariance_c", s.invariance_c)?;
        if self.sde.dt.is_empty() {
            return Err(invalid("sde.dt", "needs at least one step size"));
        }
        for &dt in &self.sde.dt {
            positive("sde.dt", dt)?;
        }
        if self.sde.n_paths == 0 {
            return Err(invalid("sde.n_paths", "must be at least 1"));
        }
        positive("certify.gap_tol", self.certify.gap_tol)?;
        if !(0.0..1.0).contains(&self.certify.perturbation) {
            return Err(invalid("certify.perturbation", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<DomainSpec, ConfigError> {
        let built = match self.domain {
            DomainBlock::Interval { lo, hi, tube_width } => DomainSpec::interval(lo, hi, tube_width),
            DomainBlock::Rectangle { lo, hi, tube_width } => {
                DomainSpec::rectangle(Vector::from(lo), Vector::from(hi), tube_width)
            }
            DomainBlock::Disk { center, radius, tube_width } => DomainSpec::disk(Vector::from(center), radius, tube_width),
        };
        built.map_err(|e| invalid("domain", e.to_string()))
    }

    pub fn diffusion(&self, dim: usize) -> DiffusionField {
        match self.diffusion {
            DiffusionBlock::Constant { value } => DiffusionField::constant(dim, value),
            DiffusionBlock::WrightFisher { scale } => DiffusionField::wright_fisher(dim, scale),
        }
    }

    pub fn hamiltonian(&self, domain: &DomainSpec) -> Result<HamiltonianModel, ConfigError> {
        let dim = domain.dim;
        let built = match self.hamiltonian {
            HamiltonianBlock::Zero => Ok(HamiltonianModel::zero(dim)),
            HamiltonianBlock::Quadratic => Ok(HamiltonianModel::quadratic(dim)),
            HamiltonianBlock::BoundedControl { m, radius } => {
                example1_hamiltonian(m, radius, RunningCost::Quadratic, domain)
            }
            HamiltonianBlock::ConeControl { m, eta, q, quadratic_guard } => {
                example2_hamiltonian(m, eta, q, 0.0, domain, quadratic_guard)
            }
        };
        built.map_err(|e| invalid("hamiltonian", e.to_string()))
    }

    /// Full problem; checks that the domain box is a whole number of cells.
    pub fn problem(&self) -> Result<MfgProblem, ConfigError> {
        let domain = self.domain()?;
        self.solver.fp().grid(&domain).map_err(|e| invalid("solver.h", e.to_string()))?;
        let a = self.diffusion(domain.dim);
        let model = self.hamiltonian(&domain)?;
        let f = coupling(&self.couplings.f, &domain);
        let g = coupling(&self.couplings.g, &domain);
        let m0 = self.initial_density;
        Ok(MfgProblem::new(domain, a, model, f, g, move |x| m0.eval(x), self.t_final))
    }
}

fn validate_coupling(name: &str, spec: &CouplingSpec) -> Result<(), ConfigError> {
    use viable_mfg::models::LocalCoupling;
    match spec.law {
        CouplingMode::None => {}
        CouplingMode::Local(LocalCoupling::Linear { strength }) => finite(&format!("{name}.law.strength"), strength)?,
        CouplingMode::Local(LocalCoupling::Saturating { strength, scale }) => {
            finite(&format!("{name}.law.strength"), strength)?;
            positive(&format!("{name}.law.scale"), scale)?;
        }
        CouplingMode::Convolution { strength, width } => {
            finite(&format!("{name}.law.strength"), strength)?;
            positive(&format!("{name}.law.width"), width)?;
        }
    }
    if let Some(p) = spec.profile {
        let values: Vec<f64> = match p {
            ProfileSpec::Constant { value } => vec![value],
            ProfileSpec::Quadratic { center, scale } => vec![center[0], center[1], scale],
            ProfileSpec::Linear { coeffs, offset } => vec![coeffs[0], coeffs[1], offset],
        };
        for v in values {
            finite(&format!("{name}.profile"), v)?;
        }
    }
    Ok(())
}

/// Coupling with its profile bound taken as the largest `|profile|` over the corners of the domain box.
fn coupling(spec: &CouplingSpec, domain: &DomainSpec) -> Coupling {
    let c = Coupling::new(spec.law);
    let Some(profile) = spec.profile else { return c };
    let corners = [
        domain.lo,
        domain.hi,
        Vector::new(domain.lo[0], domain.hi[1]),
        Vector::new(domain.hi[0], domain.lo[1]),
    ];
    // Each profile is convex or affine, so its modulus peaks at a corner of the box.
    let bound = corners.iter().map(|x| profile.eval(x).abs()).fold(0.0, f64::max);
    let lipschitz = match profile {
        ProfileSpec::Constant { .. } => 0.0,
        ProfileSpec::Quadratic { center, scale } => {
            2.0 * scale.abs() * corners.iter().map(|x| (x - Vector::from(center)).norm()).fold(0.0, f64::max)
        }
        ProfileSpec::Linear { coeffs, .. } => Vector::from(coeffs).norm(),
    };
    c.with_profile(move |x| profile.eval(x), bound).with_lipschitz(lipschitz)
}
