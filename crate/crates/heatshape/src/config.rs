//! Run configuration: parsing, validation, and instantiation.
//!
//! Configs are TOML documents with nested sections (runs have ~20
//! parameters, so a structured file beats positional flags).  Unknown keys
//! are rejected, every validation error names the offending key and its
//! accepted range, and the configuration hash (SHA-256 of the canonical
//! serialization) is stamped into every artifact so results can be traced
//! back to their inputs.

use crate::bathtub::VolumeFraction;
use crate::dual::{ControlProblem, Optimizer, SolverOptions};
use crate::spectral::{
    build_basis, from_modes, to_modes, Domain, GridField, SpectralBasis, TimeGrid,
    DEFAULT_POINTS_PER_DECADE,
};
use crate::studies::InstanceSpec;
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read sampled-values file {path}: {source}")]
    FieldFile { path: PathBuf, source: std::io::Error },
    #[error("sampled-values file {path} holds {got} values but the grid has {want} nodes")]
    FieldFileLength { path: PathBuf, got: usize, want: usize },
    #[error(transparent)]
    Spectral(#[from] crate::spectral::SpectralError),
    #[error(transparent)]
    Dual(#[from] crate::dual::DualError),
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

/// Domain section: interval `(0, length)` or rectangle `(0, lx) × (0, ly)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct DomainConfig {
    #[serde(default)]
    pub length: Option<f64>,
    #[serde(default)]
    pub lx: Option<f64>,
    #[serde(default)]
    pub ly: Option<f64>,
}

/// Spatial/spectral/temporal resolutions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct DiscretizationConfig {
    /// Interior grid nodes per axis (n ≥ 8).
    pub grid: usize,
    /// Retained eigenmodes per axis (4 ≤ K ≤ n/2).
    pub modes: usize,
    /// Base time cells (m ≥ 16); the graded terminal layer is added on top.
    pub time_cells: usize,
    /// Geometric resolution of the graded layer.
    #[serde(default = "default_ppd")]
    pub points_per_decade: usize,
}

fn default_ppd() -> usize {
    DEFAULT_POINTS_PER_DECADE
}

/// How the `epsilon` number is interpreted.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonMode {
    /// ε is the given number.
    Absolute,
    /// ε = number · ‖y_f‖ (spectral L² norm of the projected target).
    #[default]
    RelativeToTarget,
}

/// Named analytic profiles for states.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "profile", deny_unknown_fields, rename_all = "kebab-case")]
pub enum Profile {
    /// The zero state.
    Zero,
    /// `amplitude · φ_index` (1-based eigenvalue-sorted index).
    Eigenmode {
        index: usize,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `height · (1 − ((x − center)/width)²)₊²` (C¹, compact support).
    Bump { center: f64, width: f64, height: f64 },
    /// `height · (e^{−((x−center)/sigma)²/2} − e^{−9/2})₊`: a Gaussian
    /// clipped to zero outside 3σ (continuous, compact support).
    ClippedGaussian { center: f64, sigma: f64, height: f64 },
    /// Sampled values at the interior grid nodes, one per line (row-major
    /// for rectangles).
    File { path: PathBuf },
}

fn one() -> f64 {
    1.0
}

/// Problem section: target ball and constraint set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ProblemConfig {
    /// Single horizon T (synth/obstruct).
    #[serde(default)]
    pub horizon: Option<f64>,
    /// Horizon list (sweep; also the obstruct experiment horizons).
    #[serde(default)]
    pub horizons: Option<Vec<f64>>,
    pub epsilon: f64,
    #[serde(default)]
    pub epsilon_mode: EpsilonMode,
    /// Volume fraction L ∈ (0,1).
    pub volume_fraction: f64,
    #[serde(default = "zero_profile")]
    pub initial_state: Profile,
    pub target_state: Profile,
}

fn zero_profile() -> Profile {
    Profile::Zero
}

/// Solver section (all optional; defaults match [`SolverOptions`]).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SolverConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol_j")]
    pub tol_j: f64,
    #[serde(default = "default_tol_feas")]
    pub tol_feas: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_plateau_iters")]
    pub plateau_iters: usize,
}

fn default_optimizer() -> String {
    "lbfgs".to_string()
}
fn default_max_iters() -> usize {
    SolverOptions::default().max_iters
}
fn default_tol_j() -> f64 {
    SolverOptions::default().tol_j
}
fn default_tol_feas() -> f64 {
    SolverOptions::default().tol_feas
}
fn default_patience() -> usize {
    SolverOptions::default().patience
}
fn default_restarts() -> usize {
    SolverOptions::default().restarts
}
fn default_plateau_iters() -> usize {
    SolverOptions::default().plateau_iters
}

impl Default for SolverConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty solver section is valid")
    }
}

/// Minimal-time study parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct MinTimeConfig {
    /// Control budget Π₀ = ½M²; the study finds inf{T : Π(T) ≤ Π₀}.
    pub pi_target: f64,
    pub bracket_lo: f64,
    pub bracket_hi: f64,
    #[serde(default = "default_bisections")]
    pub bisections: usize,
}

fn default_bisections() -> usize {
    12
}

/// Obstruction study parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ObstructConfig {
    pub ball_center: f64,
    pub ball_radius: f64,
    /// Inner radius of the witness sign pattern (target support radius).
    pub witness_inner_radius: f64,
    /// Time samples of the witness positivity scan.
    #[serde(default = "default_witness_samples")]
    pub witness_samples: usize,
}

fn default_witness_samples() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct StudyConfig {
    #[serde(default)]
    pub mintime: Option<MinTimeConfig>,
    #[serde(default)]
    pub obstruct: Option<ObstructConfig>,
}

/// The complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub domain: DomainConfig,
    pub discretization: DiscretizationConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub study: StudyConfig,
    /// Output directory (also settable via `--out`).
    #[serde(default)]
    pub outdir: Option<PathBuf>,
    /// Seed for test-direction sampling only (selftest subcommand).
    #[serde(default)]
    pub seed: u64,
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let cfg: RunConfig = toml::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.domain;
        match (d.length, d.lx, d.ly) {
            (Some(l), None, None) if l > 0.0 => {}
            (None, Some(lx), Some(ly)) if lx > 0.0 && ly > 0.0 => {}
            (Some(l), None, None) => {
                return Err(invalid("domain.length", format!("must be positive (got {l})")))
            }
            _ => {
                return Err(invalid(
                    "domain",
                    "set either `length` (interval) or both `lx` and `ly` (rectangle), positive",
                ))
            }
        }
        let disc = &self.discretization;
        if disc.grid < 8 {
            return Err(invalid("discretization.grid", format!("must be ≥ 8 (got {})", disc.grid)));
        }
        if disc.modes < 4 || disc.modes > disc.grid / 2 {
            return Err(invalid(
                "discretization.modes",
                format!("must lie in [4, grid/2] = [4, {}] (got {})", disc.grid / 2, disc.modes),
            ));
        }
        if disc.time_cells < 16 {
            return Err(invalid(
                "discretization.time-cells",
                format!("must be ≥ 16 (got {})", disc.time_cells),
            ));
        }
        if disc.points_per_decade == 0 {
            return Err(invalid("discretization.points-per-decade", "must be ≥ 1"));
        }
        let p = &self.problem;
        if let Err(e) = VolumeFraction::new(p.volume_fraction) {
            return Err(invalid("problem.volume-fraction", e.to_string()));
        }
        if !(p.epsilon > 0.0) {
            return Err(invalid(
                "problem.epsilon",
                format!(
                    "must be positive (got {}); exact controllability (ε = 0) is out of scope",
                    p.epsilon
                ),
            ));
        }
        match (&p.horizon, &p.horizons) {
            (None, None) => {
                return Err(invalid("problem.horizon", "set `horizon` or `horizons`"))
            }
            (Some(t), _) if *t <= 0.0 => {
                return Err(invalid("problem.horizon", format!("must be positive (got {t})")))
            }
            (_, Some(ts)) => {
                if ts.is_empty() {
                    return Err(invalid("problem.horizons", "must be non-empty"));
                }
                if let Some(t) = ts.iter().find(|t| **t <= 0.0) {
                    return Err(invalid(
                        "problem.horizons",
                        format!("all horizons must be positive (got {t})"),
                    ));
                }
            }
            _ => {}
        }
        for (key, prof) in
            [("problem.initial-state", &p.initial_state), ("problem.target-state", &p.target_state)]
        {
            match prof {
                Profile::Eigenmode { index, .. } => {
                    if *index == 0 {
                        return Err(invalid(key, "eigenmode index is 1-based (got 0)"));
                    }
                    let max = match (d.length, d.lx) {
                        (Some(_), _) => disc.modes,
                        _ => disc.modes * disc.modes,
                    };
                    if *index > max {
                        return Err(invalid(
                            key,
                            format!("eigenmode index {index} exceeds the {max} retained modes"),
                        ));
                    }
                }
                Profile::Bump { width, .. } if *width <= 0.0 => {
                    return Err(invalid(key, format!("bump width must be positive (got {width})")))
                }
                Profile::ClippedGaussian { sigma, .. } if *sigma <= 0.0 => {
                    return Err(invalid(key, format!("sigma must be positive (got {sigma})")))
                }
                _ => {}
            }
        }
        let s = &self.solver;
        match s.optimizer.as_str() {
            "lbfgs" | "subgradient" => {}
            other => {
                return Err(invalid(
                    "solver.optimizer",
                    format!("must be \"lbfgs\" or \"subgradient\" (got \"{other}\")"),
                ))
            }
        }
        if let Some(mt) = &self.study.mintime {
            if !(mt.bracket_lo > 0.0 && mt.bracket_hi > mt.bracket_lo) {
                return Err(invalid(
                    "study.mintime",
                    format!(
                        "need 0 < bracket-lo < bracket-hi (got [{}, {}])",
                        mt.bracket_lo, mt.bracket_hi
                    ),
                ));
            }
            if !(mt.pi_target > 0.0) {
                return Err(invalid("study.mintime.pi-target", "must be positive"));
            }
        }
        if let Some(ob) = &self.study.obstruct {
            if !(ob.ball_radius > 0.0 && ob.witness_inner_radius > 0.0) {
                return Err(invalid("study.obstruct", "radii must be positive"));
            }
            if ob.witness_inner_radius >= ob.ball_radius {
                return Err(invalid(
                    "study.obstruct.witness-inner-radius",
                    "must be smaller than ball-radius",
                ));
            }
        }
        Ok(())
    }

    pub fn domain_obj(&self) -> Result<Domain, ConfigError> {
        let d = &self.domain;
        Ok(match (d.length, d.lx, d.ly) {
            (Some(l), None, None) => Domain::interval(l, self.discretization.grid)?,
            (None, Some(lx), Some(ly)) => Domain::rectangle(lx, ly, self.discretization.grid)?,
            _ => unreachable!("validated"),
        })
    }

    pub fn basis(&self) -> Result<SpectralBasis, ConfigError> {
        Ok(build_basis(&self.domain_obj()?, self.discretization.modes)?)
    }

    /// Evaluates a profile on the grid (projection-free; eigenmodes come from
    /// the basis directly).
    pub fn build_field(
        &self,
        profile: &Profile,
        basis: &SpectralBasis,
    ) -> Result<GridField, ConfigError> {
        let domain = basis.domain().clone();
        Ok(match profile {
            Profile::Zero => GridField::zeros(domain),
            Profile::Eigenmode { index, amplitude } => {
                let mut coeffs = Array1::zeros(basis.num_modes());
                coeffs[*index - 1] = *amplitude;
                from_modes(
                    &crate::spectral::ModeVector::from_coeffs(basis, coeffs)?,
                    basis,
                )?
            }
            Profile::Bump { center, width, height } => {
                GridField::from_fn(domain, |x, _| {
                    let t = (x - center) / width;
                    if t.abs() < 1.0 {
                        height * (1.0 - t * t).powi(2)
                    } else {
                        0.0
                    }
                })?
            }
            Profile::ClippedGaussian { center, sigma, height } => {
                let cut = (-4.5f64).exp();
                GridField::from_fn(domain, |x, _| {
                    let t = (x - center) / sigma;
                    height * ((-0.5 * t * t).exp() - cut).max(0.0)
                })?
            }
            Profile::File { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|source| ConfigError::FieldFile { path: path.clone(), source })?;
                let vals: Vec<f64> = text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .map(|l| {
                        l.parse::<f64>().map_err(|e| {
                            invalid("field file", format!("bad number {l:?}: {e}"))
                        })
                    })
                    .collect::<Result<_, _>>()?;
                if vals.len() != domain.num_nodes() {
                    return Err(ConfigError::FieldFileLength {
                        path: path.clone(),
                        got: vals.len(),
                        want: domain.num_nodes(),
                    });
                }
                GridField::new(domain, Array1::from(vals))?
            }
        })
    }

    /// Absolute ε for the given target.
    pub fn epsilon_abs(&self, y_f: &GridField, basis: &SpectralBasis) -> Result<f64, ConfigError> {
        Ok(match self.problem.epsilon_mode {
            EpsilonMode::Absolute => self.problem.epsilon,
            EpsilonMode::RelativeToTarget => {
                self.problem.epsilon * to_modes(y_f, basis)?.norm_l2()
            }
        })
    }

    pub fn solver_options(&self) -> SolverOptions {
        let s = &self.solver;
        SolverOptions {
            optimizer: match s.optimizer.as_str() {
                "subgradient" => Optimizer::Subgradient,
                _ => Optimizer::Lbfgs,
            },
            max_iters: s.max_iters,
            tol_j: s.tol_j,
            tol_feas: s.tol_feas,
            patience: s.patience,
            restarts: s.restarts,
            history: SolverOptions::default().history,
            plateau_iters: s.plateau_iters,
        }
    }

    /// Builds the horizon-parameterized instance used by the studies.
    pub fn instance(&self) -> Result<InstanceSpec, ConfigError> {
        let basis = self.basis()?;
        let y0 = self.build_field(&self.problem.initial_state, &basis)?;
        let y_f = self.build_field(&self.problem.target_state, &basis)?;
        let eps = self.epsilon_abs(&y_f, &basis)?;
        Ok(InstanceSpec {
            l: VolumeFraction::new(self.problem.volume_fraction)
                .expect("validated volume fraction"),
            basis,
            y0,
            y_f,
            eps,
            m: self.discretization.time_cells,
            points_per_decade: self.discretization.points_per_decade,
            allowed: None,
        })
    }

    /// Builds the single-horizon control problem (synth subcommand).
    pub fn control_problem(&self) -> Result<ControlProblem, ConfigError> {
        let t = self.single_horizon()?;
        let spec = self.instance()?;
        let basis = spec.basis.clone();
        let tg = TimeGrid::graded(t, spec.m, &basis, spec.points_per_decade)?;
        Ok(ControlProblem::new(basis, tg, spec.l, &spec.y0, &spec.y_f, spec.eps)?)
    }

    pub fn single_horizon(&self) -> Result<f64, ConfigError> {
        self.problem
            .horizon
            .or_else(|| self.problem.horizons.as_ref().and_then(|ts| ts.first().copied()))
            .ok_or_else(|| invalid("problem.horizon", "a horizon is required"))
    }

    pub fn sweep_horizons(&self) -> Result<Vec<f64>, ConfigError> {
        match &self.problem.horizons {
            Some(ts) => Ok(ts.clone()),
            None => Err(invalid("problem.horizons", "a horizon list is required for this study")),
        }
    }

    /// SHA-256 of the canonical serialized config (stamped into artifacts).
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
