//! Value-function studies: amplitude sweeps `M̄(T)`, the minimal-time map,
//! the amplitude threshold, and the small-time obstruction experiment with
//! its adjoint witness.
//!
//! The value function `Π(T) = ½M̄(T)²` of the dual problem is non-increasing
//! in the horizon `T`; each sweep row carries a duality-gap certificate, so
//! monotonicity and the spectral lower bound
//! ```math
//! M̄(T) ≥ λ₁ (‖y_f − S_T y0‖ − ε) / (√(L|Ω|) (1 − e^{−λ₁T}))
//! ```
//! are checked only up to the certified gap.  The minimal-time map
//! `T*(Π₀) = inf{T : Π(T) ≤ Π₀}` is computed by bisection on a user-supplied
//! bracket and must agree with the sweep by the round-trip identity
//! `T*(Π(T)) = T` wherever `Π` is strictly decreasing.
//!
//! The obstruction experiment forbids control inside a ball containing the
//! target support.  At short horizons the restricted dual is unbounded below
//! (the certified infeasibility mode of [`minimize_dual`]); an explicit
//! adjoint witness — negative on the target support, nonnegative off the
//! forbidden ball along the whole backward trajectory — proves the continuum
//! value is `+∞` there.

use crate::bathtub::VolumeFraction;
use crate::dual::{minimize_dual, ControlProblem, DualError, DualReport, SolverOptions};
use crate::spectral::{
    semigroup_apply, to_modes, GridField, SpectralBasis, SpectralError, TimeGrid,
};
use ndarray::Array1;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StudiesError {
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("sweep needs at least 2 horizons (got {0})")]
    TooFewHorizons(usize),
    #[error("bracket [{lo}, {hi}] is invalid: need 0 < lo < hi")]
    BadBracket { lo: f64, hi: f64 },
    #[error(
        "bracket does not straddle the budget: Π({lo}) = {pi_lo} is already ≤ Π₀ = {target}"
    )]
    BracketBelowTarget { lo: f64, pi_lo: f64, target: f64 },
    #[error(
        "no finite minimal time in the bracket: Π({hi}) = {pi_hi} still exceeds Π₀ = {target}"
    )]
    NoFiniteMinimalTime { hi: f64, pi_hi: f64, target: f64 },
}

/// A steering instance parameterized by the horizon: everything the sweep
/// needs to rebuild a [`ControlProblem`] at each `T`.
#[derive(Debug, Clone)]
pub struct InstanceSpec {
    pub basis: SpectralBasis,
    pub l: VolumeFraction,
    pub y0: GridField,
    pub y_f: GridField,
    /// Absolute ε.
    pub eps: f64,
    /// Base time resolution (cells of the uniform part).
    pub m: usize,
    /// Geometric resolution of the graded terminal layer.
    pub points_per_decade: usize,
    /// Shape restriction shared by all horizons (obstruction study).
    pub allowed: Option<Vec<bool>>,
}

impl InstanceSpec {
    pub fn problem(&self, t: f64) -> Result<ControlProblem, StudiesError> {
        let tg = TimeGrid::graded(t, self.m, &self.basis, self.points_per_decade)?;
        let prob = ControlProblem::new(
            self.basis.clone(),
            tg,
            self.l,
            &self.y0,
            &self.y_f,
            self.eps,
        )?;
        Ok(match &self.allowed {
            Some(a) => prob.restricted(a.clone())?,
            None => prob,
        })
    }
}

/// Spectral lower bound on the amplitude: any admissible control reaching the
/// ε-ball of `y_f` at time `T` satisfies
/// `M̄ ≥ λ₁(‖d‖ − ε)/(√(L|Ω|)(1 − e^{−λ₁T}))` (first-mode comparison).
pub fn lower_bound(basis: &SpectralBasis, l: VolumeFraction, d_norm: f64, eps: f64, t: f64) -> f64 {
    let lam1 = basis.lambdas()[0];
    let budget = l.budget(basis.domain());
    (lam1 * (d_norm - eps).max(0.0)) / (budget.sqrt() * (1.0 - (-lam1 * t).exp()))
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub t: f64,
    /// `M̄(T) = H(p*)`.
    pub amplitude: f64,
    pub j_star: f64,
    /// Absolute duality gap of the feasible candidate (`None`: no feasible
    /// rescaling found).
    pub gap: Option<f64>,
    pub relative_gap: Option<f64>,
    pub residual_over_eps: f64,
    pub lower_bound: f64,
    /// `M̄ − lower_bound` (must be ≥ −1e−6 up to the certified gap).
    pub margin: f64,
    pub evals: usize,
    pub diverged: bool,
    pub under_resolved: bool,
}

/// Amplitude slack justified by the gap certificates of two adjacent rows:
/// `δΠ = g` translates into `δM ≈ g/M̄`.
fn gap_slack(a: &SweepRow, b: &SweepRow) -> f64 {
    let ga = a.gap.unwrap_or(0.0).abs();
    let gb = b.gap.unwrap_or(0.0).abs();
    let scale = a.amplitude.max(b.amplitude).max(1e-12);
    2.0 * (ga + gb) / scale
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Estimated saturation horizon: first `T` of three consecutive rows
    /// whose amplitudes agree within twice the certified gap slack.
    pub t_ell: Option<f64>,
    /// Amplitude threshold `μ₋ = min over converged rows of M̄(T)`.
    pub mu_minus: Option<f64>,
}

impl SweepTable {
    /// Largest violation of `M̄(T_{i+1}) ≤ M̄(T_i) + slack`; ≤ 0 means the
    /// sweep is non-increasing within the certificates.
    pub fn monotonicity_defect(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for w in self.rows.windows(2) {
            worst = worst.max(w[1].amplitude - w[0].amplitude - gap_slack(&w[0], &w[1]));
        }
        worst
    }

    /// Smallest lower-bound margin across rows.
    pub fn min_margin(&self) -> f64 {
        self.rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min)
    }
}

/// Sweeps the synthesized amplitude over horizons, warm-starting each dual
/// solve from the previous minimiser.
pub fn sweep_amplitude(
    spec: &InstanceSpec,
    ts: &[f64],
    opts: &SolverOptions,
) -> Result<SweepTable, StudiesError> {
    if ts.len() < 2 {
        return Err(StudiesError::TooFewHorizons(ts.len()));
    }
    let mut rows = Vec::with_capacity(ts.len());
    let mut warm: Option<Array1<f64>> = None;
    for &t in ts {
        let prob = spec.problem(t)?;
        let rep = minimize_dual(&prob, opts, warm.as_ref())?;
        let d_norm = prob.offset().dot(prob.offset()).sqrt();
        let bound = lower_bound(&spec.basis, spec.l, d_norm, spec.eps, t);
        rows.push(SweepRow {
            t,
            amplitude: rep.h_star,
            j_star: rep.j_star,
            gap: rep.gap,
            relative_gap: rep.relative_gap(),
            residual_over_eps: rep.residual / spec.eps,
            lower_bound: bound,
            margin: rep.h_star - bound,
            evals: rep.evals,
            diverged: rep.diverged,
            under_resolved: rep.under_resolved,
        });
        if !rep.diverged {
            warm = Some(rep.p_star);
        }
    }
    // Saturation horizon: three consecutive rows agreeing within slack.
    let mut t_ell = None;
    for i in 0..rows.len().saturating_sub(2) {
        let flat = (i..i + 2).all(|j| {
            (rows[j + 1].amplitude - rows[j].amplitude).abs()
                <= gap_slack(&rows[j], &rows[j + 1])
        });
        if flat {
            t_ell = Some(rows[i].t);
            break;
        }
    }
    let mu_minus = rows
        .iter()
        .filter(|r| !r.diverged && r.gap.is_some())
        .map(|r| r.amplitude)
        .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.min(m))));
    Ok(SweepTable { rows, t_ell, mu_minus })
}

/// Minimal horizon with `Π(T) = ½M̄(T)² ≤ pi_target`, by bisection on
/// `[t_lo, t_hi]`.  The bracket must straddle the budget, otherwise a
/// descriptive error is returned ("no finite minimal time" when even the
/// right endpoint is too expensive).
pub fn minimal_time(
    spec: &InstanceSpec,
    pi_target: f64,
    t_lo: f64,
    t_hi: f64,
    iters: usize,
    opts: &SolverOptions,
) -> Result<f64, StudiesError> {
    if !(t_lo > 0.0 && t_hi > t_lo) {
        return Err(StudiesError::BadBracket { lo: t_lo, hi: t_hi });
    }
    let pi_of = |t: f64, warm: Option<&Array1<f64>>| -> Result<(f64, DualReport), StudiesError> {
        let prob = spec.problem(t)?;
        let rep = minimize_dual(&prob, opts, warm)?;
        let pi = if rep.diverged { f64::INFINITY } else { 0.5 * rep.h_star * rep.h_star };
        Ok((pi, rep))
    };
    let (pi_lo, rep_lo) = pi_of(t_lo, None)?;
    if pi_lo <= pi_target {
        return Err(StudiesError::BracketBelowTarget { lo: t_lo, pi_lo, target: pi_target });
    }
    let (pi_hi, rep_hi) = pi_of(t_hi, Some(&rep_lo.p_star))?;
    if pi_hi > pi_target {
        return Err(StudiesError::NoFiniteMinimalTime { hi: t_hi, pi_hi, target: pi_target });
    }
    let mut lo = t_lo;
    let mut hi = t_hi;
    let mut warm = rep_hi.p_star;
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        let (pi_mid, rep) = pi_of(mid, Some(&warm))?;
        if pi_mid <= pi_target {
            hi = mid;
        } else {
            lo = mid;
        }
        if !rep.diverged {
            warm = rep.p_star;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone)]
pub struct ObstructionRow {
    pub t: f64,
    /// Best residual achievable over all candidate rays, relative to ε.
    pub best_residual_over_eps: f64,
    pub amplitude: f64,
    pub diverged: bool,
    pub j_final: f64,
}

#[derive(Debug, Clone)]
pub struct ObstructionTable {
    /// Restricted rows (control forbidden inside the ball), one per horizon.
    pub restricted: Vec<ObstructionRow>,
    /// The unrestricted solve at the largest horizon (control everywhere).
    pub unrestricted: ObstructionRow,
    pub unrestricted_gap: Option<f64>,
}

impl ObstructionTable {
    /// Restricting the admissible shapes can only worsen the best residual:
    /// the worst violation of `restricted ≥ unrestricted − 1e−10` (≤ 0 ok,
    /// compared at the shared largest horizon).
    pub fn restriction_defect(&self) -> f64 {
        self.restricted
            .iter()
            .filter(|r| r.t == self.unrestricted.t)
            .map(|r| self.unrestricted.best_residual_over_eps - r.best_residual_over_eps)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Runs the obstruction experiment: control forbidden inside the ball
/// `B(center, radius)` at each horizon in `ts`, plus one unrestricted solve
/// at the largest horizon.
pub fn obstruction_experiment(
    spec: &InstanceSpec,
    center: f64,
    radius: f64,
    ts: &[f64],
    opts: &SolverOptions,
) -> Result<ObstructionTable, StudiesError> {
    let domain = spec.basis.domain();
    let allowed: Vec<bool> = (0..domain.num_nodes())
        .map(|i| {
            let (x, _) = domain.node_position(i);
            (x - center).abs() >= radius
        })
        .collect();
    let restricted_spec = InstanceSpec { allowed: Some(allowed), ..spec.clone() };
    let mut restricted = Vec::with_capacity(ts.len());
    for &t in ts {
        let prob = restricted_spec.problem(t)?;
        let rep = minimize_dual(&prob, opts, None)?;
        restricted.push(ObstructionRow {
            t,
            best_residual_over_eps: rep.best_residual / spec.eps,
            amplitude: rep.h_star,
            diverged: rep.diverged,
            j_final: rep.j_star,
        });
    }
    let t_max = ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let free_spec = InstanceSpec { allowed: None, ..spec.clone() };
    let prob = free_spec.problem(t_max)?;
    let rep = minimize_dual(&prob, opts, None)?;
    let unrestricted = ObstructionRow {
        t: t_max,
        best_residual_over_eps: rep.best_residual / spec.eps,
        amplitude: rep.h_star,
        diverged: rep.diverged,
        j_final: rep.j_star,
    };
    Ok(ObstructionTable { restricted, unrestricted, unrestricted_gap: rep.gap })
}

/// Adjoint witness for the obstruction: `p_f = ξ·φ₁` with `ξ = −1` on the
/// target support `B(center, r_inner)`, `+1` off the forbidden ball
/// `B(center, r_ball)`, and a cosine blend between.
#[derive(Debug, Clone)]
pub struct WitnessReport {
    /// `⟨y_f, p_f⟩`; the witness requires it to be negative.
    pub pairing: f64,
    /// `min over t ∈ [0, T], x off the ball of (S_t p_f)(x)`.
    pub min_off_ball: f64,
    /// Both witness conditions hold at this horizon, so any control
    /// supported off the ball pairs nonnegatively with the adjoint while the
    /// target pairs negatively: the restricted value is `+∞`.
    pub certifies: bool,
    pub horizon: f64,
}

pub fn adjoint_witness(
    basis: &SpectralBasis,
    y_f: &GridField,
    center: f64,
    r_inner: f64,
    r_ball: f64,
    horizon: f64,
    time_samples: usize,
) -> Result<WitnessReport, StudiesError> {
    let domain = basis.domain();
    let cell = domain.cell_measure();
    let lam1 = basis.lambdas()[0];
    let len = domain.total_measure();
    let pf = GridField::from_fn(domain.clone(), |x, _| {
        let dist = (x - center).abs();
        let xi = if dist <= r_inner {
            -1.0
        } else if dist >= r_ball {
            1.0
        } else {
            -(std::f64::consts::PI * (dist - r_inner) / (r_ball - r_inner)).cos()
        };
        xi * (2.0 / len).sqrt() * ((lam1.sqrt()) * x).sin()
    })?;
    let pairing: f64 =
        y_f.values().iter().zip(pf.values()).map(|(a, b)| a * b).sum::<f64>() * cell;
    let pf_modes = to_modes(&pf, basis)?;
    let pf_norm = pf_modes.norm_l2();
    let mut min_off_ball = f64::INFINITY;
    for s_idx in 0..=time_samples {
        let s = horizon * s_idx as f64 / time_samples as f64;
        let q = crate::spectral::from_modes(&semigroup_apply(basis, s, &pf_modes)?, basis)?;
        for i in 0..domain.num_nodes() {
            let (x, _) = domain.node_position(i);
            if (x - center).abs() >= r_ball {
                min_off_ball = min_off_ball.min(q.values()[i]);
            }
        }
    }
    let certifies = pairing < 0.0 && min_off_ball >= -1e-10 * pf_norm;
    Ok(WitnessReport { pairing, min_off_ball, certifies, horizon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{build_basis, Domain, DEFAULT_POINTS_PER_DECADE};

    const PI: f64 = std::f64::consts::PI;

    fn bump(x: f64, c: f64, w: f64, height: f64) -> f64 {
        let t = (x - c) / w;
        if t.abs() < 1.0 {
            height * (1.0 - t * t).powi(2)
        } else {
            0.0
        }
    }

    fn small_spec() -> InstanceSpec {
        let domain = Domain::interval(1.0, 96).unwrap();
        let basis = build_basis(&domain, 24).unwrap();
        let y0 = GridField::zeros(domain.clone());
        let y_f = GridField::from_fn(domain.clone(), |x, _| bump(x, 0.5, 0.2, 1e-4)).unwrap();
        let eps = 0.1 * to_modes(&y_f, &basis).unwrap().norm_l2();
        InstanceSpec {
            basis,
            l: VolumeFraction::new(0.3).unwrap(),
            y0,
            y_f,
            eps,
            m: 48,
            points_per_decade: DEFAULT_POINTS_PER_DECADE,
            allowed: None,
        }
    }

    /// ℓ = 3 instance with an eigenmode target: strictly decreasing M̄(T).
    fn decreasing_spec() -> InstanceSpec {
        let domain = Domain::interval(3.0, 96).unwrap();
        let basis = build_basis(&domain, 24).unwrap();
        let y0 = GridField::zeros(domain.clone());
        let y_f = GridField::from_fn(domain.clone(), |x, _| (PI * x / 3.0).sin()).unwrap();
        let eps = 0.05 * to_modes(&y_f, &basis).unwrap().norm_l2();
        InstanceSpec {
            basis,
            l: VolumeFraction::new(0.3).unwrap(),
            y0,
            y_f,
            eps,
            m: 48,
            points_per_decade: DEFAULT_POINTS_PER_DECADE,
            allowed: None,
        }
    }

    #[test]
    fn lower_bound_formula_spot_check() {
        let spec = small_spec();
        // λ₁ = π², |Ω| = 1, L = 0.3.
        let b = lower_bound(&spec.basis, spec.l, 2.0, 0.5, 0.5);
        let want = PI * PI * 1.5 / ((0.3f64).sqrt() * (1.0 - (-PI * PI * 0.5).exp()));
        assert!((b - want).abs() < 1e-10 * want);
    }

    #[test]
    fn sweep_is_monotone_with_margins() {
        let spec = decreasing_spec();
        let table = sweep_amplitude(&spec, &[0.2, 0.4, 0.7], &SolverOptions::default()).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert!(table.monotonicity_defect() <= 0.0, "defect {}", table.monotonicity_defect());
        assert!(table.min_margin() >= -1e-6, "margin {}", table.min_margin());
        assert!(table.mu_minus.is_some());
        for w in table.rows.windows(2) {
            assert!(w[1].amplitude < w[0].amplitude, "not strictly decreasing");
        }
    }

    #[test]
    fn sweep_rejects_single_horizon() {
        let spec = small_spec();
        assert!(matches!(
            sweep_amplitude(&spec, &[0.5], &SolverOptions::default()),
            Err(StudiesError::TooFewHorizons(1))
        ));
    }

    #[test]
    fn minimal_time_round_trip() {
        let spec = decreasing_spec();
        let opts = SolverOptions::default();
        let t_ref = 0.4;
        let rep = minimize_dual(&spec.problem(t_ref).unwrap(), &opts, None).unwrap();
        let pi = 0.5 * rep.h_star * rep.h_star;
        let t_star = minimal_time(&spec, pi, 0.2, 0.7, 10, &opts).unwrap();
        assert!(
            (t_star - t_ref).abs() <= 1e-2 * t_ref,
            "round trip failed: T* = {t_star} for T = {t_ref}"
        );
    }

    #[test]
    fn minimal_time_bracket_errors() {
        let spec = decreasing_spec();
        let opts = SolverOptions::default();
        // Huge budget: already satisfied at the left endpoint.
        let err = minimal_time(&spec, 1e6, 0.2, 0.7, 4, &opts).unwrap_err();
        assert!(matches!(err, StudiesError::BracketBelowTarget { .. }));
        // Tiny budget: unattainable within the bracket.
        let err = minimal_time(&spec, 1e-9, 0.2, 0.7, 4, &opts).unwrap_err();
        assert!(err.to_string().contains("no finite minimal time"));
        let err = minimal_time(&spec, 1.0, 0.7, 0.2, 4, &opts).unwrap_err();
        assert!(matches!(err, StudiesError::BadBracket { .. }));
    }

    #[test]
    fn obstruction_short_horizon_diverges_long_horizon_succeeds() {
        let domain = Domain::interval(1.0, 96).unwrap();
        let basis = build_basis(&domain, 24).unwrap();
        let y0 = GridField::zeros(domain.clone());
        let y_f = GridField::from_fn(domain.clone(), |x, _| bump(x, 0.5, 0.11, 1.0)).unwrap();
        let eps = 0.05 * to_modes(&y_f, &basis).unwrap().norm_l2();
        let spec = InstanceSpec {
            basis,
            l: VolumeFraction::new(0.3).unwrap(),
            y0,
            y_f,
            eps,
            m: 48,
            points_per_decade: DEFAULT_POINTS_PER_DECADE,
            allowed: None,
        };
        let table = obstruction_experiment(&spec, 0.5, 0.15, &[0.01, 0.05], &SolverOptions::default())
            .unwrap();
        // Short restricted horizon: infeasible, dual diverges, residual stuck
        // far above ε.
        assert!(table.restricted[0].diverged);
        assert!(table.restricted[0].best_residual_over_eps > 1.0);
        // Unrestricted solve at the long horizon succeeds.
        assert!(!table.unrestricted.diverged);
        assert!(table.unrestricted_gap.is_some());
        assert!(table.restriction_defect() <= 1e-10);
    }

    #[test]
    fn witness_certifies_small_horizons_only() {
        let domain = Domain::interval(1.0, 256).unwrap();
        let basis = build_basis(&domain, 64).unwrap();
        let y_f = GridField::from_fn(domain.clone(), |x, _| bump(x, 0.5, 0.11, 1.0)).unwrap();
        let w_small = adjoint_witness(&basis, &y_f, 0.5, 0.11, 0.15, 0.01, 32).unwrap();
        assert!(w_small.pairing < 0.0);
        assert!(w_small.certifies, "min off ball {}", w_small.min_off_ball);
        let w_large = adjoint_witness(&basis, &y_f, 0.5, 0.11, 0.15, 0.05, 32).unwrap();
        assert!(
            !w_large.certifies,
            "witness should lose positivity by T = 0.05 (min {})",
            w_large.min_off_ball
        );
    }
}
