//! Desk-scale acceptance gate (n = 256, K = 64, m = 128).
//!
//! Prints exactly one `PASS`/`FAIL` line per primary criterion, then asserts
//! that all nine passed.

use heatshape::bathtub::VolumeFraction;
use heatshape::dual::{minimize_dual, SolverOptions};
use heatshape::report::{control_snapshot_rows, fmt_f64};
use heatshape::selftest::{bathtub_oracle_suite, fenchel_suite, semigroup_suite};
use heatshape::spectral::{build_basis, Domain, GridField, DEFAULT_POINTS_PER_DECADE};
use heatshape::studies::{
    adjoint_witness, minimal_time, obstruction_experiment, sweep_amplitude, InstanceSpec,
};
use heatshape::synth::{extract_control, verify};
use std::time::Instant;

const SEED: u64 = 7;
const GRID: usize = 256;
const MODES: usize = 64;
const TIME_CELLS: usize = 128;

struct Recorder {
    failures: Vec<String>,
}

impl Recorder {
    fn new() -> Self {
        Self { failures: Vec::new() }
    }

    fn criterion(&mut self, number: usize, title: &str, passed: bool, detail: String) {
        let verdict = if passed { "PASS" } else { "FAIL" };
        println!("criterion {number} [{verdict}] {title}: {detail}");
        if !passed {
            self.failures.push(format!("criterion {number} ({title}): {detail}"));
        }
    }
}

fn bump(center: f64, width: f64, height: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, _| {
        let t = (x - center) / width;
        let s = (1.0 - t * t).max(0.0);
        height * s * s
    }
}

/// Criterion-4 instance: unit interval, zero initial state, nonnegative bump
/// target, ε = 0.1‖y_f‖, L = 0.3.
fn bump_instance() -> InstanceSpec {
    let domain = Domain::interval(1.0, GRID).unwrap();
    let basis = build_basis(&domain, MODES).unwrap();
    let y_f = GridField::from_fn(domain.clone(), bump(0.5, 0.25, 1e-4)).unwrap();
    let eps = 0.1 * y_f.norm_l2();
    InstanceSpec {
        basis,
        l: VolumeFraction::new(0.3).unwrap(),
        y0: GridField::zeros(domain),
        y_f,
        eps,
        m: TIME_CELLS,
        points_per_decade: DEFAULT_POINTS_PER_DECADE,
        allowed: None,
    }
}

/// Criterion-6/7 instance: first Dirichlet eigenmode shape on (0, 3),
/// ε = 0.05‖y_f‖, L = 0.3.
fn sine_instance() -> InstanceSpec {
    let domain = Domain::interval(3.0, GRID).unwrap();
    let basis = build_basis(&domain, MODES).unwrap();
    let y_f =
        GridField::from_fn(domain.clone(), |x, _| (std::f64::consts::PI * x / 3.0).sin()).unwrap();
    let eps = 0.05 * y_f.norm_l2();
    InstanceSpec {
        basis,
        l: VolumeFraction::new(0.3).unwrap(),
        y0: GridField::zeros(domain),
        y_f,
        eps,
        m: TIME_CELLS,
        points_per_decade: DEFAULT_POINTS_PER_DECADE,
        allowed: None,
    }
}

/// Criterion-8 instance: bump target supported in B(0.5, 0.15) on the unit
/// interval, ε = 0.05‖y_f‖.
fn obstruction_instance() -> InstanceSpec {
    let domain = Domain::interval(1.0, GRID).unwrap();
    let basis = build_basis(&domain, MODES).unwrap();
    let y_f = GridField::from_fn(domain.clone(), bump(0.5, 0.11, 1.0)).unwrap();
    let eps = 0.05 * y_f.norm_l2();
    InstanceSpec {
        basis,
        l: VolumeFraction::new(0.3).unwrap(),
        y0: GridField::zeros(domain),
        y_f,
        eps,
        m: TIME_CELLS,
        points_per_decade: DEFAULT_POINTS_PER_DECADE,
        allowed: None,
    }
}

#[test]
fn acceptance_criteria() {
    let mut rec = Recorder::new();
    let opts = SolverOptions::default();

    // Criterion 1: bathtub oracle equivalence over 1000 random fields.
    let t0 = Instant::now();
    let bathtub = bathtub_oracle_suite(SEED, 1000);
    let bathtub_secs = t0.elapsed().as_secs_f64();
    rec.criterion(
        1,
        "bathtub oracle equivalence",
        bathtub.passed() && bathtub_secs < 5.0,
        format!(
            "{} checks, worst {:e}, {:.2}s (< 5s)",
            bathtub.checks.len(),
            bathtub.checks.iter().map(|c| c.worst).fold(0.0f64, f64::max),
            bathtub_secs
        ),
    );

    // Shared criterion-4 solve (also feeds criteria 2, 5 and 9).
    let spec4 = bump_instance();
    let prob4 = spec4.problem(0.5).unwrap();
    let t0 = Instant::now();
    let rep4 = minimize_dual(&prob4, &opts, None).unwrap();
    let solve4_secs = t0.elapsed().as_secs_f64();
    let synth4 = extract_control(&prob4, &rep4).unwrap();
    let ver4 = verify(&prob4, &synth4, &rep4).unwrap();

    // Criterion 2: Fenchel identity suite + primal-dual equality on the
    // converged criterion-4 run.
    let fenchel = fenchel_suite(SEED, &prob4, 100);
    rec.criterion(
        2,
        "Fenchel identity suite",
        fenchel.passed() && rep4.converged && ver4.fenchel_defect <= 1e-6,
        format!(
            "homogeneity/subgradient worst {:e}; F(u*)+F*(L_T*p*)=<u*,L_T*p*> defect {:e} (<= 1e-6)",
            fenchel.checks.iter().map(|c| c.worst).fold(0.0f64, f64::max),
            ver4.fenchel_defect
        ),
    );

    // Criterion 3: semigroup exactness.
    let semi = semigroup_suite(SEED);
    rec.criterion(
        3,
        "semigroup exactness",
        semi.passed(),
        format!(
            "decay/law/duhamel worst {:e}",
            semi.checks.iter().map(|c| c.worst).fold(0.0f64, f64::max)
        ),
    );

    // Criterion 4: end-to-end synthesis on the bump instance.
    let cell = prob4.basis().domain().cell_measure();
    let relgap = rep4.relative_gap();
    let control_min = synth4
        .control
        .fields()
        .iter()
        .map(|f| f.min_value())
        .fold(f64::INFINITY, f64::min);
    let gap_ok = relgap.is_some_and(|g| g <= 1e-3);
    let res_ok = (0.95..=1.001).contains(&ver4.residual_over_eps);
    let nonneg_ok = control_min >= 0.0;
    let bang_ok = ver4.bang_bang_defect <= 1e-9 * (1.0 + synth4.amplitude);
    let plateau_ok = ver4.max_plateau_nodes <= 2;
    let volume_ok = ver4.volume_excess <= cell + 1e-12;
    rec.criterion(
        4,
        "end-to-end synthesis",
        gap_ok && res_ok && nonneg_ok && bang_ok && plateau_ok && volume_ok
            && solve4_secs < 30.0,
        format!(
            "relgap {:?}, residual/eps {}, min u {}, bang-bang defect {:e}, \
             max plateau nodes {}, volume excess {:e} (cell {:e}), solve {:.2}s",
            relgap,
            ver4.residual_over_eps,
            control_min,
            ver4.bang_bang_defect,
            ver4.max_plateau_nodes,
            ver4.volume_excess,
            cell,
            solve4_secs
        ),
    );

    // Criterion 5: comparison certificate min_{t,x} y(t) >= -1e-8 (y0 = 0).
    rec.criterion(
        5,
        "comparison certificate",
        ver4.min_state >= -1e-8,
        format!("min state {:e} (>= -1e-8)", ver4.min_state),
    );

    // Criterion 6: value-function sweep over 8 horizons.
    let spec6 = sine_instance();
    let ts = [0.05, 0.1, 0.2, 0.4, 0.7, 1.0, 1.3, 1.6];
    let table = sweep_amplitude(&spec6, &ts, &opts).unwrap();
    let mono_ok = table.monotonicity_defect() <= 0.0;
    let margin_ok = table.min_margin() >= -1e-6;
    let blowup_constant = (table.rows[0].amplitude * table.rows[0].t)
        .min(table.rows[1].amplitude * table.rows[1].t);
    rec.criterion(
        6,
        "value-function suite",
        mono_ok && margin_ok && blowup_constant > 0.0,
        format!(
            "monotonicity defect {:e} (<= 0), min bound margin {:e} (>= -1e-6), \
             M(T)*T >= {} on the two smallest T",
            table.monotonicity_defect(),
            table.min_margin(),
            blowup_constant
        ),
    );

    // Criterion 7: minimal-time round trip at three decreasing-region points.
    let round_trips = [(2usize, 0.1, 0.4), (3, 0.2, 0.7), (4, 0.4, 1.0)];
    let mut worst_rel = 0.0f64;
    let mut all_ok = true;
    let mut details = Vec::new();
    for (idx, lo, hi) in round_trips {
        let t = table.rows[idx].t;
        let pi = 0.5 * table.rows[idx].amplitude.powi(2);
        match minimal_time(&spec6, pi, lo, hi, 12, &opts) {
            Ok(t_star) => {
                let rel = (t_star - t).abs() / t;
                worst_rel = worst_rel.max(rel);
                all_ok &= rel <= 1e-2;
                details.push(format!("T={t}: T*={} (rel err {:e})", fmt_f64(t_star), rel));
            }
            Err(e) => {
                all_ok = false;
                details.push(format!("T={t}: {e}"));
            }
        }
    }
    rec.criterion(
        7,
        "minimal-time round trip",
        all_ok,
        format!("worst relative error {:e} (<= 1e-2); {}", worst_rel, details.join("; ")),
    );

    // Criterion 8: obstruction experiment and adjoint witness.
    let spec8 = obstruction_instance();
    let ts8 = [0.01, 0.02, 0.05];
    let obt = obstruction_experiment(&spec8, 0.5, 0.15, &ts8, &opts).unwrap();
    let restricted_ok = obt.restricted.iter().all(|r| r.best_residual_over_eps > 1.0);
    let unrestricted_ok = !obt.unrestricted.diverged && obt.unrestricted_gap.is_some();
    let witness =
        adjoint_witness(&spec8.basis, &spec8.y_f, 0.5, 0.11, 0.15, 0.01, 32).unwrap();
    rec.criterion(
        8,
        "obstruction experiment",
        restricted_ok && unrestricted_ok && witness.pairing < 0.0 && witness.certifies,
        format!(
            "restricted residual/eps {:?} (> 1), unrestricted T=0.05 certified, \
             witness pairing {} (< 0), certifies at T=0.01: {}",
            obt.restricted.iter().map(|r| r.best_residual_over_eps).collect::<Vec<_>>(),
            witness.pairing,
            witness.certifies
        ),
    );

    // Criterion 9: repeating criterion 4 yields byte-identical tables.
    let spec9 = bump_instance();
    let prob9 = spec9.problem(0.5).unwrap();
    let rep9 = minimize_dual(&prob9, &opts, None).unwrap();
    let synth9 = extract_control(&prob9, &rep9).unwrap();
    let table_a = control_snapshot_rows(&synth4);
    let table_b = control_snapshot_rows(&synth9);
    let scalars_ok = fmt_f64(rep4.j_star) == fmt_f64(rep9.j_star)
        && fmt_f64(synth4.amplitude) == fmt_f64(synth9.amplitude);
    rec.criterion(
        9,
        "determinism",
        table_a == table_b && scalars_ok,
        format!(
            "control snapshot tables identical: {}, J*/amplitude strings identical: {}",
            table_a == table_b,
            scalars_ok
        ),
    );

    assert!(
        rec.failures.is_empty(),
        "acceptance failures:\n{}",
        rec.failures.join("\n")
    );
}
