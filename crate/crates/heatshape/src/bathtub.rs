//! The (relaxed) bathtub principle: support function of the constraint set
//! `Ū_L = { u : 0 ≤ u ≤ 1, ∫_Ω u ≤ L|Ω| }`.
//!
//! For a field `v` the support function is
//! ```math
//! σ(v) = sup { ⟨u, v⟩ : u ∈ Ū_L } = ∫₀^{min(Φ_v(0), L|Ω|)} Φ_v^{−1}(s) ds,
//! ```
//! where `Φ_v(t) = |{v > t}|` is the distribution function.  A maximiser is
//! `u = 1` on the strict super-level set `{v > h}`, a constant `c ∈ [0, 1]` on
//! the plateau `{v = h}`, and `0` elsewhere, with threshold
//! `h(v) = max(0, Φ_v^{−1}(L|Ω|))`.  When `h > 0` the volume budget is active
//! and `c` is chosen so the mass is exactly `L|Ω|`; when `h = 0` only the sign
//! constraint is active and we take the minimal choice `c = 0`.
//!
//! Two independent evaluation paths are provided: the threshold/plateau
//! decomposition ([`support_function`]) and a direct greedy fill
//! ([`brute_force_sigma`]); they agree to `1e−12` relative on generic fields
//! and are cross-checked in the acceptance suite.

use crate::spectral::{Domain, GridField};
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BathtubError {
    #[error("L must lie in (0,1) (got {0})")]
    BadVolumeFraction(f64),
    #[error("restriction mask length {got} does not match the {want} grid nodes")]
    BadMaskLength { got: usize, want: usize },
}

/// Volume fraction `L ∈ (0, 1)` of the shape constraint `|ω| ≤ L|Ω|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeFraction(f64);

impl VolumeFraction {
    pub fn new(l: f64) -> Result<Self, BathtubError> {
        if !(l > 0.0 && l < 1.0) {
            return Err(BathtubError::BadVolumeFraction(l));
        }
        Ok(Self(l))
    }

    pub fn get(&self) -> f64 {
        self.0
    }

    /// The mass budget `L|Ω|` on a given domain.
    pub fn budget(&self, domain: &Domain) -> f64 {
        self.0 * domain.total_measure()
    }
}

/// Result of a bathtub evaluation: value, threshold, level-set decomposition
/// and an explicit maximiser.
#[derive(Debug, Clone)]
pub struct BathtubResult {
    /// σ(v).
    pub sigma: f64,
    /// Threshold `h(v) = max(0, Φ_v^{−1}(L|Ω|))`.
    pub h: f64,
    /// Indices of the strict super-level set `{v > h}` (up to the tie
    /// tolerance).
    pub strict: Vec<usize>,
    /// Indices of the plateau `{v = h}` (within the tie tolerance, positive
    /// values only).
    pub plateau: Vec<usize>,
    /// Plateau weight `c ∈ [0, 1]`.
    pub c: f64,
    /// The maximising relaxed shape: 1 on `strict`, `c` on `plateau`, else 0.
    pub maximiser: GridField,
}

/// Tie tolerance used to split strict set and plateau at threshold `h`.
pub fn tie_tolerance(h: f64) -> f64 {
    1e-12 * (1.0 + h.abs())
}

/// Measure of the super-level set: `Φ_v(t) = |{v > t}|` under the grid
/// quadrature.
pub fn measure_above(v: &GridField, t: f64) -> f64 {
    let cell = v.domain().cell_measure();
    v.values().iter().filter(|&&x| x > t).count() as f64 * cell
}

/// Generalized inverse `Φ_v^{−1}(s) = inf { t : Φ_v(t) ≤ s }`.
///
/// Returns `−∞` when `s` is at least the full grid measure (every threshold
/// qualifies).
pub fn quantile(v: &GridField, s: f64) -> f64 {
    let cell = v.domain().cell_measure();
    let j = (s / cell + 1e-12).floor() as usize;
    if j >= v.values().len() {
        return f64::NEG_INFINITY;
    }
    let mut sorted: Vec<f64> = v.values().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[j]
}

/// Bathtub threshold `h(v) = max(0, Φ_v^{−1}(L|Ω|))`.
pub fn threshold_h(v: &GridField, l: VolumeFraction) -> f64 {
    quantile(v, l.budget(v.domain())).max(0.0)
}

/// Direct greedy evaluation of σ: fill the budget with the largest positive
/// values, at most one cell measure each.  Serves as the independent oracle
/// for [`support_function`].
pub fn brute_force_sigma(v: &GridField, l: VolumeFraction) -> f64 {
    let cell = v.domain().cell_measure();
    let mut sorted: Vec<f64> = v.values().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut budget = l.budget(v.domain());
    let mut sigma = 0.0;
    for x in sorted {
        if x <= 0.0 || budget <= 0.0 {
            break;
        }
        let take = budget.min(cell);
        sigma += take * x;
        budget -= take;
    }
    sigma
}

/// Evaluates σ and its maximiser via the threshold/plateau decomposition.
pub fn support_function(v: &GridField, l: VolumeFraction) -> BathtubResult {
    support_function_impl(v, l, None).expect("no mask, cannot fail")
}

/// σ over shapes restricted to a sub-region: the supremum runs over
/// `u ∈ Ū_L` supported in `{allowed}`.  `allowed[i] = false` excludes node
/// `i`.
pub fn restricted_support_function(
    v: &GridField,
    l: VolumeFraction,
    allowed: &[bool],
) -> Result<BathtubResult, BathtubError> {
    support_function_impl(v, l, Some(allowed))
}

fn support_function_impl(
    v: &GridField,
    l: VolumeFraction,
    allowed: Option<&[bool]>,
) -> Result<BathtubResult, BathtubError> {
    let n = v.values().len();
    if let Some(mask) = allowed {
        if mask.len() != n {
            return Err(BathtubError::BadMaskLength { got: mask.len(), want: n });
        }
    }
    let cell = v.domain().cell_measure();
    let budget = l.budget(v.domain());
    let is_allowed = |i: usize| allowed.map_or(true, |m| m[i]);

    // Stable descending order (ties by index) over allowed nodes.
    let mut order: Vec<usize> = (0..n).filter(|&i| is_allowed(i)).collect();
    order.sort_by(|&a, &b| v.values()[b].total_cmp(&v.values()[a]).then(a.cmp(&b)));

    // h = max(0, Φ^{-1}(budget)) over the allowed region.
    let j = (budget / cell + 1e-12).floor() as usize;
    let h = if j < order.len() { v.values()[order[j]].max(0.0) } else { 0.0 };
    let tol = tie_tolerance(h);

    let mut strict = Vec::new();
    let mut plateau = Vec::new();
    for i in 0..n {
        if !is_allowed(i) {
            continue;
        }
        let x = v.values()[i];
        if x > h + tol {
            strict.push(i);
        } else if x > 0.0 && (x - h).abs() <= tol {
            plateau.push(i);
        }
    }
    let c = if h > tol && !plateau.is_empty() {
        ((budget / cell - strict.len() as f64) / plateau.len() as f64).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let mut vals = Array1::zeros(n);
    for &i in &strict {
        vals[i] = 1.0;
    }
    for &i in &plateau {
        vals[i] = c;
    }
    let maximiser = GridField::new(v.domain().clone(), vals).expect("finite by construction");
    let sigma = cell
        * (strict.iter().map(|&i| v.values()[i]).sum::<f64>()
            + c * plateau.iter().map(|&i| v.values()[i]).sum::<f64>());
    Ok(BathtubResult { sigma, h, strict, plateau, c, maximiser })
}

/// Fused batch evaluation for the dual solver: each row of `q`
/// (`num_rows × num_nodes`) is a spatial field; returns per-row σ values and
/// the stacked maximisers.  Matches [`support_function`] on generic fields to
/// machine precision, but resolves budget-boundary ties by greedy fill (one
/// fractional cell) instead of a uniform plateau weight — both are maximisers,
/// and σ agrees.
pub(crate) fn sigma_rows(
    q: &Array2<f64>,
    cell: f64,
    budget: f64,
    allowed: Option<&[bool]>,
) -> (Array1<f64>, Array2<f64>) {
    let (rows, n) = q.dim();
    let kfull = ((budget / cell + 1e-12).floor() as usize).min(n);
    let frac = (budget - kfull as f64 * cell).max(0.0) / cell;
    let mut sigma = Array1::zeros(rows);
    let mut u = Array2::zeros((rows, n));
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for r in 0..rows {
        let row = q.row(r);
        order.clear();
        order.extend((0..n).filter(|&i| allowed.map_or(true, |m| m[i])));
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut s = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            let x = row[i];
            if x <= 0.0 || rank > kfull {
                break;
            }
            let w = if rank < kfull { 1.0 } else { frac };
            if w == 0.0 {
                break;
            }
            s += w * x;
            u[[r, i]] = w;
        }
        sigma[r] = s * cell;
    }
    (sigma, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::Domain;

    fn field(n: usize, f: impl Fn(f64) -> f64) -> GridField {
        let d = Domain::interval(1.0, n).unwrap();
        GridField::from_fn(d, |x, _| f(x)).unwrap()
    }

    #[test]
    fn volume_fraction_bounds() {
        assert!(VolumeFraction::new(0.5).is_ok());
        for bad in [0.0, 1.0, 1.5, -0.1] {
            let err = VolumeFraction::new(bad).unwrap_err();
            assert!(err.to_string().contains("L must lie in (0,1)"));
        }
    }

    #[test]
    fn sigma_linear_field() {
        // v(x) = x, L = 0.5: fill the top half, σ = ∫_{1/2}^1 x dx = 0.375.
        let v = field(512, |x| x);
        let l = VolumeFraction::new(0.5).unwrap();
        let r = support_function(&v, l);
        assert!((r.sigma - 0.375).abs() < 2e-3, "sigma = {}", r.sigma);
        assert!((r.h - 0.5).abs() < 5e-3);
        assert!((brute_force_sigma(&v, l) - r.sigma).abs() < 1e-14);
    }

    #[test]
    fn sigma_shifted_field_inactive_budget() {
        // v(x) = x − 0.7, L = 0.5: the positive part has measure 0.3 < 0.5,
        // so the budget is slack, h = 0, σ = ∫_{0.7}^1 (x − 0.7) dx = 0.045.
        let v = field(1024, |x| x - 0.7);
        let l = VolumeFraction::new(0.5).unwrap();
        let r = support_function(&v, l);
        assert!((r.sigma - 0.045).abs() < 5e-4, "sigma = {}", r.sigma);
        assert_eq!(r.h, 0.0);
        assert_eq!(r.c, 0.0);
    }

    #[test]
    fn sigma_zero_iff_nonpositive() {
        let l = VolumeFraction::new(0.3).unwrap();
        let v = field(64, |x| -x);
        assert_eq!(support_function(&v, l).sigma, 0.0);
        let v2 = field(64, |x| x - 0.9);
        assert!(support_function(&v2, l).sigma > 0.0);
    }

    #[test]
    fn sigma_positive_homogeneity() {
        let v = field(128, |x| (13.0 * x).sin());
        let l = VolumeFraction::new(0.4).unwrap();
        let s1 = support_function(&v, l).sigma;
        for t in [0.5, 2.0, 7.5, 1e6] {
            let vt = GridField::new(v.domain().clone(), v.values() * t).unwrap();
            let st = support_function(&vt, l).sigma;
            assert!((st - t * s1).abs() <= 1e-12 * t * s1.abs().max(1.0));
        }
    }

    #[test]
    fn sigma_cauchy_schwarz_bound() {
        let l = VolumeFraction::new(0.9).unwrap();
        for seed in 0..5 {
            let v = field(200, |x| (x * (31.0 + seed as f64)).sin() - 0.2);
            let bound = v.domain().total_measure().sqrt() * v.norm_l2();
            assert!(support_function(&v, l).sigma <= bound + 1e-12);
        }
    }

    #[test]
    fn maximiser_pairing_matches_sigma() {
        let l = VolumeFraction::new(0.3).unwrap();
        let v = field(256, |x| (20.0 * x).cos() + 0.3 * x);
        let r = support_function(&v, l);
        let cell = v.domain().cell_measure();
        let pairing: f64 =
            r.maximiser.values().iter().zip(v.values()).map(|(u, x)| u * x).sum::<f64>() * cell;
        assert!((pairing - r.sigma).abs() <= 1e-10 * (1.0 + r.sigma.abs()));
        // Feasibility of the maximiser.
        let mass: f64 = r.maximiser.values().sum() * cell;
        assert!(mass <= l.budget(v.domain()) + 1e-10);
        assert!(r.maximiser.values().iter().all(|&u| (0.0..=1.0).contains(&u)));
    }

    #[test]
    fn exact_plateau_mass_balance() {
        // A field with a genuine plateau cutting the budget boundary.
        let d = Domain::interval(1.0, 10).unwrap();
        let vals = ndarray::Array1::from(vec![
            2.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.2, 0.1, 0.05, 0.01,
        ]);
        let v = GridField::new(d.clone(), vals).unwrap();
        // budget = 0.3·1 = 0.3, cell = 1/11 ⇒ budget/cell = 3.3: one strict
        // cell (2.0) plus 2.3 cells spread over the four-fold plateau at 1.0.
        let l = VolumeFraction::new(0.3).unwrap();
        let r = support_function(&v, l);
        assert_eq!(r.strict, vec![0]);
        assert_eq!(r.plateau, vec![1, 2, 3, 4]);
        assert!((r.c - 2.3 / 4.0).abs() < 1e-12);
        let cell = d.cell_measure();
        let mass: f64 = r.maximiser.values().sum() * cell;
        assert!((mass - 0.3).abs() < 1e-12);
        // Greedy fill attains the same σ with a different maximiser.
        assert!((brute_force_sigma(&v, l) - r.sigma).abs() < 1e-14);
    }

    #[test]
    fn restricted_sigma_never_exceeds_unrestricted() {
        let l = VolumeFraction::new(0.5).unwrap();
        let v = field(100, |x| (9.0 * x).sin());
        let full = support_function(&v, l).sigma;
        let allowed: Vec<bool> = (0..100).map(|i| i % 3 != 0).collect();
        let restr = restricted_support_function(&v, l, &allowed).unwrap();
        assert!(restr.sigma <= full + 1e-12);
        for (i, &a) in allowed.iter().enumerate() {
            if !a {
                assert_eq!(restr.maximiser.values()[i], 0.0);
            }
        }
    }

    #[test]
    fn restricted_mask_length_checked() {
        let l = VolumeFraction::new(0.5).unwrap();
        let v = field(100, |x| x);
        assert!(matches!(
            restricted_support_function(&v, l, &[true; 7]),
            Err(BathtubError::BadMaskLength { .. })
        ));
    }

    #[test]
    fn sigma_rows_matches_scalar_path() {
        let l = VolumeFraction::new(0.3).unwrap();
        let d = Domain::interval(1.0, 64).unwrap();
        let cell = d.cell_measure();
        let budget = l.budget(&d);
        let mut q = Array2::zeros((5, 64));
        for r in 0..5 {
            for i in 0..64 {
                let x = (i + 1) as f64 * cell;
                q[[r, i]] = (x * (7.0 + r as f64)).sin() - 0.1 * r as f64;
            }
        }
        let (sig, u) = sigma_rows(&q, cell, budget, None);
        for r in 0..5 {
            let v = GridField::new(d.clone(), q.row(r).to_owned()).unwrap();
            let want = support_function(&v, l);
            assert!((sig[r] - want.sigma).abs() <= 1e-12 * (1.0 + want.sigma));
            let pairing: f64 =
                u.row(r).iter().zip(q.row(r)).map(|(a, b)| a * b).sum::<f64>() * cell;
            assert!((pairing - sig[r]).abs() <= 1e-12 * (1.0 + sig[r]));
        }
    }
}
