//! Spectral discretization of the Dirichlet heat semigroup.
//!
//! The generator is diagonalized by the Dirichlet sine basis: on an interval
//! of length `ℓ` the eigenpairs are `λ_k = (kπ/ℓ)²`,
//! `φ_k(x) = √(2/ℓ) sin(kπx/ℓ)`; on a rectangle they are tensor products.
//! All time evolution is exact per mode (`e^{−λ_k t}`), so the only
//! discretization errors are spatial truncation (K modes) and the time
//! quadrature of control/adjoint integrals.
//!
//! Controls and adjoint integrands are handled as piecewise-constant functions
//! on the cells of a [`TimeGrid`] partition; the exponential kernel is
//! integrated exactly on every cell (product integration).  This makes the
//! Duhamel map exact for piecewise-constant controls and keeps the
//! control-to-state map and its adjoint exactly transposed to each other.

use ndarray::{Array1, Array2};
use thiserror::Error;

/// Errors from domain/grid construction and mismatched operands.
#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("K = {k} modes per axis exceeds the resolvable bound K ≤ n/2 = {max} for n = {n} grid points")]
    TooManyModes { k: usize, max: usize, n: usize },
    #[error("K must be at least 4 (got {0})")]
    TooFewModes(usize),
    #[error("domain mismatch: operands were built on different domains")]
    DomainMismatch,
    #[error("time grid mismatch: operands use different time grids")]
    TimeGridMismatch,
    #[error("negative time t = {0} passed to a semigroup operation")]
    NegativeTime(f64),
    #[error("side lengths must be positive (got {0})")]
    BadSideLength(f64),
    #[error("n must be at least 8 interior nodes per axis (got {0})")]
    TooFewNodes(usize),
    #[error("time horizon must be positive (got {0})")]
    BadHorizon(f64),
    #[error("time grid needs m ≥ 16 quadrature nodes (got {0})")]
    TooFewTimeNodes(usize),
    #[error("field length {got} does not match the {want} interior nodes of the domain")]
    BadFieldLength { got: usize, want: usize },
    #[error("non-finite value in field data")]
    NonFinite,
    #[error("control values must be nonnegative (found {0})")]
    NegativeControl(f64),
}

/// Shape of the spatial domain Ω.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainKind {
    /// Interval (0, ℓ).
    Interval { len: f64 },
    /// Rectangle (0, lx) × (0, ly).
    Rectangle { lx: f64, ly: f64 },
}

/// Spatial domain with a uniform grid of strictly interior nodes
/// (Dirichlet boundary nodes are not stored).
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    kind: DomainKind,
    /// Interior grid nodes per axis.
    n: usize,
}

impl Domain {
    pub fn interval(len: f64, n: usize) -> Result<Self, SpectralError> {
        if !(len > 0.0) {
            return Err(SpectralError::BadSideLength(len));
        }
        if n < 8 {
            return Err(SpectralError::TooFewNodes(n));
        }
        Ok(Self { kind: DomainKind::Interval { len }, n })
    }

    pub fn rectangle(lx: f64, ly: f64, n: usize) -> Result<Self, SpectralError> {
        if !(lx > 0.0) {
            return Err(SpectralError::BadSideLength(lx));
        }
        if !(ly > 0.0) {
            return Err(SpectralError::BadSideLength(ly));
        }
        if n < 8 {
            return Err(SpectralError::TooFewNodes(n));
        }
        Ok(Self { kind: DomainKind::Rectangle { lx, ly }, n })
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    /// Interior nodes per axis.
    pub fn n_per_axis(&self) -> usize {
        self.n
    }

    /// Total number of interior grid nodes.
    pub fn num_nodes(&self) -> usize {
        match self.kind {
            DomainKind::Interval { .. } => self.n,
            DomainKind::Rectangle { .. } => self.n * self.n,
        }
    }

    /// |Ω|, the total measure of the domain.
    pub fn total_measure(&self) -> f64 {
        match self.kind {
            DomainKind::Interval { len } => len,
            DomainKind::Rectangle { lx, ly } => lx * ly,
        }
    }

    /// Measure of one grid cell (product of the per-axis spacings).
    pub fn cell_measure(&self) -> f64 {
        match self.kind {
            DomainKind::Interval { len } => len / (self.n + 1) as f64,
            DomainKind::Rectangle { lx, ly } => {
                let nn = (self.n + 1) as f64;
                (lx / nn) * (ly / nn)
            }
        }
    }

    /// Coordinates of interior node `i` (row-major for rectangles).
    pub fn node_position(&self, i: usize) -> (f64, f64) {
        match self.kind {
            DomainKind::Interval { len } => {
                let h = len / (self.n + 1) as f64;
                ((i + 1) as f64 * h, 0.0)
            }
            DomainKind::Rectangle { lx, ly } => {
                let hx = lx / (self.n + 1) as f64;
                let hy = ly / (self.n + 1) as f64;
                let (ix, iy) = (i / self.n, i % self.n);
                ((ix + 1) as f64 * hx, (iy + 1) as f64 * hy)
            }
        }
    }
}

/// A spatial function by its values at the interior grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    domain: Domain,
    values: Array1<f64>,
}

impl GridField {
    pub fn new(domain: Domain, values: Array1<f64>) -> Result<Self, SpectralError> {
        if values.len() != domain.num_nodes() {
            return Err(SpectralError::BadFieldLength {
                got: values.len(),
                want: domain.num_nodes(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::NonFinite);
        }
        Ok(Self { domain, values })
    }

    pub fn zeros(domain: Domain) -> Self {
        let n = domain.num_nodes();
        Self { domain, values: Array1::zeros(n) }
    }

    /// Build a field from a function of the node coordinates.
    pub fn from_fn(domain: Domain, f: impl Fn(f64, f64) -> f64) -> Result<Self, SpectralError> {
        let values = (0..domain.num_nodes())
            .map(|i| {
                let (x, y) = domain.node_position(i);
                f(x, y)
            })
            .collect::<Array1<f64>>();
        Self::new(domain, values)
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    /// Grid L² norm: `(Σ v_i² · cell)^{1/2}`.
    pub fn norm_l2(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.domain.cell_measure()).sqrt()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Truncated Dirichlet eigenbasis on a [`Domain`].
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    domain: Domain,
    k_per_axis: usize,
    /// Eigenvalues sorted ascending.
    lambdas: Array1<f64>,
    /// Eigenfunction values at grid nodes: `(num_nodes, num_modes)`.
    phi: Array2<f64>,
    /// Semigroup decay rate α = −λ_min < 0.
    alpha: f64,
}

/// Builds the truncated eigenbasis with `k_per_axis` modes per axis.
///
/// Eigenvalues are `(kπ/ℓ)²` on an interval and sums of per-axis eigenvalues
/// on a rectangle; modes are sorted by ascending eigenvalue (ties broken by
/// mode index for determinism).
pub fn build_basis(domain: &Domain, k_per_axis: usize) -> Result<SpectralBasis, SpectralError> {
    if k_per_axis < 4 {
        return Err(SpectralError::TooFewModes(k_per_axis));
    }
    let n = domain.n_per_axis();
    if k_per_axis > n / 2 {
        return Err(SpectralError::TooManyModes { k: k_per_axis, max: n / 2, n });
    }
    let axis = |len: f64| -> (Vec<f64>, Array2<f64>) {
        let h = len / (n + 1) as f64;
        let norm = (2.0 / len).sqrt();
        let lam: Vec<f64> = (1..=k_per_axis)
            .map(|k| {
                let w = k as f64 * std::f64::consts::PI / len;
                w * w
            })
            .collect();
        let mut phi = Array2::zeros((n, k_per_axis));
        for i in 0..n {
            let x = (i + 1) as f64 * h;
            for (j, _) in lam.iter().enumerate() {
                let k = (j + 1) as f64;
                phi[[i, j]] = norm * (k * std::f64::consts::PI * x / len).sin();
            }
        }
        (lam, phi)
    };
    let (lambdas, phi) = match domain.kind() {
        DomainKind::Interval { len } => {
            let (lam, phi) = axis(len);
            (Array1::from(lam), phi)
        }
        DomainKind::Rectangle { lx, ly } => {
            let (lam_x, phi_x) = axis(lx);
            let (lam_y, phi_y) = axis(ly);
            // Tensor modes sorted by eigenvalue, ties by (k1, k2).
            let mut order: Vec<(usize, usize)> = (0..k_per_axis)
                .flat_map(|a| (0..k_per_axis).map(move |b| (a, b)))
                .collect();
            order.sort_by(|&(a1, b1), &(a2, b2)| {
                (lam_x[a1] + lam_y[b1])
                    .total_cmp(&(lam_x[a2] + lam_y[b2]))
                    .then(a1.cmp(&a2))
                    .then(b1.cmp(&b2))
            });
            let num_modes = order.len();
            let num_nodes = n * n;
            let mut lam = Array1::zeros(num_modes);
            let mut phi = Array2::zeros((num_nodes, num_modes));
            for (j, &(a, b)) in order.iter().enumerate() {
                lam[j] = lam_x[a] + lam_y[b];
                for ix in 0..n {
                    for iy in 0..n {
                        phi[[ix * n + iy, j]] = phi_x[[ix, a]] * phi_y[[iy, b]];
                    }
                }
            }
            (lam, phi)
        }
    };
    let alpha = -lambdas[0];
    Ok(SpectralBasis { domain: domain.clone(), k_per_axis, lambdas, phi, alpha })
}

impl SpectralBasis {
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn k_per_axis(&self) -> usize {
        self.k_per_axis
    }

    pub fn num_modes(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &Array1<f64> {
        &self.lambdas
    }

    /// Eigenfunction values at grid nodes, `(num_nodes, num_modes)`.
    pub fn phi(&self) -> &Array2<f64> {
        &self.phi
    }

    /// Semigroup decay rate α = −λ_min (negative: exponential stability).
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Maximal deviation from orthonormality under the grid quadrature
    /// (certificate for the basis invariant; ≈ machine precision here).
    pub fn orthonormality_defect(&self) -> f64 {
        let cell = self.domain.cell_measure();
        let gram = self.phi.t().dot(&self.phi) * cell;
        let mut worst = 0.0f64;
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[[i, j]] - want).abs());
            }
        }
        worst
    }
}

/// A spatial function by its truncated eigen-coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeVector {
    domain: Domain,
    k_per_axis: usize,
    coeffs: Array1<f64>,
}

impl ModeVector {
    pub fn zeros(basis: &SpectralBasis) -> Self {
        Self {
            domain: basis.domain.clone(),
            k_per_axis: basis.k_per_axis,
            coeffs: Array1::zeros(basis.num_modes()),
        }
    }

    pub fn from_coeffs(basis: &SpectralBasis, coeffs: Array1<f64>) -> Result<Self, SpectralError> {
        if coeffs.len() != basis.num_modes() {
            return Err(SpectralError::BadFieldLength {
                got: coeffs.len(),
                want: basis.num_modes(),
            });
        }
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::NonFinite);
        }
        Ok(Self { domain: basis.domain.clone(), k_per_axis: basis.k_per_axis, coeffs })
    }

    pub fn coeffs(&self) -> &Array1<f64> {
        &self.coeffs
    }

    pub fn matches(&self, basis: &SpectralBasis) -> bool {
        self.domain == basis.domain && self.k_per_axis == basis.k_per_axis
    }

    /// Spectral L² norm (Parseval).
    pub fn norm_l2(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ModeVector) -> f64 {
        self.coeffs.dot(&other.coeffs)
    }
}

/// Projects a grid field onto the truncated eigenbasis.
pub fn to_modes(field: &GridField, basis: &SpectralBasis) -> Result<ModeVector, SpectralError> {
    if field.domain != basis.domain {
        return Err(SpectralError::DomainMismatch);
    }
    let coeffs = basis.phi.t().dot(field.values()) * basis.domain.cell_measure();
    ModeVector::from_coeffs(basis, coeffs)
}

/// Evaluates a mode vector on the grid.
pub fn from_modes(mv: &ModeVector, basis: &SpectralBasis) -> Result<GridField, SpectralError> {
    if !mv.matches(basis) {
        return Err(SpectralError::DomainMismatch);
    }
    GridField::new(basis.domain.clone(), basis.phi.dot(&mv.coeffs))
}

/// Applies the heat semigroup `S_t`: coefficient `k` is multiplied by
/// `e^{−λ_k t}`.
pub fn semigroup_apply(
    basis: &SpectralBasis,
    t: f64,
    mv: &ModeVector,
) -> Result<ModeVector, SpectralError> {
    if t < 0.0 {
        return Err(SpectralError::NegativeTime(t));
    }
    if !mv.matches(basis) {
        return Err(SpectralError::DomainMismatch);
    }
    let coeffs = ndarray::Zip::from(&mv.coeffs)
        .and(&basis.lambdas)
        .map_collect(|c, l| c * (-l * t).exp());
    ModeVector::from_coeffs(basis, coeffs)
}

/// Node placement rule of a [`TimeGrid`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Placement {
    /// `m` equal cells on [0, T].
    Uniform,
    /// Uniform cells away from the terminal time plus a cell partition that is
    /// geometric in `s = T − t` over the terminal boundary layer, resolving
    /// every semigroup scale down to `1/λ_max`.  This is required for the dual
    /// functional: the layer `σ(S_s p)` near `s = 0` carries mode content at
    /// all scales `1/λ_k`, and a uniform partition both misses its mass and
    /// loses the coercivity of the dual functional.
    GradedTail {
        /// Geometric resolution of the tail (partition points per decade).
        points_per_decade: usize,
    },
}

/// Default geometric resolution of the graded tail.
pub const DEFAULT_POINTS_PER_DECADE: usize = 24;

/// Partition of [0, T] into quadrature cells; trajectories are sampled at the
/// cell midpoints ("nodes") and treated as piecewise constant per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_final: f64,
    m: usize,
    placement: Placement,
    /// Cell boundaries, strictly increasing, `boundaries[0] = 0`,
    /// `boundaries.last() = T`.
    boundaries: Vec<f64>,
}

impl TimeGrid {
    /// Uniform partition with `m` cells.
    pub fn uniform(t_final: f64, m: usize) -> Result<Self, SpectralError> {
        if !(t_final > 0.0) {
            return Err(SpectralError::BadHorizon(t_final));
        }
        if m < 16 {
            return Err(SpectralError::TooFewTimeNodes(m));
        }
        let boundaries = (0..=m).map(|i| t_final * i as f64 / m as f64).collect();
        Ok(Self { t_final, m, placement: Placement::Uniform, boundaries })
    }

    /// Uniform-plus-graded-tail partition adapted to the spectrum of `basis`.
    ///
    /// `max(16, m/2)` uniform cells cover `[0, T − s₁]` with
    /// `s₁ = min(T/2, 1/λ₁)`; the remaining layer is partitioned geometrically
    /// in `s = T − t` from `s₁` down to
    /// `s_min = min(s₁/4, max(1/(20 λ_max), 10⁻⁹ T))` with
    /// `points_per_decade` cells per decade.
    pub fn graded(
        t_final: f64,
        m: usize,
        basis: &SpectralBasis,
        points_per_decade: usize,
    ) -> Result<Self, SpectralError> {
        if !(t_final > 0.0) {
            return Err(SpectralError::BadHorizon(t_final));
        }
        if m < 16 {
            return Err(SpectralError::TooFewTimeNodes(m));
        }
        let lam1 = basis.lambdas[0];
        let lam_max = basis.lambdas[basis.num_modes() - 1];
        let s1 = (t_final / 2.0).min(1.0 / lam1);
        let s_min = (s1 / 4.0).min((1.0 / (20.0 * lam_max)).max(1e-9 * t_final));
        let decades = (s1 / s_min).log10();
        let g = (points_per_decade as f64 * decades).ceil() as usize;
        let m_uni = (m / 2).max(16);
        let mut b: Vec<f64> = (0..=m_uni)
            .map(|i| (t_final - s1) * i as f64 / m_uni as f64)
            .collect();
        for j in 0..=g {
            let s = s_min * (s1 / s_min).powf((g - j) as f64 / g as f64);
            b.push(t_final - s);
        }
        b.push(t_final);
        b.sort_by(f64::total_cmp);
        b.dedup_by(|a, bb| (*a - *bb).abs() <= 1e-15 * t_final);
        Ok(Self {
            t_final,
            m,
            placement: Placement::GradedTail { points_per_decade },
            boundaries: b,
        })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    /// Requested base resolution (configured `m`).
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    /// Number of quadrature cells in the partition.
    pub fn num_cells(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Cell midpoints (the quadrature nodes).
    pub fn nodes(&self) -> Vec<f64> {
        self.boundaries.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn cell_width(&self, i: usize) -> f64 {
        self.boundaries[i + 1] - self.boundaries[i]
    }
}

/// Exact kernel weights of the control-to-state map:
/// `A[i, k] = ∫_{cell i} e^{−λ_k (T − t)} dt`.
///
/// For a piecewise-constant control `u` with modal values `c_{i,k}` on cell
/// `i`, the Duhamel integral is exactly `Σ_i A[i,k] c_{i,k}` per mode.
pub fn kernel_weights(basis: &SpectralBasis, tg: &TimeGrid) -> Array2<f64> {
    let t_final = tg.t_final();
    let nc = tg.num_cells();
    let nk = basis.num_modes();
    let mut a = Array2::zeros((nc, nk));
    for (k, &lam) in basis.lambdas.iter().enumerate() {
        let mut prev = (-lam * t_final).exp();
        for i in 0..nc {
            let next = (-lam * (t_final - tg.boundaries[i + 1])).exp();
            a[[i, k]] = (next - prev) / lam;
            prev = next;
        }
    }
    a
}

/// Backward adjoint trajectory `p(t_i) = S_{T − t_i} p_f` sampled at the
/// quadrature nodes, with the terminal datum stored separately.
#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    tg: TimeGrid,
    p_f: ModeVector,
    node_modes: Vec<ModeVector>,
    node_fields: Vec<GridField>,
}

impl AdjointTrajectory {
    pub fn time_grid(&self) -> &TimeGrid {
        &self.tg
    }

    pub fn terminal(&self) -> &ModeVector {
        &self.p_f
    }

    pub fn node_modes(&self) -> &[ModeVector] {
        &self.node_modes
    }

    pub fn node_fields(&self) -> &[GridField] {
        &self.node_fields
    }
}

/// Computes the backward adjoint trajectory (self-adjoint generator, so
/// `S* = S` and `p(t) = S_{T−t} p_f`).
pub fn adjoint_trajectory(
    basis: &SpectralBasis,
    p_f: &ModeVector,
    tg: &TimeGrid,
) -> Result<AdjointTrajectory, SpectralError> {
    if !p_f.matches(basis) {
        return Err(SpectralError::DomainMismatch);
    }
    let mut node_modes = Vec::with_capacity(tg.num_cells());
    let mut node_fields = Vec::with_capacity(tg.num_cells());
    for t in tg.nodes() {
        let mv = semigroup_apply(basis, tg.t_final() - t, p_f)?;
        node_fields.push(from_modes(&mv, basis)?);
        node_modes.push(mv);
    }
    Ok(AdjointTrajectory { tg: tg.clone(), p_f: p_f.clone(), node_modes, node_fields })
}

/// Nonnegative control trajectory, piecewise constant on the quadrature cells
/// (one grid field per node).
#[derive(Debug, Clone)]
pub struct ControlTrajectory {
    tg: TimeGrid,
    fields: Vec<GridField>,
}

impl ControlTrajectory {
    pub fn new(tg: TimeGrid, fields: Vec<GridField>) -> Result<Self, SpectralError> {
        if fields.len() != tg.num_cells() {
            return Err(SpectralError::BadFieldLength {
                got: fields.len(),
                want: tg.num_cells(),
            });
        }
        for f in &fields {
            let mn = f.min_value();
            if mn < 0.0 {
                return Err(SpectralError::NegativeControl(mn));
            }
        }
        Ok(Self { tg, fields })
    }

    pub fn zero(tg: TimeGrid, domain: &Domain) -> Self {
        let fields = (0..tg.num_cells()).map(|_| GridField::zeros(domain.clone())).collect();
        Self { tg, fields }
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.tg
    }

    pub fn fields(&self) -> &[GridField] {
        &self.fields
    }

    /// `sup_t ‖u(t)‖_∞` over the grid.
    pub fn sup_norm(&self) -> f64 {
        self.fields.iter().map(|f| f.max_value()).fold(0.0, f64::max)
    }
}

/// Control-to-state map `L_T u = ∫₀ᵀ S_{T−t} u(t) dt` (Duhamel integral),
/// exact for piecewise-constant controls.
pub fn duhamel(
    basis: &SpectralBasis,
    u: &ControlTrajectory,
    tg: &TimeGrid,
) -> Result<GridField, SpectralError> {
    if u.time_grid() != tg {
        return Err(SpectralError::TimeGridMismatch);
    }
    let a = kernel_weights(basis, tg);
    let mut out = Array1::zeros(basis.num_modes());
    for (i, f) in u.fields.iter().enumerate() {
        let c = to_modes(f, basis)?;
        for k in 0..basis.num_modes() {
            out[k] += a[[i, k]] * c.coeffs[k];
        }
    }
    from_modes(&ModeVector::from_coeffs(basis, out)?, basis)
}

/// State trajectory of the forward solve, sampled at the quadrature nodes,
/// plus the terminal state `y(T)`.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    pub node_states: Vec<GridField>,
    pub terminal: GridField,
}

/// Solves the forward problem `y' − Δy = u`, `y(0) = y0` exactly per mode for
/// the piecewise-constant control: `y(t_{i+1}) = e^{−λ δ} y(t_i) + u_i (1 −
/// e^{−λ δ})/λ` across each cell.
pub fn forward_solve(
    basis: &SpectralBasis,
    y0: &GridField,
    u: &ControlTrajectory,
    tg: &TimeGrid,
) -> Result<StateTrajectory, SpectralError> {
    if u.time_grid() != tg {
        return Err(SpectralError::TimeGridMismatch);
    }
    let mut y = to_modes(y0, basis)?;
    let mut node_states = Vec::with_capacity(tg.num_cells());
    for (i, f) in u.fields.iter().enumerate() {
        let c = to_modes(f, basis)?;
        let half = 0.5 * tg.cell_width(i);
        let step = |y: &ModeVector, dt: f64| -> Result<ModeVector, SpectralError> {
            let coeffs = ndarray::Zip::from(&y.coeffs)
                .and(&c.coeffs)
                .and(&basis.lambdas)
                .map_collect(|yk, ck, l| {
                    let e = (-l * dt).exp();
                    yk * e + ck * (1.0 - e) / l
                });
            ModeVector::from_coeffs(basis, coeffs)
        };
        let mid = step(&y, half)?;
        node_states.push(from_modes(&mid, basis)?);
        y = step(&mid, half)?;
    }
    let terminal = from_modes(&y, basis)?;
    Ok(StateTrajectory { node_states, terminal })
}
