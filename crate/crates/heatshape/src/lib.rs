//! Bang-bang shape-control synthesis for the Dirichlet heat equation.
//!
//! The library steers the state of `y_t − Δy = u`, with homogeneous Dirichlet
//! boundary conditions, into the ε-ball around a target `y_f` using nonnegative
//! on-off shape controls
//! ```math
//! u(t, x) = M̄ · χ_{ω(t)}(x),      |ω(t)| ≤ L|Ω|,
//! ```
//! i.e. a single constant amplitude `M̄` times the indicator of a time-varying
//! set of bounded volume fraction.  The synthesis pipeline is:
//!
//! 1. [`spectral`] — truncated Dirichlet eigen-expansion of the generator, the
//!    semigroup `S_t`, the control-to-state map `L_T` (Duhamel integral) and
//!    its adjoint.
//! 2. [`bathtub`] — the support function `σ` of the relaxed constraint set
//!    `Ū_L = {0 ≤ u ≤ 1, ∫u ≤ L|Ω|}` via the (relaxed) bathtub principle,
//!    with explicit plateau handling.
//! 3. [`dual`] — minimization of the Fenchel dual functional
//!    `J(p_f) = ½ H(p_f)² − ⟨d, p_f⟩ + ε‖p_f‖` where
//!    `H(p_f) = ∫₀ᵀ σ(p(t)) dt` along the backward adjoint trajectory, with a
//!    duality-gap certificate from a feasible primal candidate.
//! 4. [`synth`] — extraction of the bang-bang control
//!    `u* = M̄ χ_{p* > h(p*)}` and independent forward verification.
//! 5. [`studies`] — value-function sweeps `M̄(T)`, the minimal-time map
//!    `T*(λ)`, and the small-time obstruction experiment with its adjoint
//!    witness.
//! 6. [`config`] / [`report`] — run configuration, CSV/JSON artifacts, and
//!    plot scripts for the CLI.

pub mod bathtub;
pub mod config;
pub mod dual;
pub mod report;
pub mod selftest;
pub mod spectral;
pub mod studies;
pub mod synth;

pub use bathtub::{BathtubResult, VolumeFraction};
pub use dual::{ControlProblem, DualReport, SolverOptions};
pub use spectral::{
    ControlTrajectory, Domain, GridField, ModeVector, SpectralBasis, TimeGrid,
};
pub use synth::{SynthesizedControl, VerificationReport};
