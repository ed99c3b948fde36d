use thiserror::Error;

/// Everything that can go wrong on the numerical side.
///
/// Validation of user input (config files, CLI flags) lives in the CLI
/// crate; this enum covers the physics and linear-algebra failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("lattice matrix is singular or badly scaled (det = {det:.3e})")]
    SingularLattice { det: f64 },

    #[error("potential coefficients are not Hermitian at {m:?}")]
    PotentialNotHermitian { m: [i64; 3] },

    #[error("plane-wave cutoff {g_max} admits no reciprocal vectors")]
    EmptyBasis { g_max: f64 },

    #[error("spectrum is not gapped at band {n_occ}: gap = {gap:.3e} (tol {tol:.1e})")]
    NotAnInsulator { n_occ: usize, gap: f64, tol: f64 },

    #[error("eigenvalue {value:.12e} lies within {margin:.1e} of the Fermi level {fermi:.12e}")]
    EigenvalueAtFermi { value: f64, fermi: f64, margin: f64 },

    #[error("eigensolver failed at q = {q:?}: {reason}")]
    Eigensolver { q: [f64; 3], reason: String },

    #[error("momentum {q:?} coincides with a reciprocal lattice point")]
    MomentumOnLattice { q: [f64; 3] },

    #[error("integration contour passes within {dist:.3e} of the spectrum (need >= {need:.3e})")]
    ContourTouchesSpectrum { dist: f64, need: f64 },

    #[error("direction set is rank-deficient for tensor recovery (condition {cond:.3e})")]
    IllConditionedDirections { cond: f64 },

    #[error("SCF did not converge: residual {residual:.3e} after {iterations} iterations (tol {tol:.1e})")]
    ScfNotConverged { iterations: usize, residual: f64, tol: f64 },

    #[error("supercell basis too small: folded spectrum leaves no gap at the Fermi level (gap = {gap:.3e})")]
    SupercellGapClosed { gap: f64 },

    #[error("rescaled momentum eta*k = {k:?} leaves the first Brillouin zone")]
    MomentumOutOfZone { k: [f64; 3] },

    #[error("dimension mismatch: {context} (got {got}, expected {expected})")]
    DimensionMismatch { context: &'static str, got: usize, expected: usize },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),
}

pub type Result<T> = std::result::Result<T, Error>;
