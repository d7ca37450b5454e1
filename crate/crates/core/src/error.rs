use thiserror::Error;

/// Errors raised by the operator, solver, simulation and experiment layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("expression parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("positivity error: {0}")]
    Positivity(String),

    #[error("coefficient error: {0}")]
    Coefficient(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("discretization too coarse: {0}")]
    DiscretizationTooCoarse(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("truncation insufficient: relative difference {rel_diff:.3e} exceeds {tolerance:.1e}")]
    TruncationInsufficient { rel_diff: f64, tolerance: f64 },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("offspring law: {0}")]
    OffspringLaw(String),

    #[error("population explosion: {0}")]
    Explosion(String),

    /// A hypothesis of the limit theorems does not hold for the model.
    #[error("regime gate: hypothesis `{hypothesis}` violated ({detail})")]
    Regime { hypothesis: String, detail: String },

    #[error("test function error: {0}")]
    TestFunction(String),

    #[error("statistical power: {0}")]
    StatisticalPower(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
