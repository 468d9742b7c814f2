use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid with {0} nodes; at least {1} required")]
    TooFewNodes(usize, usize),
    #[error("non-compactified field")]
    NonCompactified,
    #[error("south pole on grid at r = {0}")]
    SouthPole(f64),
    #[error("frame chart exceeded at r = {0}")]
    FrameChartExceeded(f64),
    #[error("lattice mismatch: base exponents {0} and {1}")]
    LatticeMismatch(f64, f64),
    #[error("order deficit: {0}")]
    OrderDeficit(String),
    #[error("fit window too narrow (condition number {0:.3e})")]
    FitWindowTooNarrow(f64),
    #[error("window not asymptotic (relative residual {0:.3e})")]
    WindowNotAsymptotic(f64),
    #[error("quadrature did not converge (Richardson estimate {0:.3e})")]
    QuadratureNonConvergence(f64),
    #[error("series radius exceeded at y0 = {0}")]
    SeriesRadiusExceeded(f64),
    #[error("matching failure at level ({0},{1}): residual {2:.3e}")]
    MatchingFailure(usize, usize, f64),
    #[error("phase integrand inconsistency (imaginary part {0:.3e})")]
    PhaseIntegrand(f64),
    #[error("ambiguous scale: {0} zero crossings")]
    AmbiguousScale(usize),
    #[error("non-positive value in power-law fit")]
    NonPositive,
    #[error("{region} evaluator unavailable at radius {radius:.6e}")]
    RegionUnavailable { region: &'static str, radius: f64 },
    #[error("step failure at t = {t}: {reason}")]
    StepFailure { t: f64, reason: String },
    #[error("resonant harmonic ({0},{1}) outside the solvable set")]
    Resonance(i32, i32),
    #[error("out of range: {0}")]
    OutOfRange(String),
}

pub type Result<T> = std::result::Result<T, Error>;
