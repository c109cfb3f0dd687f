use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("rate at index {0} must be positive and finite")]
    NonPositiveRate(usize),
    #[error("a[0] must be 0 (got {0})")]
    NonzeroA0(f64),
    #[error("level cap {0} is below the minimum of 3")]
    CapTooSmall(usize),
    #[error("rate sequences have length {len}, need at least cap = {cap}")]
    SequenceTooShort { len: usize, cap: usize },
    #[error("scale increments are not summable within the level cap")]
    TailDivergent,
    #[error("state embedding needs a finite c_inf")]
    InfiniteScale,
    #[error("atom at {location} lies below the lowest stored level {lowest}")]
    AtomBelowTruncation { location: f64, lowest: f64 },
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("invalid Feller parameters: {0}")]
    InvalidFellerParams(String),
    #[error("invalid chain parameters: {0}")]
    InvalidChainParams(String),
    #[error("singular tridiagonal system at row {0}")]
    SingularSystem(usize),
    #[error("resolvent denominator vanishes (gamma = beta = |nu| = 0)")]
    ZeroDenominator,
    #[error("quadrature did not converge on [{a}, {b}] (error estimate {err:e})")]
    QuadratureNotConverged { a: f64, b: f64, err: f64 },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("tail extrapolation did not converge: {0}")]
    TailNotConverged(String),
    #[error("local-time bandwidth {eps} is below sqrt(dt) = {min}")]
    BandwidthTooSmall { eps: f64, min: f64 },
    #[error("invalid simulation config: {0}")]
    InvalidSimConfig(String),
    #[error("unsupported regime: {0}")]
    RegimeMismatch(String),
    #[error("trace value {value} at step {step} is not near any level")]
    SnapFailure { step: usize, value: f64 },
    #[error("ledger levels do not match the embedding: {0}")]
    LevelMismatch(String),
    #[error("surgery schedule is not interleaved at entry {0}")]
    ScheduleOrderViolation(usize),
    #[error("estimates disagree across levels: {0}")]
    InconsistentEstimates(String),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("degenerate measure: {0}")]
    DegenerateMeasure(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
