use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rate function: {0}")]
    InvalidRateFunction(String),

    #[error("invalid jump kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("fugacity {lambda} out of range: {reason}")]
    FugacityOutOfRange { lambda: f64, reason: String },

    #[error("series diverges at fugacity {lambda}")]
    SeriesDiverges { lambda: f64 },

    #[error("critical density is infinite; operation requires a finite critical density")]
    CriticalDensityInfinite,

    #[error("density {rho} outside flux domain [0, {max}]")]
    DensityOutOfRange { rho: f64, max: f64 },

    #[error("window too small: {0}")]
    WindowTooSmall(String),

    #[error("observable touches site {site} outside the window")]
    ObservableOutsideWindow { site: i64 },

    #[error("infinite occupancy in range: {0}")]
    InfiniteOccupancy(String),

    #[error("open segment profile is not positive recurrent (first violation at {site})")]
    NotRecurrent { site: i64 },

    #[error("marginal parameter {param} at site {site} too close to 1")]
    MarginalAtCapacity { site: i64, param: f64 },

    #[error("invalid blueprint: {0}")]
    InvalidBlueprint(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("scenario parse error: {0}")]
    ScenarioParse(String),

    #[error("trackers attached to different event streams")]
    StreamMismatch,

    #[error("run inadmissible: {0}")]
    Inadmissible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
