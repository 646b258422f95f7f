use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("fit error: {0}")]
    Fit(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no root of the OCV curve in [{lo}, {hi}] for {ocv} V")]
    NoRoot { ocv: f64, lo: f64, hi: f64 },
    #[error("only non-physical (decreasing-slope) roots for {ocv} V")]
    NonPhysicalRoot { ocv: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("simulation error: {0}")]
    Simulation(String),
    #[error("filter error: {0}")]
    Filter(String),
    #[error("window error: {0}")]
    Window(String),
    #[error("degenerate three-point geometry: {0}")]
    DegenerateGeometry(String),
    #[error("implausible estimate: {0}")]
    Implausible(String),
    #[error("regression error: {0}")]
    Regression(String),
    #[error("division by zero: {0}")]
    Division(String),
    #[error("iteration diverged: SOH left [0.5, 1.2] at iteration {iteration} (soh = {soh})")]
    Divergence { iteration: usize, soh: f64 },
    #[error("flat OCV curve: dOCV/dSOC = {0}")]
    FlatCurve(f64),
    #[error("singular geometry: A1 + A2 - A3 = 0")]
    SingularGeometry,
    #[error("filter health: {0}")]
    FilterHealth(String),
    #[error("measurement error: {0}")]
    Measurement(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("window {window}: {source}")]
    InWindow { window: usize, source: Box<Error> },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("detection error: {0}")]
    Detection(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("scenario {name}: {source}")]
    Scenario { name: String, source: Box<Error> },
}

pub type Result<T> = std::result::Result<T, Error>;
