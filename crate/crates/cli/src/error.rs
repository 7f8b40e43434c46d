use pairforge::counting::CountingError;
use pairforge::lasermodel::LaserError;
use pairforge::layerstack::StackError;
use pairforge::materials::MaterialError;
use pairforge::modesolver::ModeError;
use pairforge::nonlinear::NonlinearError;

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Schema(String),
    Solver(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Schema(_) => 3,
            Failure::Solver(_) => 4,
        }
    }

    /// One line: `error[kind]: message`.
    pub fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Schema(m) => ("schema", m),
            Failure::Solver(m) => ("solver", m),
        };
        let msg = msg.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{kind}]: {msg}")
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Schema(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Schema(e.to_string())
    }
}

impl From<StackError> for Failure {
    fn from(e: StackError) -> Self {
        Failure::Schema(e.to_string())
    }
}

impl From<MaterialError> for Failure {
    fn from(e: MaterialError) -> Self {
        Failure::Schema(e.to_string())
    }
}

impl From<ModeError> for Failure {
    fn from(e: ModeError) -> Self {
        match e {
            ModeError::Stack(s) => s.into(),
            ModeError::Grid(_) => Failure::Schema(e.to_string()),
            other => Failure::Solver(other.to_string()),
        }
    }
}

impl From<NonlinearError> for Failure {
    fn from(e: NonlinearError) -> Self {
        match e {
            NonlinearError::Mode(m) => m.into(),
            NonlinearError::Invalid(_) => Failure::Schema(e.to_string()),
            other => Failure::Solver(other.to_string()),
        }
    }
}

impl From<LaserError> for Failure {
    fn from(e: LaserError) -> Self {
        match e {
            LaserError::Invalid(_) => Failure::Schema(e.to_string()),
            other => Failure::Solver(other.to_string()),
        }
    }
}

impl From<CountingError> for Failure {
    fn from(e: CountingError) -> Self {
        match e {
            CountingError::NegativeSnr(_) => Failure::Usage(e.to_string()),
            CountingError::Invalid(_) | CountingError::Histogram(_) => Failure::Schema(e.to_string()),
        }
    }
}
