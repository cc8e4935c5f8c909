use std::fmt;

use serde::{Deserialize, Serialize};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why a single ray could not be traced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RayFailure {
    Miss,
    TotalInternalReflection,
    SingularSurface,
    NoHit,
    OffPlane,
}

impl fmt::Display for RayFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RayFailure::Miss => "ray misses the cover",
            RayFailure::TotalInternalReflection => "total internal reflection",
            RayFailure::SingularSurface => "singular surface normal",
            RayFailure::NoHit => "ray does not hit the board plane",
            RayFailure::OffPlane => "point is off the board plane",
        })
    }
}

/// Stage of the forward raycast at which a ray failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    InnerIntersection,
    InnerRefraction,
    OuterIntersection,
    OuterRefraction,
    Board,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::InnerIntersection => "inner intersection",
            Stage::InnerRefraction => "inner refraction",
            Stage::OuterIntersection => "outer intersection",
            Stage::OuterRefraction => "outer refraction",
            Stage::Board => "board",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceError {
    pub stage: Stage,
    pub failure: RayFailure,
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.failure, self.stage)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("coordinate out of range: {0}")]
    OutOfRange(String),

    #[error("singular surface: {0}")]
    SingularSurface(String),

    #[error("{0}")]
    RayFailure(RayFailure),

    #[error("{trace} (image {image:?}, pixel ({:.3}, {:.3}))", pixel[0], pixel[1])]
    Ray {
        image: Option<usize>,
        pixel: [f64; 2],
        trace: TraceError,
    },

    #[error("unusable data: {0}")]
    UnusableData(String),

    #[error("optimization diverged at iteration {iteration}")]
    Divergence {
        iteration: usize,
        /// Parameters of the last iterate with a finite loss.
        last_stable: Vec<f64>,
    },

    #[error("corner ({:.6}, {:.6}) m could not be projected: {reason}", board_local[0], board_local[1])]
    Unprojectable { board_local: [f64; 2], reason: String },

    #[error("pose sampler infeasible after {attempts} attempts")]
    InfeasibleSampler { attempts: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

impl From<RayFailure> for Error {
    fn from(f: RayFailure) -> Self {
        Error::RayFailure(f)
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
