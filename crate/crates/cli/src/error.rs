//! Error type with the documented exit-code table.

use std::fmt;

use pumpmap_core::config::ConfigError;
use pumpmap_core::emfield::EmError;
use pumpmap_core::fom::FomError;
use pumpmap_core::grid::GridError;
use pumpmap_core::pipeline::PipelineError;
use pumpmap_core::scene::SceneError;
use pumpmap_core::tracer::TraceError;

#[derive(Debug)]
pub enum CliError {
    /// Exit 2.
    BadArgs(String),
    /// Exit 3.
    Config(String),
    /// Exit 4.
    Io(String),
    /// Exit 5.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BadArgs(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::BadArgs(m) => ("invalid argument", m),
            CliError::Config(m) => ("config error", m),
            CliError::Io(m) => ("I/O error", m),
            CliError::Numeric(m) => ("numerical failure", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            ConfigError::Parse { .. } => CliError::Config(e.to_string()),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::InvalidArgument(_) | TraceError::GridTooSmall(_) => CliError::BadArgs(e.to_string()),
            TraceError::Scene(s) => s.into(),
            TraceError::NoAbsorption => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::Io(_) | GridError::Malformed(_) => CliError::Io(e.to_string()),
            GridError::Invalid(_) => CliError::BadArgs(e.to_string()),
            GridError::RegionEmpty(_) | GridError::NothingToNormalize(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EmError> for CliError {
    fn from(e: EmError) -> Self {
        match e {
            EmError::InvalidSpec(_) => CliError::Config(e.to_string()),
            EmError::MeshTooCoarse(_) => CliError::BadArgs(e.to_string()),
            EmError::Io(_) | EmError::Malformed(_) | EmError::NonAxisymmetric(_) => CliError::Io(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<FomError> for CliError {
    fn from(e: FomError) -> Self {
        match e {
            FomError::MissingConstant(_) | FomError::InvalidConstant(..) => CliError::Config(e.to_string()),
            FomError::Field(f) => f.into(),
            FomError::Grid(g) => g.into(),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Scene(s) => s.into(),
            PipelineError::Trace(t) => t.into(),
            PipelineError::Fom(f) => f.into(),
        }
    }
}
