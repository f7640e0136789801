use crate::calib::RankDiagnosis;
use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage, used to tag errors surfaced by the experiment runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Simulate,
    Reconstruct,
    Register,
    Calibrate,
    Report,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Simulate => "simulate",
            Stage::Reconstruct => "reconstruct",
            Stage::Register => "register",
            Stage::Calibrate => "calibrate",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate rotation: angle {angle:e} rad is too small to define an axis")]
    DegenerateRotation { angle: f64 },

    #[error("frame mismatch: expected \"{expected}\", found \"{found}\"")]
    FrameMismatch { expected: String, found: String },

    #[error("{}parse error at line {line}: {message}", path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        message: String,
    },

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("coarse alignment failed: best inlier fraction {best_inlier_fraction:.3}")]
    CoarseAlignmentFailed { best_inlier_fraction: f64 },

    #[error("registration failed: {0}")]
    RegistrationFailed(String),

    #[error("rank condition not met: {0}")]
    RankCondition(RankDiagnosis),

    #[error("singular system: {0}")]
    SingularSystem(RankDiagnosis),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}", path = path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: None,
            line,
            message: message.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// True when the root cause is a failed observability (rank) condition.
    pub fn is_rank_condition(&self) -> bool {
        match self {
            Error::RankCondition(_) | Error::SingularSystem(_) => true,
            Error::Stage { source, .. } => source.is_rank_condition(),
            _ => false,
        }
    }

    /// Attaches a file path to a parse error.
    pub(crate) fn with_path(self, p: &std::path::Path) -> Self {
        match self {
            Error::Parse { line, message, .. } => Error::Parse {
                path: Some(p.to_path_buf()),
                line,
                message,
            },
            e => e,
        }
    }
}
