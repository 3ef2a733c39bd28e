use crate::graph::RobotId;

/// Error type shared by every module of the kit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("robot {robot} diverged at t={t}: {what}")]
    Divergence {
        robot: RobotId,
        t: usize,
        what: String,
    },

    #[error("locality violation: robot {sender} attempted to send to non-neighbor {receiver}")]
    Locality { sender: RobotId, receiver: RobotId },

    #[error("sensitivity assembly failed for robot {robot} at t={t}: non-finite {block} block")]
    Assembly {
        robot: RobotId,
        t: usize,
        block: String,
    },

    #[error("distributed solve diverged (residual grew {growth:.1}x); try a smaller step size alpha")]
    StepSize { growth: f64 },

    #[error("stale sensitivity: parameters changed since the sensitivity solve")]
    StaleSensitivity,

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("degenerate game: {0}")]
    Degenerate(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
