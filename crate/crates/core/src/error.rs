use thiserror::Error;

use crate::grid::{Domain, TileType};

#[derive(Debug, Error)]
pub enum Error {
    #[error("position ({row}, {col}) is outside the {height}x{width} grid")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("tile {tile:?} is not part of the {domain} alphabet")]
    ForeignTile { tile: TileType, domain: Domain },
    #[error("level text, line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid goal: {0}")]
    InvalidGoal(String),
    #[error("action {action} is outside 0..={max}")]
    InvalidAction { action: usize, max: usize },
    #[error("episode has already terminated")]
    EpisodeTerminated,
    #[error("diversity: {0}")]
    Diversity(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for config {found}, current config hashes to {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Validation failures are the user's to fix; everything else is a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::OutOfBounds { .. }
                | Error::ForeignTile { .. }
                | Error::Parse { .. }
                | Error::Config(_)
                | Error::InvalidGoal(_)
                | Error::InvalidAction { .. }
                | Error::ConfigHashMismatch { .. }
        )
    }
}
