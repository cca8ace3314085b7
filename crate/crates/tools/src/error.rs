use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error(transparent)]
    Engine(#[from] scriptdbg_core::Error),
    #[error("pattern of {requested} bytes exceeds the capacity of {capacity}")]
    Capacity { requested: usize, capacity: usize },
    #[error("window not found in the cyclic pattern")]
    NotInPattern,
    #[error("branch map line {line}: {reason}")]
    MapFormat { line: usize, reason: String },
    #[error("coverage report line {line}: {reason}")]
    ReportFormat { line: usize, reason: String },
    #[error("the target did not crash")]
    NoCrash,
    #[error("fixture {0} not found")]
    Fixture(PathBuf),
    #[error("timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("{0}")]
    Bench(String),
    #[error("{0}")]
    Gdb(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = ToolError> = std::result::Result<T, E>;
