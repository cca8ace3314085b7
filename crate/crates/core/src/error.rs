use std::io;

use crate::backend::TraceeState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot spawn {path}: {reason}")]
    Spawn { path: String, reason: String },

    #[error("operation not permitted: {0}")]
    Permission(String),

    #[error("no such process: {0}")]
    NoSuchProcess(i32),

    #[error("no such thread: {0}")]
    NoSuchThread(i32),

    #[error("{op} is not valid while the tracee is {state:?}")]
    InvalidState { op: &'static str, state: TraceeState },

    #[error("cannot access tracee memory at {addr:#x}")]
    MemoryAccess { addr: u64 },

    #[error("tracee vanished: {0}")]
    ProcessLost(String),

    #[error("unsupported target: {0}")]
    UnsupportedTarget(String),

    #[error("malformed maps line: {line:?}")]
    MapParse { line: String },

    #[error("malformed ELF at offset {offset:#x}: {cause}")]
    ElfParse { offset: u64, cause: &'static str },

    #[error("symbol not found: {0}")]
    SymbolNotFound(String),

    #[error("symbol {name} is defined in several objects: {candidates:?}")]
    AmbiguousSymbol { name: String, candidates: Vec<String> },

    #[error("{addr:#x} is not inside an executable mapping")]
    BadLocation { addr: u64 },

    #[error("an enabled breakpoint already exists at {addr:#x}")]
    DuplicateTrap { addr: u64 },

    #[error("no free hardware debug slot")]
    NoFreeSlot,

    #[error("watchpoint at {addr:#x} with length {len} is misaligned or has an invalid length")]
    Alignment { addr: u64, len: usize },

    #[error("no breakpoint or watchpoint with id {0}")]
    NoSuchTrap(u64),

    #[error("unknown syscall: {0}")]
    UnknownSyscall(String),

    #[error("{0} called outside the syscall handler it belongs to")]
    InvalidContext(&'static str),

    #[error("fault rule conflict: {0}")]
    RuleConflict(String),

    #[error("signal policy error: {0}")]
    Policy(String),

    #[error("end of stream")]
    EndOfStream,

    #[error("callback failed: {0}")]
    Callback(Box<dyn std::error::Error + Send + Sync>),

    #[error("os error during {op}: {errno}")]
    Os { op: &'static str, errno: nix::errno::Errno },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn os(op: &'static str, errno: nix::errno::Errno) -> Self {
        match errno {
            nix::errno::Errno::EPERM => Error::Permission(format!("{op}: {errno}")),
            _ => Error::Os { op, errno },
        }
    }

    /// Wraps an arbitrary error raised inside a user callback.
    pub fn callback<E>(err: E) -> Self
    where
        E: Into<Box<dyn std::error::Error + Send + Sync>>,
    {
        Error::Callback(err.into())
    }
}
