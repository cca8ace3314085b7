//! Tools built on the scriptdbg engine: a syscall tracer, a branch coverage
//! collector, a crash triager and an event-latency benchmark.

pub mod bench;
pub mod coverage;
pub mod cyclic;
pub mod error;
pub mod session;
pub mod trace;
pub mod triage;

pub use error::{Result, ToolError};
pub use session::{RunOptions, Target};
