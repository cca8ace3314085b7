//! A scriptable debugger engine for Linux userland processes.
//!
//! ```no_run
//! use scriptdbg_core::{Debugger, Directive, RunOutcome};
//!
//! let mut dbg = Debugger::launch("/bin/true", Vec::<String>::new())?;
//! dbg.breakpoint_with("main", |dbg, ctx| {
//!     println!("main at {:#x}, rsp={:#x}", ctx.pc(), ctx.regs.sp());
//!     let _ = dbg.backtrace(ctx.tid, 16)?;
//!     Ok(Directive::Continue)
//! })?;
//! assert!(matches!(dbg.run_until_exit()?, RunOutcome::Exited(_)));
//! # Ok::<(), scriptdbg_core::Error>(())
//! ```

pub mod arch;
pub mod backend;
pub mod breakpoints;
pub mod error;
pub mod events;
pub mod process;
pub mod symbols;
pub mod syscalls;

pub use arch::{Arch, Role};
pub use backend::{ExitStatus, SpawnOptions, StdioMode, Tid, TraceeState};
pub use breakpoints::{BreakpointKind, Location, TrapId, WatchTrigger};
pub use error::{Error, Result};
pub use events::{
    syscall_callback, trap_callback, DebugEvent, Debugger, Direction, Directive, Disposition, FaultRule, Nth,
    RunOutcome, SignalAction, SignalPolicy, StdioChannels, SyscallRecord, SyscallSelector,
};
pub use process::{MemoryMap, RegisterFile, StopReason, ThreadContext};
