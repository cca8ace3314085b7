//! Architecture-neutral model of the debuggee: register snapshots, thread
//! contexts and memory maps.

mod maps;
mod registers;

pub use maps::{find_map, parse_maps, read_maps, MemoryMap, Perms};
pub use registers::{syscall_errno, RegisterFile};

use crate::backend::{ExitStatus, Tid};
use crate::breakpoints::TrapId;

/// Why a thread is stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Breakpoint(TrapId),
    Watchpoint(TrapId),
    SyscallEnter { nr: u64 },
    SyscallExit { nr: u64, ret: i64 },
    Signal(i32),
    Step,
    Exited(ExitStatus),
    ThreadCreated(Tid),
}

/// Per-thread stop state. `regs` is only meaningful while the tracee is stopped.
#[derive(Debug, Clone)]
pub struct ThreadContext {
    pub tid: Tid,
    pub stop_reason: Option<StopReason>,
    pub regs: RegisterFile,
    pub in_syscall: bool,
}

impl ThreadContext {
    pub fn pc(&self) -> u64 {
        self.regs.pc()
    }
}
