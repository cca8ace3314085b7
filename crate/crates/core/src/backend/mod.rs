//! Lowest layer: the operating system's native debug interface.
//!
//! [`Backend`] is the transport-neutral contract the engine drives. The only
//! implementation today is [`PtraceBackend`]; a remote stub transport would
//! implement the same trait.

mod ptrace;

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::{ChildStderr, ChildStdin, ChildStdout};

pub use self::ptrace::PtraceBackend;

use crate::arch::Arch;
use crate::error::{Error, Result};
use crate::process::RegisterFile;

/// OS thread id. The thread group leader's tid equals the process id.
pub type Tid = i32;

/// Environment variable that keeps ASLR enabled for spawned tracees.
pub const KEEP_ASLR_ENV: &str = "SCRIPTDBG_KEEP_ASLR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceeState {
    Created,
    Stopped,
    Running,
    Exited,
    Killed,
    /// The tracer let go of the process; the handle is inert.
    Detached,
}

impl TraceeState {
    /// Edges of the lifecycle graph.
    pub fn can_transition(self, to: TraceeState) -> bool {
        use TraceeState::*;
        matches!(
            (self, to),
            (Created, Stopped)
                | (Created, Killed)
                | (Stopped, Running)
                | (Running, Stopped)
                | (Stopped, Exited)
                | (Running, Exited)
                | (Stopped, Killed)
                | (Running, Killed)
                | (Stopped, Detached)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TraceeState::Exited | TraceeState::Killed | TraceeState::Detached)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitStatus {
    Code(i32),
    Signaled(i32),
}

impl ExitStatus {
    /// Shell-style status: the exit code, or 128 + signal number.
    pub fn as_shell_code(self) -> i32 {
        match self {
            ExitStatus::Code(c) => c,
            ExitStatus::Signaled(s) => 128 + s,
        }
    }
}

/// Process-level view of a tracee.
#[derive(Debug, Clone)]
pub struct TraceeHandle {
    pub pid: i32,
    /// Ordered set of traced thread ids; `tids[0] == pid` for spawned tracees.
    pub tids: Vec<Tid>,
    pub arch: Arch,
    pub state: TraceeState,
    pub exit: Option<ExitStatus>,
    pub aslr_disabled: bool,
}

impl TraceeHandle {
    pub(crate) fn new(pid: i32, arch: Arch, aslr_disabled: bool) -> Self {
        TraceeHandle { pid, tids: vec![pid], arch, state: TraceeState::Created, exit: None, aslr_disabled }
    }

    pub(crate) fn set_state(&mut self, to: TraceeState) {
        assert!(self.state.can_transition(to), "illegal lifecycle transition {:?} -> {:?}", self.state, to);
        self.state = to;
    }

    pub(crate) fn require(&self, op: &'static str, allowed: &[TraceeState]) -> Result<()> {
        if allowed.contains(&self.state) {
            Ok(())
        } else {
            Err(Error::InvalidState { op, state: self.state })
        }
    }

    pub fn has_thread(&self, tid: Tid) -> bool {
        self.tids.contains(&tid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopCause {
    Signal(i32),
    SyscallTrap,
    Exec,
    Clone(Tid),
    Exit(ExitStatus),
    Step,
}

/// A decoded native stop notification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawStopNotice {
    pub tid: Tid,
    pub cause: StopCause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResumeMode {
    Continue,
    SyscallStop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StdioMode {
    Pipe,
    Inherit,
    Null,
}

#[derive(Debug, Clone)]
pub struct SpawnOptions {
    pub path: PathBuf,
    pub args: Vec<String>,
    /// `None` inherits the tracer's environment.
    pub env: Option<HashMap<String, String>>,
    pub stdio: StdioMode,
    pub disable_aslr: bool,
}

impl SpawnOptions {
    /// Defaults: inherited environment, piped stdio, ASLR disabled unless
    /// `SCRIPTDBG_KEEP_ASLR=1` is set.
    pub fn new(path: impl Into<PathBuf>) -> Self {
        SpawnOptions {
            path: path.into(),
            args: Vec::new(),
            env: None,
            stdio: StdioMode::Pipe,
            disable_aslr: std::env::var(KEEP_ASLR_ENV).map_or(true, |v| v != "1"),
        }
    }

    pub fn args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.args = args.into_iter().map(Into::into).collect();
        self
    }

    pub fn env(mut self, env: HashMap<String, String>) -> Self {
        self.env = Some(env);
        self
    }

    pub fn stdio(mut self, stdio: StdioMode) -> Self {
        self.stdio = stdio;
        self
    }

    pub fn disable_aslr(mut self, disable: bool) -> Self {
        self.disable_aslr = disable;
        self
    }
}

/// Pipes connected to a tracee spawned with [`StdioMode::Pipe`].
#[derive(Debug)]
pub struct StdioPipes {
    pub stdin: ChildStdin,
    pub stdout: ChildStdout,
    pub stderr: ChildStderr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SigInfo {
    pub signo: i32,
    pub code: i32,
    pub addr: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HwKind {
    Execute,
    Write,
    ReadWrite,
}

/// Configuration of one hardware debug slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HwTrap {
    pub addr: u64,
    pub len: usize,
    pub kind: HwKind,
}

/// Transport-neutral debug interface.
///
/// Implementations follow an all-stop model: when [`Backend::wait_notice`]
/// returns, every thread of the tracee is stopped. All calls must come from
/// the thread that created the backend.
pub trait Backend {
    fn handle(&self) -> &TraceeHandle;

    fn read_registers(&mut self, tid: Tid) -> Result<RegisterFile>;
    fn write_registers(&mut self, tid: Tid, regs: &RegisterFile) -> Result<()>;

    /// Fills `buf` from tracee memory. Breakpoint patches are not masked.
    fn read_memory_into(&mut self, addr: u64, buf: &mut [u8]) -> Result<()>;
    fn write_memory(&mut self, addr: u64, data: &[u8]) -> Result<()>;

    fn read_memory(&mut self, addr: u64, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; len];
        self.read_memory_into(addr, &mut buf)?;
        Ok(buf)
    }

    /// Resumes every thread. `deliver` injects signals into individual threads.
    fn resume(&mut self, mode: ResumeMode, deliver: &[(Tid, i32)]) -> Result<()>;
    /// Retires one instruction on `tid` while all other threads stay stopped.
    fn single_step(&mut self, tid: Tid) -> Result<()>;
    fn wait_notice(&mut self) -> Result<RawStopNotice>;

    /// Signal details of the last stop of `tid`.
    fn signal_info(&mut self, tid: Tid) -> Result<SigInfo>;

    fn set_hw_slot(&mut self, tid: Tid, slot: usize, trap: Option<HwTrap>) -> Result<()>;
    /// Slot that caused the last hardware trap on `tid`, clearing the status.
    fn take_hw_hit(&mut self, tid: Tid) -> Result<Option<usize>>;

    /// Releases every thread, delivering the given signals on the way out.
    fn detach(&mut self, deliver: &[(Tid, i32)]) -> Result<()>;
    fn kill(&mut self) -> Result<()>;

    fn take_stdio(&mut self) -> Option<StdioPipes> {
        None
    }
}
