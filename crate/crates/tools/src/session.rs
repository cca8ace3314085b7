//! Shared launch settings for every subcommand.

use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use scriptdbg_core::{Debugger, ExitStatus, SpawnOptions, StdioMode};

use crate::error::{Result, ToolError};

#[derive(Debug, Clone)]
pub struct Target {
    pub path: PathBuf,
    pub args: Vec<String>,
}

impl Target {
    pub fn new<I, S>(path: impl Into<PathBuf>, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Target { path: path.into(), args: args.into_iter().map(Into::into).collect() }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub keep_aslr: bool,
    pub timeout: Option<Duration>,
    pub stdio: StdioMode,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { keep_aslr: false, timeout: None, stdio: StdioMode::Inherit }
    }
}

impl RunOptions {
    pub fn spawn(&self, target: &Target) -> Result<Debugger> {
        self.spawn_with(target, self.stdio)
    }

    pub fn spawn_with(&self, target: &Target, stdio: StdioMode) -> Result<Debugger> {
        let opts = SpawnOptions::new(&target.path)
            .args(target.args.iter().cloned())
            .stdio(stdio)
            .disable_aslr(!self.keep_aslr);
        Ok(Debugger::spawn(opts)?)
    }

    pub fn watchdog(&self, pid: i32) -> Watchdog {
        Watchdog::arm(pid, self.timeout)
    }
}

/// Kills the tracee if it is still alive when the deadline passes.
pub struct Watchdog {
    cancel: Option<mpsc::Sender<()>>,
    fired: Option<thread::JoinHandle<bool>>,
    limit: Option<Duration>,
}

impl Watchdog {
    pub fn arm(pid: i32, limit: Option<Duration>) -> Self {
        let Some(limit) = limit else {
            return Watchdog { cancel: None, fired: None, limit: None };
        };
        let (tx, rx) = mpsc::channel::<()>();
        let fired = thread::spawn(move || match rx.recv_timeout(limit) {
            Err(mpsc::RecvTimeoutError::Timeout) => {
                unsafe { libc::kill(pid, libc::SIGKILL) };
                true
            }
            _ => false,
        });
        Watchdog { cancel: Some(tx), fired: Some(fired), limit: Some(limit) }
    }

    /// Stops the timer; reports a timeout if the tracee had to be killed.
    pub fn disarm(mut self) -> Result<()> {
        self.cancel.take();
        match self.fired.take().map(|h| h.join().unwrap_or(false)) {
            Some(true) => Err(ToolError::Timeout(self.limit.unwrap_or_default())),
            _ => Ok(()),
        }
    }
}

impl Drop for Watchdog {
    fn drop(&mut self) {
        self.cancel.take();
        if let Some(h) = self.fired.take() {
            let _ = h.join();
        }
    }
}

/// Shell-style exit code of a finished tracee.
pub fn exit_code(status: ExitStatus) -> i32 {
    match status {
        ExitStatus::Code(c) => c,
        ExitStatus::Signaled(s) => 128 + s,
    }
}
