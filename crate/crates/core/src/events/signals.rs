use std::collections::HashMap;
use std::fmt;

use super::SignalCallback;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Pass,
    Suppress,
}

pub enum SignalAction {
    Pass,
    Suppress,
    /// Run the handler, then deliver or drop the signal.
    Callback(SignalCallback, Disposition),
}

impl fmt::Debug for SignalAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalAction::Pass => f.write_str("Pass"),
            SignalAction::Suppress => f.write_str("Suppress"),
            SignalAction::Callback(_, then) => write!(f, "Callback(.., {then:?})"),
        }
    }
}

/// Per-signal actions. Signals without an entry are passed to the tracee.
#[derive(Debug, Default)]
pub struct SignalPolicy {
    actions: HashMap<i32, SignalAction>,
}

impl SignalPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, signo: i32, action: SignalAction) -> Result<()> {
        if signo == libc::SIGKILL || signo == libc::SIGSTOP {
            return Err(Error::Policy(format!("signal {signo} cannot be intercepted")));
        }
        if !(1..=64).contains(&signo) {
            return Err(Error::Policy(format!("{signo} is not a signal number")));
        }
        self.actions.insert(signo, action);
        Ok(())
    }

    pub fn with(mut self, signo: i32, action: SignalAction) -> Result<Self> {
        self.set(signo, action)?;
        Ok(self)
    }

    pub fn remove(&mut self, signo: i32) {
        self.actions.remove(&signo);
    }

    pub(crate) fn take(&mut self, signo: i32) -> Option<SignalAction> {
        self.actions.remove(&signo)
    }

    pub(crate) fn restore(&mut self, signo: i32, action: SignalAction) {
        self.actions.entry(signo).or_insert(action);
    }

    pub fn action_kind(&self, signo: i32) -> Disposition {
        match self.actions.get(&signo) {
            Some(SignalAction::Suppress) | Some(SignalAction::Callback(_, Disposition::Suppress)) => {
                Disposition::Suppress
            }
            _ => Disposition::Pass,
        }
    }
}
