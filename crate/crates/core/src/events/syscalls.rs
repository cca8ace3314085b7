use std::collections::BTreeSet;
use std::fmt;

use crate::arch::Arch;
use crate::backend::Tid;
use crate::error::{Error, Result};
use crate::syscalls::SyscallTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Enter,
    Exit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyscallRecord {
    pub tid: Tid,
    pub nr: u64,
    pub name: String,
    pub args: [u64; 6],
    /// Return value; present on exit records only.
    pub ret: Option<i64>,
    pub direction: Direction,
    pub seq: u64,
    /// The call was replaced by a fault rule.
    pub injected: bool,
}

impl SyscallRecord {
    /// `name(0x1, 0x2, ...) = 0x3` as printed by the trace tool.
    pub fn format_line(&self) -> String {
        let args: Vec<String> = self.args.iter().map(|a| format!("{a:#x}")).collect();
        let mut line = format!("{} {}({})", self.tid, self.name, args.join(", "));
        if let Some(ret) = self.ret {
            line.push_str(" = ");
            line.push_str(&format_ret(ret));
        }
        line
    }
}

pub fn format_ret(ret: i64) -> String {
    if ret < 0 {
        format!("-{:#x}", ret.unsigned_abs())
    } else {
        format!("{ret:#x}")
    }
}

impl fmt::Display for SyscallRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.format_line())
    }
}

/// Which syscalls a subscription or rule applies to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyscallSelector {
    All,
    /// Names or decimal numbers.
    Set(Vec<String>),
}

impl SyscallSelector {
    pub fn names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        SyscallSelector::Set(names.into_iter().map(Into::into).collect())
    }

    pub(crate) fn resolve(&self, arch: Arch) -> Result<Option<BTreeSet<u64>>> {
        match self {
            SyscallSelector::All => Ok(None),
            SyscallSelector::Set(names) => {
                let table = SyscallTable::for_arch(arch);
                names.iter().map(|n| table.resolve(n)).collect::<Result<_>>().map(Some)
            }
        }
    }
}

impl From<&str> for SyscallSelector {
    fn from(name: &str) -> Self {
        SyscallSelector::Set(vec![name.to_string()])
    }
}

/// Which matching occurrences a fault rule fires on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nth {
    /// 1-based occurrence index.
    Occurrence(u64),
    All,
}

pub type ArgsPredicate = Box<dyn Fn(&[u64; 6]) -> bool>;

pub struct FaultRule {
    pub syscall: String,
    pub nth: Nth,
    pub errno: i32,
    pub predicate: Option<ArgsPredicate>,
}

impl FaultRule {
    pub fn new(syscall: impl Into<String>, nth: Nth, errno: i32) -> Self {
        FaultRule { syscall: syscall.into(), nth, errno, predicate: None }
    }

    /// Only calls whose arguments satisfy `pred` count as matches.
    pub fn when(mut self, pred: impl Fn(&[u64; 6]) -> bool + 'static) -> Self {
        self.predicate = Some(Box::new(pred));
        self
    }
}

impl fmt::Debug for FaultRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FaultRule")
            .field("syscall", &self.syscall)
            .field("nth", &self.nth)
            .field("errno", &self.errno)
            .field("predicate", &self.predicate.is_some())
            .finish()
    }
}

/// Installed rule state.
pub(crate) struct ActiveRule {
    pub id: u64,
    pub nr: u64,
    pub rule: FaultRule,
    pub matched: u64,
    pub fired: u64,
    pub consumed: bool,
}

impl ActiveRule {
    pub fn conflicts_with(&self, nr: u64, rule: &FaultRule) -> bool {
        if self.nr != nr || self.consumed || self.rule.predicate.is_some() || rule.predicate.is_some() {
            return false;
        }
        match (self.rule.nth, rule.nth) {
            (Nth::All, _) | (_, Nth::All) => true,
            (Nth::Occurrence(a), Nth::Occurrence(b)) => a == b,
        }
    }

    /// Counts a matching call and reports whether the rule fires on it.
    pub fn observe(&mut self, nr: u64, args: &[u64; 6]) -> bool {
        if self.consumed || self.nr != nr || !self.rule.predicate.as_ref().is_none_or(|p| p(args)) {
            return false;
        }
        self.matched += 1;
        let fires = match self.rule.nth {
            Nth::All => true,
            Nth::Occurrence(n) => {
                if self.matched == n {
                    self.consumed = true;
                }
                self.matched == n
            }
        };
        if fires {
            self.fired += 1;
        }
        fires
    }
}

pub(crate) fn validate(rule: &FaultRule) -> Result<()> {
    if rule.errno <= 0 || rule.errno > 4095 {
        return Err(Error::RuleConflict(format!("errno {} does not describe a failure", rule.errno)));
    }
    if rule.nth == Nth::Occurrence(0) {
        return Err(Error::RuleConflict("occurrences are counted from 1".into()));
    }
    Ok(())
}

/// Public view of an installed fault rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultRuleStatus {
    pub id: u64,
    pub nr: u64,
    pub matched: u64,
    pub fired: u64,
    pub consumed: bool,
}
