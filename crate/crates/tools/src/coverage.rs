//! Branch coverage from one-shot breakpoints on branch targets.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::rc::Rc;

use scriptdbg_core::{trap_callback, BreakpointKind, Directive, ExitStatus, RunOutcome};

use crate::error::{Result, ToolError};
use crate::session::{RunOptions, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSpec {
    pub branch_addr: u64,
    pub taken_target: u64,
    pub fallthrough_target: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BranchOutcome {
    pub taken_hit: bool,
    pub fallthrough_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoverageReport {
    /// Keyed by branch address.
    pub branches: BTreeMap<u64, BranchOutcome>,
}

fn parse_hex(field: &str) -> Option<u64> {
    let digits = field.strip_prefix("0x").or_else(|| field.strip_prefix("0X")).unwrap_or(field);
    u64::from_str_radix(digits, 16).ok()
}

/// Parses `<branch> <taken> <fallthrough>` lines; `#` starts a comment.
pub fn parse_branch_map(text: &str) -> Result<Vec<BranchSpec>> {
    let mut specs = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: &str| ToolError::MapFormat { line: i + 1, reason: reason.to_string() };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err("expected three hex addresses"));
        }
        let addrs: Vec<u64> =
            fields.iter().map(|f| parse_hex(f)).collect::<Option<_>>().ok_or_else(|| err("bad hex address"))?;
        let spec = BranchSpec { branch_addr: addrs[0], taken_target: addrs[1], fallthrough_target: addrs[2] };
        if spec.taken_target == spec.fallthrough_target {
            return Err(err("taken and fallthrough targets are equal"));
        }
        if !seen.insert(spec.branch_addr) {
            return Err(err("branch listed twice"));
        }
        specs.push(spec);
    }
    Ok(specs)
}

impl CoverageReport {
    pub fn empty(specs: &[BranchSpec]) -> Self {
        CoverageReport { branches: specs.iter().map(|s| (s.branch_addr, BranchOutcome::default())).collect() }
    }

    pub fn covered_outcomes(&self) -> usize {
        self.branches.values().map(|o| o.taken_hit as usize + o.fallthrough_hit as usize).sum()
    }

    /// Covered outcomes over all outcomes; 1.0 when there are no branches.
    pub fn branch_coverage(&self) -> f64 {
        if self.branches.is_empty() {
            return 1.0;
        }
        self.covered_outcomes() as f64 / (2 * self.branches.len()) as f64
    }

    /// Union of both reports.
    pub fn merge(&mut self, other: &CoverageReport) {
        for (addr, o) in &other.branches {
            let mine = self.branches.entry(*addr).or_default();
            mine.taken_hit |= o.taken_hit;
            mine.fallthrough_hit |= o.fallthrough_hit;
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (addr, o) in &self.branches {
            let _ = writeln!(out, "{addr:#x} taken={} fallthrough={}", o.taken_hit as u8, o.fallthrough_hit as u8);
        }
        let _ = writeln!(out, "coverage={}", self.branch_coverage());
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = CoverageReport::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("coverage=") {
                continue;
            }
            let err = || ToolError::ReportFormat { line: i + 1, reason: line.to_string() };
            let mut it = line.split_whitespace();
            let addr = it.next().and_then(parse_hex).ok_or_else(err)?;
            let flag = |f: Option<&str>, key: &str| match f.and_then(|f| f.strip_prefix(key)) {
                Some("0") => Ok(false),
                Some("1") => Ok(true),
                _ => Err(err()),
            };
            let taken_hit = flag(it.next(), "taken=")?;
            let fallthrough_hit = flag(it.next(), "fallthrough=")?;
            report.branches.insert(addr, BranchOutcome { taken_hit, fallthrough_hit });
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Taken,
    Fallthrough,
}

/// Runs `target` once and reports which branch outcomes were reached.
pub fn run_coverage(target: &Target, specs: &[BranchSpec], opts: &RunOptions) -> Result<(CoverageReport, ExitStatus)> {
    let mut dbg = opts.spawn(target)?;
    let report = Rc::new(RefCell::new(CoverageReport::empty(specs)));
    let mut by_target: BTreeMap<u64, Vec<(u64, Side)>> = BTreeMap::new();
    for s in specs {
        by_target.entry(s.taken_target).or_default().push((s.branch_addr, Side::Taken));
        by_target.entry(s.fallthrough_target).or_default().push((s.branch_addr, Side::Fallthrough));
    }
    for (addr, outcomes) in by_target {
        let sink = report.clone();
        dbg.set_breakpoint(
            addr,
            BreakpointKind::Software,
            true,
            Some(trap_callback(move |_, _| {
                let mut r = sink.borrow_mut();
                for (branch, side) in &outcomes {
                    let o = r.branches.entry(*branch).or_default();
                    match side {
                        Side::Taken => o.taken_hit = true,
                        Side::Fallthrough => o.fallthrough_hit = true,
                    }
                }
                Ok(Directive::Continue)
            })),
        )?;
    }
    let watchdog = opts.watchdog(dbg.pid());
    let status = loop {
        match dbg.run_until_exit()? {
            RunOutcome::Exited(status) => break status,
            RunOutcome::Stopped(_) => continue,
        }
    };
    watchdog.disarm()?;
    let report = report.borrow().clone();
    Ok((report, status))
}
