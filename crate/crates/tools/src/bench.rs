//! Event-handling latency benchmark with an optional scripted GDB baseline.

use std::cell::Cell;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::rc::Rc;
use std::time::Instant;

use scriptdbg_core::{
    syscall_callback, trap_callback, BreakpointKind, Debugger, Directive, RunOutcome, SpawnOptions, StdioMode,
};

use crate::error::{Result, ToolError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Breakpoint,
    Syscall,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Breakpoint => "breakpoint",
            BenchMode::Syscall => "syscall",
        }
    }

    pub fn fixture(self) -> &'static str {
        match self {
            BenchMode::Breakpoint => "bench_bp",
            BenchMode::Syscall => "bench_sys",
        }
    }

    /// Engine stops expected per traced event.
    pub fn stops_per_event(self) -> u64 {
        match self {
            BenchMode::Breakpoint => 1,
            BenchMode::Syscall => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub mode: BenchMode,
    pub events: u64,
    pub runs: usize,
    pub fixture_dir: PathBuf,
    pub compare_gdb: bool,
    pub gdb: PathBuf,
    /// GDB sessions to time; defaults to `runs`.
    pub gdb_runs: Option<usize>,
    pub keep_aslr: bool,
}

impl BenchConfig {
    pub fn new(mode: BenchMode, events: u64, runs: usize) -> Self {
        BenchConfig {
            mode,
            events,
            runs,
            fixture_dir: scriptdbg_fixtures::dir().to_path_buf(),
            compare_gdb: false,
            gdb: PathBuf::from("gdb"),
            gdb_runs: None,
            keep_aslr: false,
        }
    }

    pub fn fixture_path(&self) -> Result<PathBuf> {
        let p = self.fixture_dir.join(self.mode.fixture());
        if p.is_file() {
            Ok(p)
        } else {
            Err(ToolError::Fixture(p))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
    pub mean_ns: f64,
}

impl Stats {
    /// For an even count the median is the mean of the two middle values,
    /// rounded down. Percentiles use the nearest-rank method.
    pub fn compute(times: &[u64]) -> Option<Stats> {
        if times.is_empty() {
            return None;
        }
        let mut v = times.to_vec();
        v.sort_unstable();
        let n = v.len();
        let median_ns = if n % 2 == 1 { v[n / 2] } else { ((v[n / 2 - 1] as u128 + v[n / 2] as u128) / 2) as u64 };
        let rank = |p: u64| v[((p as usize * n).div_ceil(100)).max(1) - 1];
        let sum: u128 = v.iter().map(|&t| t as u128).sum();
        Some(Stats { median_ns, p10_ns: rank(10), p90_ns: rank(90), mean_ns: sum as f64 / n as f64 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdbComparison {
    pub times_ns: Vec<u64>,
    pub stats: Stats,
    /// GDB median over engine median.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub mode: BenchMode,
    pub events_per_run: u64,
    pub runs: usize,
    pub times_ns: Vec<u64>,
    /// Stops counted by the callbacks over all runs.
    pub observed_stops: u64,
    pub stats: Stats,
    pub gdb: Option<GdbComparison>,
    pub warnings: Vec<String>,
}

/// Times one run from first resume to exit.
fn one_run(cfg: &BenchConfig, fixture: &Path) -> Result<(u64, u64)> {
    let opts =
        SpawnOptions::new(fixture).args([cfg.events.to_string()]).stdio(StdioMode::Null).disable_aslr(!cfg.keep_aslr);
    let mut dbg = Debugger::spawn(opts)?;
    dbg.set_event_log(false);
    let count = Rc::new(Cell::new(0u64));
    match cfg.mode {
        BenchMode::Breakpoint => {
            let c = count.clone();
            dbg.set_breakpoint(
                "target_fn",
                BreakpointKind::Software,
                false,
                Some(trap_callback(move |_, _| {
                    c.set(c.get() + 1);
                    Ok(Directive::Continue)
                })),
            )?;
        }
        BenchMode::Syscall => {
            let (a, b) = (count.clone(), count.clone());
            dbg.trace_syscalls(
                "getppid",
                Some(syscall_callback(move |_, _| {
                    a.set(a.get() + 1);
                    Ok(Directive::Continue)
                })),
                Some(syscall_callback(move |_, _| {
                    b.set(b.get() + 1);
                    Ok(Directive::Continue)
                })),
            )?;
        }
    }
    let start = Instant::now();
    let outcome = dbg.run_until_exit()?;
    let elapsed = start.elapsed().as_nanos() as u64;
    if !matches!(outcome, RunOutcome::Exited(_)) {
        return Err(ToolError::Bench(format!("unexpected stop: {outcome:?}")));
    }
    Ok((elapsed, count.get()))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    let fixture = cfg.fixture_path()?;
    let mut times = Vec::with_capacity(cfg.runs);
    let mut observed = 0;
    let expected = cfg.events * cfg.mode.stops_per_event();
    for run in 0..cfg.runs {
        let (ns, stops) = one_run(cfg, &fixture)?;
        if stops != expected {
            return Err(ToolError::Bench(format!("run {run}: counted {stops} stops, expected {expected}")));
        }
        times.push(ns);
        observed += stops;
    }
    let stats = Stats::compute(&times).unwrap_or(Stats { median_ns: 0, p10_ns: 0, p90_ns: 0, mean_ns: 0.0 });
    let mut warnings = Vec::new();
    let gdb = if cfg.compare_gdb {
        match gdb_times(cfg, &fixture) {
            Ok(t) => Stats::compute(&t).map(|g| GdbComparison {
                ratio: g.median_ns as f64 / stats.median_ns.max(1) as f64,
                times_ns: t,
                stats: g,
            }),
            Err(e) => {
                warnings.push(format!("GDB comparison skipped: {e}"));
                None
            }
        }
    } else {
        None
    };
    Ok(BenchResult {
        mode: cfg.mode,
        events_per_run: cfg.events,
        runs: cfg.runs,
        times_ns: times,
        observed_stops: observed,
        stats,
        gdb,
        warnings,
    })
}

/// GDB command file: quiet settings, a silent auto-continuing stop per event,
/// and timestamps taken from the first resume to exit.
pub fn gdb_script(mode: BenchMode) -> String {
    let mut s = String::new();
    for setting in [
        "set pagination off",
        "set confirm off",
        "set verbose off",
        "set print thread-events off",
        "set print inferior-events off",
        "set startup-with-shell off",
        "set disable-randomization on",
        "set debuginfod enabled off",
        "set auto-load off",
    ] {
        s.push_str(setting);
        s.push('\n');
    }
    match mode {
        BenchMode::Breakpoint => s.push_str("break target_fn\n"),
        BenchMode::Syscall => s.push_str("catch syscall getppid\n"),
    }
    s.push_str("commands\nsilent\ncontinue\nend\n");
    s.push_str("starti\n");
    s.push_str("python import time; t0 = time.monotonic_ns()\n");
    s.push_str("continue\n");
    s.push_str("python print('elapsed_ns=%d' % (time.monotonic_ns() - t0))\n");
    s.push_str("quit\n");
    s
}

fn gdb_times(cfg: &BenchConfig, fixture: &Path) -> Result<Vec<u64>> {
    let mut script = tempfile::Builder::new().suffix(".gdb").tempfile()?;
    script.write_all(gdb_script(cfg.mode).as_bytes())?;
    script.flush()?;
    let runs = cfg.gdb_runs.unwrap_or(cfg.runs);
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let out = Command::new(&cfg.gdb)
            .args(["-q", "-nx", "-batch", "-x"])
            .arg(script.path())
            .arg("--args")
            .arg(fixture)
            .arg(cfg.events.to_string())
            .stdin(Stdio::null())
            .output()
            .map_err(|e| ToolError::Gdb(format!("cannot run {}: {e}", cfg.gdb.display())))?;
        let text = String::from_utf8_lossy(&out.stdout);
        let ns = text.lines().find_map(|l| l.trim().strip_prefix("elapsed_ns=")?.parse().ok()).ok_or_else(|| {
            ToolError::Gdb(format!("no timing in GDB output: {}", String::from_utf8_lossy(&out.stderr)))
        })?;
        times.push(ns);
    }
    Ok(times)
}

impl BenchResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["run", "wall_ns"])?;
        for (i, t) in self.times_ns.iter().enumerate() {
            w.write_record([i.to_string(), t.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn stats_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode={}", self.mode.name());
        let _ = writeln!(s, "events_per_run={}", self.events_per_run);
        let _ = writeln!(s, "runs={}", self.runs);
        let _ = writeln!(s, "observed_stops={}", self.observed_stops);
        let _ = writeln!(s, "median_ns={}", self.stats.median_ns);
        let _ = writeln!(s, "p10_ns={}", self.stats.p10_ns);
        let _ = writeln!(s, "p90_ns={}", self.stats.p90_ns);
        let _ = writeln!(s, "mean_ns={}", self.stats.mean_ns);
        if let Some(g) = &self.gdb {
            let _ = writeln!(s, "gdb_median_ns={}", g.stats.median_ns);
            let _ = writeln!(s, "gdb_p10_ns={}", g.stats.p10_ns);
            let _ = writeln!(s, "gdb_p90_ns={}", g.stats.p90_ns);
            let _ = writeln!(s, "gdb_mean_ns={}", g.stats.mean_ns);
            let _ = writeln!(s, "ratio={}", g.ratio);
        }
        s
    }

    /// Writes the CSV at `path` and the stats sidecar at `<path>.stats`.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        self.write_csv(path)?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".stats");
        let sidecar = PathBuf::from(sidecar);
        std::fs::write(&sidecar, self.stats_text())?;
        Ok(sidecar)
    }
}

/// Reads back a CSV written by [`BenchResult::write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<u64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let t = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| {
            ToolError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad row {rec:?}")))
        })?;
        out.push(t);
    }
    Ok(out)
}
