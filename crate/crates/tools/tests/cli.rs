use std::io::Write;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn scriptdbg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scriptdbg")).args(args).stdin(Stdio::null()).output().unwrap()
}

fn fixture(name: &str) -> String {
    scriptdbg_fixtures::path(name).display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(scriptdbg(&[]).status.code(), Some(2));
    assert_eq!(scriptdbg(&["bench", "--mode", "nope", "--out", "x"]).status.code(), Some(2));
    assert_eq!(scriptdbg(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn trace_propagates_tracee_exit_code() {
    let ok = scriptdbg(&["trace", "-e", "write", &fixture("writes"), "3"]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(ok.stdout, b"hihihi");
    assert_eq!(stderr(&ok).lines().filter(|l| l.ends_with("= 0x2")).count(), 3);
    let failed = scriptdbg(&["trace", &fixture("files"), "read", "/nonexistent/x"]);
    assert_eq!(failed.status.code(), Some(2));
}

#[test]
fn trace_writes_log_file() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("trace.log");
    let o = scriptdbg(&["trace", "-e", "write,exit_group", "-o", log.to_str().unwrap(), &fixture("writes"), "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), 2, "{text}");
}

#[test]
fn unknown_syscall_name_exits_1_without_running() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("made");
    let o = scriptdbg(&["trace", "-e", "openat,bogus_call", &fixture("files"), "create", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("scriptdbg: "), "{}", stderr(&o));
    assert!(!file.exists());
}

#[test]
fn coverage_runs_merge_to_full() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("cov.txt");
    let map = scriptdbg_fixtures::coverage_map();
    let run = |pattern: &str, merge: bool| {
        let mut args = vec!["coverage", "--map", map.to_str().unwrap(), "--report", report.to_str().unwrap()];
        if merge {
            args.push("--merge");
        }
        let bin = fixture("coverage");
        args.push(&bin);
        args.push(pattern);
        let o = scriptdbg(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        stderr(&o)
    };
    assert!(run("1010101---", false).contains("coverage=0.35"));
    assert!(run("1111111111", false).contains("coverage=0.5"));
    assert!(run("0000000000", true).contains("coverage=1"));
    assert!(std::fs::read_to_string(&report).unwrap().ends_with("coverage=1\n"));
}

#[test]
fn coverage_map_problems() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("cov.txt");
    let empty = dir.path().join("empty.map");
    std::fs::write(&empty, "# no branches\n").unwrap();
    let o = scriptdbg(&[
        "coverage",
        "--map",
        empty.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        &fixture("coverage"),
    ]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    assert!(stderr(&o).contains("coverage=1"));
    let bad = dir.path().join("bad.map");
    std::fs::write(&bad, "0x1 0x2 0x3\n0x4 0x5\n").unwrap();
    let o = scriptdbg(&[
        "coverage",
        "--map",
        bad.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        &fixture("coverage"),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn triage_reports_offsets() {
    let o = scriptdbg(&["triage", &fixture("overflow")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("signal=11\n"));
    assert!(text.contains("offset_to_fp=64\n"), "{text}");
    assert!(text.contains("offset_to_pc=72\n"), "{text}");
    assert!(text.contains(" vuln+0x"), "{text}");
}

#[test]
fn triage_with_harmless_payload_fails() {
    let mut payload = tempfile::NamedTempFile::new().unwrap();
    payload.write_all(b"hello").unwrap();
    let o = scriptdbg(&["triage", "--payload", payload.path().to_str().unwrap(), &fixture("overflow")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("did not crash"));
}

#[test]
fn small_bench_writes_csv_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = scriptdbg(&["bench", "--mode", "syscall", "--events", "20", "--runs", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().next(), Some("run,wall_ns"));
    assert_eq!(csv.lines().count(), 5);
    let stats = std::fs::read_to_string(dir.path().join("b.csv.stats")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), stats);
    assert!(stats.contains("observed_stops=160\n"), "{stats}");
}

#[test]
fn cyclic_roundtrip() {
    let o = scriptdbg(&["cyclic", "100"]);
    let pattern = String::from_utf8(o.stdout).unwrap();
    assert_eq!(pattern.trim_end().len(), 100);
    let window = &pattern[40..44];
    assert_eq!(String::from_utf8(scriptdbg(&["cyclic-find", window]).stdout).unwrap(), "40\n");
    let value = u32::from_le_bytes(window.as_bytes().try_into().unwrap());
    assert_eq!(String::from_utf8(scriptdbg(&["cyclic-find", &format!("{value:#x}")]).stdout).unwrap(), "40\n");
    assert_eq!(scriptdbg(&["cyclic-find", "ZZZZ"]).status.code(), Some(1));
    assert_eq!(scriptdbg(&["cyclic", "1000", "-n", "2"]).status.code(), Some(1));
}

#[test]
fn timeout_kills_a_hung_tracee() {
    let start = Instant::now();
    let o = scriptdbg(&["--timeout", "0.5", "trace", "-e", "write", &fixture("sleeper")]);
    assert!(start.elapsed() < Duration::from_secs(20));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("timed out"), "{}", stderr(&o));
}
