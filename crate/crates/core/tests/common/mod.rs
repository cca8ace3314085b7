#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use scriptdbg_core::{DebugEvent, Debugger, SpawnOptions, StopReason};

pub fn fixture(name: &str) -> PathBuf {
    scriptdbg_fixtures::path(name)
}

pub fn spawn(name: &str, args: &[&str]) -> Debugger {
    Debugger::spawn(SpawnOptions::new(fixture(name)).args(args.iter().copied())).unwrap()
}

/// Stdout of an undebugged run with ASLR disabled, matching the engine's default.
pub fn bare_stdout(name: &str, args: &[&str]) -> Vec<u8> {
    let out = Command::new("setarch").args(["-R"]).arg(fixture(name)).args(args).output().unwrap();
    out.stdout
}

/// Address of `sym` according to `nm`.
pub fn nm_address(bin: &Path, sym: &str) -> Option<u64> {
    let out = Command::new("nm").arg(bin).output().unwrap();
    String::from_utf8_lossy(&out.stdout).lines().find_map(|l| {
        let mut it = l.split_whitespace();
        let (addr, _kind, name) = (it.next()?, it.next()?, it.next()?);
        (name == sym).then(|| u64::from_str_radix(addr, 16).ok()).flatten()
    })
}

/// `(address, size)` of every defined function symbol, per `nm -S`.
pub fn nm_functions(bin: &Path) -> Vec<(String, u64, u64)> {
    let out = Command::new("nm").args(["-S", "--defined-only"]).arg(bin).output().unwrap();
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() == 4 && (f[2] == "T" || f[2] == "t") {
                Some((f[3].to_string(), u64::from_str_radix(f[0], 16).ok()?, u64::from_str_radix(f[1], 16).ok()?))
            } else {
                None
            }
        })
        .collect()
}

/// Entry point according to `readelf -h`.
pub fn readelf_entry(bin: &Path) -> u64 {
    let out = Command::new("readelf").arg("-h").arg(bin).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().find(|l| l.contains("Entry point address")).unwrap();
    let hex = line.split_whitespace().last().unwrap();
    u64::from_str_radix(hex.trim_start_matches("0x"), 16).unwrap()
}

/// Runs to exit, collecting every event.
pub fn drain(dbg: &mut Debugger) -> Vec<DebugEvent> {
    let mut out = Vec::new();
    loop {
        let ev = dbg.cont().unwrap();
        out.push(ev);
        if matches!(ev.reason, StopReason::Exited(_)) {
            return out;
        }
    }
}

pub fn proc_exists(pid: i32) -> bool {
    Path::new(&format!("/proc/{pid}")).exists()
}
