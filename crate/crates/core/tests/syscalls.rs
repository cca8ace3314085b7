mod common;

use std::cell::RefCell;
use std::os::unix::process::CommandExt;
use std::process::{Command, Stdio};
use std::rc::Rc;
use std::time::{Duration, Instant};

use common::*;
use nix::sys::personality::{self, Persona};
use nix::sys::ptrace;
use nix::sys::signal::Signal;
use nix::sys::wait::{waitpid, WaitStatus};
use nix::unistd::Pid;
use scriptdbg_core::syscalls::SyscallTable;
use scriptdbg_core::{
    syscall_callback, Debugger, Direction, Directive, Error, ExitStatus, FaultRule, Nth, RunOutcome, SpawnOptions,
    StopReason, SyscallRecord, SyscallSelector,
};

/// (nr, return value) of every completed syscall, observed by a minimal
/// tracer that asks the kernel which side of the call each stop is on.
fn oracle_trace(name: &str, args: &[&str]) -> Vec<(u64, i64)> {
    let mut cmd = Command::new(fixture(name));
    // Pipes, like the engine's default stdio, so libc takes the same paths.
    cmd.args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped());
    unsafe {
        cmd.pre_exec(|| {
            personality::set(Persona::ADDR_NO_RANDOMIZE).map_err(std::io::Error::from)?;
            ptrace::traceme().map_err(std::io::Error::from)
        });
    }
    let mut child = cmd.spawn().unwrap();
    let mut stdout = child.stdout.take().unwrap();
    let drain = std::thread::spawn(move || std::io::copy(&mut stdout, &mut std::io::sink()));
    let pid = Pid::from_raw(child.id() as i32);
    assert!(matches!(waitpid(pid, None).unwrap(), WaitStatus::Stopped(_, Signal::SIGTRAP)));
    ptrace::setoptions(pid, ptrace::Options::PTRACE_O_TRACESYSGOOD | ptrace::Options::PTRACE_O_EXITKILL).unwrap();
    let mut pending_nr = None;
    let mut out = Vec::new();
    loop {
        ptrace::syscall(pid, None).unwrap();
        match waitpid(pid, None).unwrap() {
            WaitStatus::PtraceSyscall(_) => {
                let info = ptrace::syscall_info(pid).unwrap();
                match info.op {
                    libc::PTRACE_SYSCALL_INFO_ENTRY => pending_nr = Some(unsafe { info.u.entry.nr }),
                    libc::PTRACE_SYSCALL_INFO_EXIT => {
                        let nr = pending_nr.take().expect("exit without entry");
                        out.push((nr, unsafe { info.u.exit.sval }));
                    }
                    op => panic!("unexpected op {op}"),
                }
            }
            WaitStatus::Exited(..) | WaitStatus::Signaled(..) => break,
            other => panic!("{other:?}"),
        }
    }
    drain.join().unwrap().unwrap();
    let _ = child.wait();
    normalize_pid(out, pid.as_raw())
}

/// Process ids differ between runs; replace return values equal to `pid`.
fn normalize_pid(calls: Vec<(u64, i64)>, pid: i32) -> Vec<(u64, i64)> {
    calls.into_iter().map(|(nr, ret)| (nr, if ret == pid as i64 { -1_000_000 } else { ret })).collect()
}

type Log = Rc<RefCell<Vec<SyscallRecord>>>;

fn record_all(dbg: &mut Debugger, selector: impl Into<SyscallSelector>) -> Log {
    let log: Log = Rc::default();
    let (a, b) = (log.clone(), log.clone());
    dbg.trace_syscalls(
        selector,
        Some(syscall_callback(move |_, r| {
            a.borrow_mut().push(r.clone());
            Ok(Directive::Continue)
        })),
        Some(syscall_callback(move |_, r| {
            b.borrow_mut().push(r.clone());
            Ok(Directive::Continue)
        })),
    )
    .unwrap();
    log
}

fn completed(log: &Log) -> Vec<(u64, i64)> {
    log.borrow().iter().filter_map(|r| r.ret.map(|ret| (r.nr, ret))).collect()
}

#[test]
fn trace_matches_kernel_oracle() {
    let oracle = oracle_trace("syscall_script", &[]);
    let mut dbg = spawn("syscall_script", &[]);
    let log = record_all(&mut dbg, SyscallSelector::All);
    assert_eq!(dbg.run_until_exit().unwrap(), RunOutcome::Exited(ExitStatus::Code(0)));
    let ours = normalize_pid(completed(&log), dbg.pid());
    assert_eq!(ours, oracle);
    // The fixed script: 5 rounds of 10 calls.
    let table = SyscallTable::for_arch(dbg.arch());
    let script: Vec<&str> = ours.iter().map(|(nr, _)| table.name(*nr).unwrap()).collect();
    let rounds = script.windows(10).filter(|w| w[0] == "getpid" && w[9] == "lseek").count();
    assert_eq!(rounds, 5);
    let writes: Vec<_> = ours.iter().filter(|(nr, _)| table.name(*nr) == Some("write")).collect();
    assert_eq!(writes.len(), 5);
    assert!(writes.iter().all(|(_, ret)| *ret == 7));
    let closes: Vec<_> = ours.iter().filter(|(nr, _)| table.name(*nr) == Some("close")).collect();
    assert!(closes.iter().all(|(_, ret)| *ret == -libc::EBADF as i64));
}

#[test]
fn trace_of_dynamic_binary_matches_oracle() {
    let oracle = oracle_trace("loop", &["3"]);
    let mut dbg = spawn("loop", &["3"]);
    let log = record_all(&mut dbg, SyscallSelector::All);
    dbg.run_until_exit().unwrap();
    let ours = completed(&log);
    let nrs = |v: &[(u64, i64)]| v.iter().map(|p| p.0).collect::<Vec<_>>();
    assert_eq!(nrs(&ours), nrs(&oracle));
}

#[test]
fn table_agrees_with_kernel_headers() {
    let header = "/usr/include/x86_64-linux-gnu/asm/unistd_64.h";
    let Ok(text) = std::fs::read_to_string(header) else { return };
    if !cfg!(target_arch = "x86_64") {
        return;
    }
    let table = SyscallTable::for_arch(scriptdbg_core::Arch::host().unwrap());
    let mut n = 0;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("#define") {
            continue;
        }
        let (Some(name), Some(nr)) = (parts.next(), parts.next()) else { continue };
        let Some(name) = name.strip_prefix("__NR_") else { continue };
        let nr: u64 = nr.parse().unwrap();
        assert_eq!(table.name(nr), Some(name), "{nr}");
        assert_eq!(table.number(name), Some(nr));
        n += 1;
    }
    assert!(n > 300);
    assert!(table.len() >= n);
}

#[test]
fn thousand_writes_give_paired_records() {
    let started = Instant::now();
    let mut dbg = spawn("writes", &["1000"]);
    let out = dbg.stdio().unwrap();
    let reader = std::thread::spawn(move || out.read_stdout_to_end().unwrap());
    let log = record_all(&mut dbg, "write");
    dbg.run_until_exit().unwrap();
    let log = log.borrow();
    assert_eq!(log.iter().filter(|r| r.direction == Direction::Enter).count(), 1000);
    assert_eq!(log.iter().filter(|r| r.direction == Direction::Exit).count(), 1000);
    for pair in log.chunks(2) {
        assert_eq!(pair[0].direction, Direction::Enter);
        assert_eq!(pair[1].direction, Direction::Exit);
        assert_eq!(pair[0].nr, pair[1].nr);
        assert_eq!(pair[1].ret, Some(2));
        assert_eq!(pair[0].args[0], 1);
        assert_eq!(pair[0].args[2], 2);
        assert!(pair[0].seq < pair[1].seq);
    }
    assert!(log.windows(2).all(|w| w[0].seq < w[1].seq));
    assert_eq!(reader.join().unwrap(), b"hi".repeat(1000));
    assert!(started.elapsed() < Duration::from_secs(10));
}

#[test]
fn first_event_of_first_write() {
    let mut dbg = Debugger::spawn(SpawnOptions::new(fixture("first_write"))).unwrap();
    dbg.trace_syscalls("write", None, None).unwrap();
    let ev = dbg.cont().unwrap();
    assert_eq!(ev.reason, StopReason::SyscallEnter { nr: 1 });
    let ev = dbg.cont().unwrap();
    assert_eq!(ev.reason, StopReason::SyscallExit { nr: 1, ret: 3 });
    assert!(matches!(dbg.cont().unwrap().reason, StopReason::Exited(ExitStatus::Code(_))));
}

#[test]
fn unknown_syscall_names() {
    let mut dbg = spawn("loop", &["1"]);
    assert!(matches!(dbg.trace_syscalls("not_a_syscall", None, None), Err(Error::UnknownSyscall(_))));
    assert!(matches!(
        dbg.inject_fault(FaultRule::new("not_a_syscall", Nth::All, libc::EIO)),
        Err(Error::UnknownSyscall(_))
    ));
    // Numbers are accepted as selectors.
    dbg.trace_syscalls("39", None, None).unwrap();
}

#[test]
fn handler_context_is_enforced() {
    let mut dbg = spawn("writes", &["2"]);
    assert!(matches!(dbg.hijack_syscall(Some(39), [None; 6]), Err(Error::InvalidContext(_))));
    assert!(matches!(dbg.set_syscall_return(0), Err(Error::InvalidContext(_))));
    let errors = Rc::new(RefCell::new(Vec::new()));
    let (e1, e2) = (errors.clone(), errors.clone());
    dbg.trace_syscalls(
        "write",
        Some(syscall_callback(move |dbg, _| {
            e1.borrow_mut().push(dbg.set_syscall_return(0).unwrap_err());
            Ok(Directive::Continue)
        })),
        Some(syscall_callback(move |dbg, _| {
            e2.borrow_mut().push(dbg.hijack_syscall(Some(39), [None; 6]).unwrap_err());
            Ok(Directive::Continue)
        })),
    )
    .unwrap();
    dbg.run_until_exit().unwrap();
    let errors = errors.borrow();
    assert_eq!(errors.len(), 4);
    assert!(errors.iter().all(|e| matches!(e, Error::InvalidContext(_))));
}

/// Reads a NUL-terminated string from the tracee.
fn read_cstr(dbg: &mut Debugger, addr: u64) -> String {
    let mut out = Vec::new();
    for i in 0..4096 {
        let b = dbg.read_memory(addr + i, 1).unwrap()[0];
        if b == 0 {
            break;
        }
        out.push(b);
    }
    String::from_utf8(out).unwrap()
}

#[test]
fn hijack_rewrites_open_path() {
    let dir = tempfile::tempdir().unwrap();
    let real = dir.path().join("real.txt");
    std::fs::write(&real, "swapped").unwrap();
    let missing = dir.path().join("missing.txt");
    let mut dbg = spawn("files", &["read", missing.to_str().unwrap()]);
    let out = dbg.stdio().unwrap();
    let wanted = missing.to_str().unwrap().to_string();
    let replacement = format!("{}\0", real.display());
    dbg.trace_syscalls(
        "openat",
        Some(syscall_callback(move |dbg, r| {
            if read_cstr(dbg, r.args[1]) == wanted {
                // Scratch space below the red zone; no user code runs before the kernel reads it.
                let sp = dbg.read_registers(r.tid)?.sp();
                let scratch = (sp - 4096) & !15;
                dbg.write_memory(scratch, replacement.as_bytes())?;
                let mut args = [None; 6];
                args[1] = Some(scratch);
                dbg.hijack_syscall(None, args)?;
            }
            Ok(Directive::Continue)
        })),
        None,
    )
    .unwrap();
    assert_eq!(dbg.run_until_exit().unwrap(), RunOutcome::Exited(ExitStatus::Code(0)));
    assert_eq!(out.read_stdout_to_end().unwrap(), b"config: swapped\n");
}

#[test]
fn hijack_replaces_the_call() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("created.txt");
    let mut dbg = spawn("files", &["create", target.to_str().unwrap()]);
    let out = dbg.stdio().unwrap();
    let wanted = target.to_str().unwrap().to_string();
    let yield_nr = SyscallTable::for_arch(dbg.arch()).number("sched_yield").unwrap();
    let exits = Rc::new(RefCell::new(Vec::new()));
    let sink = exits.clone();
    dbg.trace_syscalls(
        "openat",
        Some(syscall_callback(move |dbg, r| {
            if read_cstr(dbg, r.args[1]) == wanted {
                dbg.hijack_syscall(Some(yield_nr), [None; 6])?;
            }
            Ok(Directive::Continue)
        })),
        Some(syscall_callback(move |_, r| {
            sink.borrow_mut().push(r.clone());
            Ok(Directive::Continue)
        })),
    )
    .unwrap();
    dbg.run_until_exit().unwrap();
    assert!(!target.exists());
    assert_eq!(out.read_stdout_to_end().unwrap(), b"create returned 0\n");
    assert!(exits.borrow().iter().any(|r| r.nr == yield_nr && r.ret == Some(0)));
}

#[test]
fn fault_takes_precedence_over_hijack() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("created.txt");
    let mut dbg = spawn("files_static", &["create", target.to_str().unwrap()]);
    let out = dbg.stdio().unwrap();
    let openat = SyscallTable::for_arch(dbg.arch()).number("openat").unwrap();
    let wanted = target.to_str().unwrap().to_string();
    dbg.inject_fault(FaultRule::new("openat", Nth::All, libc::EACCES)).unwrap();
    dbg.trace_syscalls(
        "openat",
        Some(syscall_callback(move |dbg, r| {
            if read_cstr(dbg, r.args[1]) == wanted {
                // Re-issuing the original call must not undo the fault.
                dbg.hijack_syscall(Some(openat), [None; 6])?;
            }
            Ok(Directive::Continue)
        })),
        None,
    )
    .unwrap();
    dbg.run_until_exit().unwrap();
    assert!(!target.exists());
    assert_eq!(out.read_stdout_to_end().unwrap(), b"create returned -1\n");
}

#[test]
fn exit_handler_overrides_return() {
    let dir = tempfile::tempdir().unwrap();
    let real = dir.path().join("present.txt");
    std::fs::write(&real, "data").unwrap();
    let mut dbg = spawn("files_static", &["read", real.to_str().unwrap()]);
    let out = dbg.stdio().unwrap();
    dbg.trace_syscalls(
        "openat",
        None,
        Some(syscall_callback(|dbg, r| {
            assert!(r.ret.unwrap() >= 0);
            dbg.set_syscall_return(-(libc::ENOENT as i64))?;
            Ok(Directive::Continue)
        })),
    )
    .unwrap();
    assert_eq!(dbg.run_until_exit().unwrap(), RunOutcome::Exited(ExitStatus::Code(2)));
    assert_eq!(out.read_stdout_to_end().unwrap(), b"open failed: No such file or directory\n");
}

#[test]
fn fault_injection_denies_open() {
    let dir = tempfile::tempdir().unwrap();
    let real = dir.path().join("present.txt");
    std::fs::write(&real, "data").unwrap();
    let mut dbg = spawn("files_static", &["read", real.to_str().unwrap()]);
    let out = dbg.stdio().unwrap();
    let log = record_all(&mut dbg, "openat");
    let rule = dbg.inject_fault(FaultRule::new("openat", Nth::Occurrence(1), libc::EACCES)).unwrap();
    assert_eq!(dbg.run_until_exit().unwrap(), RunOutcome::Exited(ExitStatus::Code(2)));
    assert_eq!(out.read_stdout_to_end().unwrap(), b"open failed: Permission denied\n");
    let status = dbg.fault_status(rule).unwrap();
    assert_eq!((status.matched, status.fired, status.consumed), (1, 1, true));
    let log = log.borrow();
    let exit = log.iter().find(|r| r.direction == Direction::Exit).unwrap();
    assert!(exit.injected);
    assert_eq!(exit.name, "openat");
    assert_eq!(exit.ret, Some(-(libc::EACCES as i64)));
}

#[test]
fn fault_injection_without_subscription() {
    let dir = tempfile::tempdir().unwrap();
    let real = dir.path().join("present.txt");
    std::fs::write(&real, "data").unwrap();
    let mut dbg = spawn("files_static", &["read", real.to_str().unwrap()]);
    let out = dbg.stdio().unwrap();
    dbg.inject_fault(FaultRule::new("openat", Nth::All, libc::EACCES)).unwrap();
    assert_eq!(dbg.run_until_exit().unwrap(), RunOutcome::Exited(ExitStatus::Code(2)));
    assert_eq!(out.read_stdout_to_end().unwrap(), b"open failed: Permission denied\n");
}

#[test]
fn predicate_selects_the_second_large_mapping() {
    let mut dbg = spawn("files", &["probe"]);
    let out = dbg.stdio().unwrap();
    let rule = dbg
        .inject_fault(FaultRule::new("mmap", Nth::Occurrence(2), libc::ENOMEM).when(|args| args[1] == (1 << 20) + 4096))
        .unwrap();
    assert_eq!(dbg.run_until_exit().unwrap(), RunOutcome::Exited(ExitStatus::Code(0)));
    assert_eq!(
        String::from_utf8(out.read_stdout_to_end().unwrap()).unwrap(),
        "alloc 0 ok\nalloc 1 failed: Cannot allocate memory\nalloc 2 ok\n"
    );
    let status = dbg.fault_status(rule).unwrap();
    assert_eq!((status.matched, status.fired), (2, 1));
}

#[test]
fn rule_validation() {
    let mut dbg = spawn("files", &["probe"]);
    assert!(matches!(dbg.inject_fault(FaultRule::new("mmap", Nth::All, 0)), Err(Error::RuleConflict(_))));
    assert!(matches!(dbg.inject_fault(FaultRule::new("mmap", Nth::All, -5)), Err(Error::RuleConflict(_))));
    assert!(matches!(
        dbg.inject_fault(FaultRule::new("mmap", Nth::Occurrence(0), libc::ENOMEM)),
        Err(Error::RuleConflict(_))
    ));
    let first = dbg.inject_fault(FaultRule::new("mmap", Nth::Occurrence(2), libc::ENOMEM)).unwrap();
    assert!(matches!(
        dbg.inject_fault(FaultRule::new("mmap", Nth::Occurrence(2), libc::EPERM)),
        Err(Error::RuleConflict(_))
    ));
    assert!(matches!(dbg.inject_fault(FaultRule::new("mmap", Nth::All, libc::EPERM)), Err(Error::RuleConflict(_))));
    dbg.inject_fault(FaultRule::new("mmap", Nth::Occurrence(3), libc::EPERM)).unwrap();
    dbg.remove_fault(first).unwrap();
    assert!(matches!(dbg.remove_fault(first), Err(Error::NoSuchTrap(_))));
    assert!(matches!(dbg.fault_status(first), Err(Error::NoSuchTrap(_))));
}

#[test]
fn stop_directive_from_syscall_handler() {
    let mut dbg = spawn("writes", &["5"]);
    let count = Rc::new(RefCell::new(0));
    let c = count.clone();
    dbg.trace_syscalls(
        "write",
        None,
        Some(syscall_callback(move |_, _| {
            *c.borrow_mut() += 1;
            Ok(if *c.borrow() == 2 { Directive::Stop } else { Directive::Continue })
        })),
    )
    .unwrap();
    match dbg.run_until_exit().unwrap() {
        RunOutcome::Stopped(ev) => assert_eq!(ev.reason, StopReason::SyscallExit { nr: 1, ret: 2 }),
        other => panic!("{other:?}"),
    }
    dbg.run_until_exit().unwrap();
    assert_eq!(*count.borrow(), 5);
}

#[test]
fn untrace_stops_records() {
    let mut dbg = spawn("writes", &["10"]);
    let log: Log = Rc::default();
    let sink = log.clone();
    let id = Rc::new(RefCell::new(0));
    let my_id = id.clone();
    *id.borrow_mut() = dbg
        .trace_syscalls(
            "write",
            Some(syscall_callback(move |dbg, r| {
                sink.borrow_mut().push(r.clone());
                if sink.borrow().len() == 3 {
                    dbg.untrace(*my_id.borrow())?;
                }
                Ok(Directive::Continue)
            })),
            None,
        )
        .unwrap();
    dbg.run_until_exit().unwrap();
    assert_eq!(log.borrow().len(), 3);
    assert!(matches!(dbg.untrace(*id.borrow()), Err(Error::NoSuchTrap(_))));
}

#[test]
fn records_alternate_per_thread() {
    let mut dbg = spawn("threads", &["4", "3", "1"]);
    let log = record_all(&mut dbg, SyscallSelector::All);
    dbg.run_until_exit().unwrap();
    let log = log.borrow();
    let mut tids: Vec<_> = log.iter().map(|r| r.tid).collect();
    tids.sort();
    tids.dedup();
    assert!(tids.len() >= 5, "{tids:?}");
    for tid in tids {
        let mine: Vec<_> = log.iter().filter(|r| r.tid == tid).collect();
        let mut open: Option<u64> = None;
        for r in mine {
            match r.direction {
                Direction::Enter => {
                    assert!(open.is_none(), "{tid}: double enter {r:?}");
                    open = Some(r.nr);
                }
                Direction::Exit => {
                    // A thread's first record can be the exit of the clone that created it.
                    if let Some(nr) = open.take() {
                        assert_eq!(nr, r.nr);
                    }
                }
            }
        }
    }
}

#[test]
fn traces_are_deterministic() {
    let run = || {
        let mut dbg = spawn("syscall_script", &[]);
        let log = record_all(&mut dbg, SyscallSelector::All);
        dbg.run_until_exit().unwrap();
        let pid = dbg.pid() as i64;
        let v = log
            .borrow()
            .iter()
            .map(|r| (r.name.clone(), r.args, r.ret.map(|ret| if ret == pid { -1 } else { ret })))
            .collect::<Vec<_>>();
        v
    };
    assert_eq!(run(), run());
}
