mod common;

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use common::*;
use scriptdbg_core::{
    syscall_callback, BreakpointKind, Directive, ExitStatus, RunOutcome, StopReason, TraceeState, WatchTrigger,
};

/// tid -> (first argument, stack pointer) at every `shared_fn` hit.
type Hits = Rc<RefCell<Vec<(i32, u64, u64)>>>;

fn record_shared_fn(dbg: &mut scriptdbg_core::Debugger, kind: BreakpointKind) -> Hits {
    let hits: Hits = Rc::default();
    let sink = hits.clone();
    let pid = dbg.pid();
    dbg.set_breakpoint(
        "shared_fn",
        kind,
        false,
        Some(scriptdbg_core::trap_callback(move |_, ctx| {
            let tasks = std::fs::read_dir(format!("/proc/{pid}/task")).unwrap();
            let live: BTreeSet<i32> =
                tasks.map(|e| e.unwrap().file_name().to_str().unwrap().parse().unwrap()).collect();
            assert!(live.contains(&ctx.tid), "{} not in {live:?}", ctx.tid);
            let arg0 = ctx.regs.by_name("rdi").or_else(|| ctx.regs.by_name("x0")).unwrap();
            sink.borrow_mut().push((ctx.tid, arg0, ctx.regs.sp()));
            Ok(Directive::Continue)
        })),
    )
    .unwrap();
    hits
}

#[test]
fn each_thread_hits_the_shared_breakpoint() {
    let mut dbg = spawn("threads", &["4", "1", "-1"]);
    let hits = record_shared_fn(&mut dbg, BreakpointKind::Software);
    assert_eq!(dbg.run_until_exit().unwrap(), RunOutcome::Exited(ExitStatus::Code(0)));
    let hits = hits.borrow();
    assert_eq!(hits.len(), 4);
    let tids: BTreeSet<_> = hits.iter().map(|h| h.0).collect();
    assert_eq!(tids.len(), 4);
    assert!(!tids.contains(&dbg.pid()));
    let sps: BTreeSet<_> = hits.iter().map(|h| h.2).collect();
    assert_eq!(sps.len(), 4);
    let ids: BTreeSet<_> = hits.iter().map(|h| h.1).collect();
    assert_eq!(ids, (0..4).collect());
}

#[test]
fn hit_counts_sum_over_threads() {
    for kind in [BreakpointKind::Software, BreakpointKind::Hardware] {
        let mut dbg = spawn("threads", &["4", "25", "-1"]);
        let out = dbg.stdio().unwrap();
        let hits = record_shared_fn(&mut dbg, kind);
        dbg.run_until_exit().unwrap();
        let mut per_thread: BTreeMap<i32, Vec<u64>> = BTreeMap::new();
        for (tid, id, _) in hits.borrow().iter() {
            per_thread.entry(*tid).or_default().push(*id);
        }
        assert_eq!(per_thread.len(), 4, "{kind:?}");
        for ids in per_thread.values() {
            assert_eq!(ids.len(), 25);
            assert!(ids.iter().all(|i| *i == ids[0]));
        }
        let bp = dbg.breakpoints()[0].clone();
        assert_eq!(bp.hit_count, 100);
        // counter = 25 * (1 + 2 + 3 + 4)
        assert_eq!(out.read_stdout_to_end().unwrap(), b"counter 250 watched 0\n");
    }
}

#[test]
fn watchpoint_follows_new_threads() {
    let bin = fixture("threads");
    let mut dbg = spawn("threads", &["4", "1", "2"]);
    let hits = record_shared_fn(&mut dbg, BreakpointKind::Software);
    let watched = nm_address(&bin, "watched").unwrap();
    let (_, start, size) = nm_functions(&bin).into_iter().find(|f| f.0 == "write_watched").unwrap();
    let wp = dbg.set_watchpoint(watched, 8, WatchTrigger::Write, None).unwrap();
    let ev = loop {
        let ev = dbg.cont().unwrap();
        if ev.reason == StopReason::Watchpoint(wp) {
            break ev;
        }
        assert!(!matches!(ev.reason, StopReason::Exited(_)), "watchpoint never fired");
    };
    let pc = dbg.read_registers(ev.tid).unwrap().pc();
    assert!((start..start + size).contains(&pc));
    assert_eq!(dbg.read_u64(watched).unwrap(), 102);
    let writer_tid = hits.borrow().iter().find(|h| h.1 == 2).unwrap().0;
    assert_eq!(ev.tid, writer_tid);
    assert_eq!(dbg.run_until_exit().unwrap(), RunOutcome::Exited(ExitStatus::Code(0)));
    assert_eq!(dbg.watchpoint_info(wp).unwrap().hit_count, 1);
}

#[test]
fn all_threads_stop_together() {
    let mut dbg = spawn("threads", &["4", "50", "-1"]);
    dbg.breakpoint("shared_fn").unwrap();
    let mut seen = 0;
    while let StopReason::Breakpoint(_) = dbg.cont().unwrap().reason {
        assert_eq!(dbg.state(), TraceeState::Stopped);
        let pid = dbg.pid();
        // Every known thread is in a ptrace stop.
        for tid in dbg.tids() {
            let stat = std::fs::read_to_string(format!("/proc/{pid}/task/{tid}/stat")).unwrap();
            let state = stat.rsplit(')').next().unwrap().split_whitespace().next().unwrap();
            assert_eq!(state, "t", "{tid}");
        }
        seen += 1;
        if seen == 40 {
            break;
        }
    }
    assert_eq!(seen, 40);
    dbg.kill().unwrap();
}

#[test]
fn syscall_from_child_thread() {
    let mut dbg = spawn("clone1", &[]);
    let tids = Rc::new(RefCell::new(Vec::new()));
    let sink = tids.clone();
    dbg.trace_syscalls(
        "getpid",
        None,
        Some(syscall_callback(move |_, r| {
            sink.borrow_mut().push((r.tid, r.ret.unwrap()));
            Ok(Directive::Continue)
        })),
    )
    .unwrap();
    dbg.run_until_exit().unwrap();
    let pid = dbg.pid();
    let tids = tids.borrow();
    assert_eq!(tids.len(), 1, "{tids:?}");
    assert_ne!(tids[0].0, pid);
    assert_eq!(tids[0].1, pid as i64);
}
