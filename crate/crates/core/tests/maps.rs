mod common;

use common::*;
use scriptdbg_core::{Directive, MemoryMap, StopReason, SyscallSelector};

fn check_invariants(maps: &[MemoryMap]) {
    assert!(!maps.is_empty());
    for m in maps {
        assert!(m.start < m.end);
        assert_eq!(m.start % 4096, 0);
        assert_eq!(m.end % 4096, 0);
    }
    for pair in maps.windows(2) {
        assert!(pair[0].end <= pair[1].start, "{pair:?}");
    }
}

#[test]
fn anonymous_mapping_appears_with_exact_size() {
    let mut dbg = spawn("anon_map", &[]);
    dbg.trace_syscalls(SyscallSelector::names(["mmap"]), None, None).unwrap();
    let mut found = None;
    loop {
        let ev = dbg.cont().unwrap();
        match ev.reason {
            StopReason::SyscallExit { ret: 0x2_0000_0000, .. } => {
                let maps = dbg.maps().unwrap();
                check_invariants(&maps);
                found = maps.into_iter().find(|m| m.start == 0x2_0000_0000);
            }
            StopReason::Exited(_) => break,
            _ => {}
        }
    }
    let m = found.expect("fixture mapping");
    assert_eq!(m.len(), 8192);
    assert!(m.path.is_none());
    assert!(m.perms.read && !m.perms.write && !m.perms.exec && m.perms.private);
}

#[test]
fn invariants_hold_over_a_lifetime() {
    let mut dbg = spawn("threads", &["4", "3"]);
    check_invariants(&dbg.maps().unwrap());
    let checked = std::rc::Rc::new(std::cell::Cell::new(0));
    let c = checked.clone();
    dbg.breakpoint_with("shared_fn", move |dbg, _| {
        check_invariants(&dbg.maps()?);
        c.set(c.get() + 1);
        Ok(Directive::Continue)
    })
    .unwrap();
    dbg.run_until_exit().unwrap();
    assert_eq!(checked.get(), 12);
    assert!(dbg.maps().is_err());
}

#[test]
fn text_segment_is_executable_and_named() {
    let dbg = spawn("loop", &["1"]);
    let f = nm_address(&fixture("loop"), "f").unwrap();
    let maps = dbg.maps().unwrap();
    let m = scriptdbg_core::process::find_map(&maps, f).unwrap();
    assert!(m.perms.exec);
    assert!(m.path.as_deref().unwrap().ends_with("/loop"));
}
