//! Syscall tracing: one line per completed call.

use std::cell::RefCell;
use std::io::Write;
use std::rc::Rc;

use scriptdbg_core::syscalls::SyscallTable;
use scriptdbg_core::{syscall_callback, Arch, Directive, Error, ExitStatus, RunOutcome, SyscallSelector};

use crate::error::Result;
use crate::session::{RunOptions, Target};

/// Traces `target`, writing `<tid> <name>(<args>) = <ret>` for each syscall
/// exit that passes `filter`. Returns the tracee's exit status and the sink.
pub fn run_trace<W: Write + 'static>(
    target: &Target,
    filter: Option<&[String]>,
    out: W,
    opts: &RunOptions,
) -> Result<(ExitStatus, W)> {
    let selector = match filter {
        Some(names) => {
            // Reject unknown names before anything is spawned.
            let arch = Arch::host().ok_or_else(|| Error::UnsupportedTarget("host architecture".into()))?;
            let table = SyscallTable::for_arch(arch);
            for n in names {
                table.resolve(n)?;
            }
            SyscallSelector::names(names.iter().cloned())
        }
        None => SyscallSelector::All,
    };
    let mut dbg = opts.spawn(target)?;
    let sink = Rc::new(RefCell::new(out));
    let writer = sink.clone();
    dbg.trace_syscalls(
        selector,
        None,
        Some(syscall_callback(move |_, rec| {
            writeln!(writer.borrow_mut(), "{}", rec.format_line()).map_err(Error::callback)?;
            Ok(Directive::Continue)
        })),
    )?;
    let watchdog = opts.watchdog(dbg.pid());
    let status = loop {
        if let RunOutcome::Exited(status) = dbg.run_until_exit()? {
            break status;
        }
    };
    watchdog.disarm()?;
    drop(dbg);
    let out = Rc::try_unwrap(sink).ok().expect("trace sink still shared").into_inner();
    Ok((status, out))
}
