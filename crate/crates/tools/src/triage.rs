//! Post-mortem analysis of a crashing input and stack-slot offset discovery.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::rc::Rc;
use std::thread;

use scriptdbg_core::symbols::StackFrame;
use scriptdbg_core::{trap_callback, Debugger, Directive, Disposition, RunOutcome, SignalAction, StdioMode};

use crate::cyclic::{cyclic, cyclic_find_value, DEFAULT_WIDTH};
use crate::error::{Result, ToolError};
use crate::session::{RunOptions, Target};

const FATAL: [i32; 5] = [libc::SIGSEGV, libc::SIGBUS, libc::SIGILL, libc::SIGFPE, libc::SIGABRT];

#[derive(Debug, Clone, PartialEq)]
pub struct Crash {
    pub signal: i32,
    pub tid: i32,
    pub registers: Vec<(String, u64)>,
    pub pc: u64,
    pub fp: u64,
    /// Word at the stack pointer, if readable.
    pub stack_top: Option<u64>,
    pub stack_trace: Vec<StackFrame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriageFinding {
    pub crash: Crash,
    pub fp_controlled: bool,
    pub pc_controlled: bool,
    pub offset_to_fp: Option<usize>,
    pub offset_to_pc: Option<usize>,
}

/// Runs `target` with `input` on stdin and captures the first fatal signal.
pub fn run_with_input(target: &Target, input: &[u8], opts: &RunOptions) -> Result<Option<Crash>> {
    let mut dbg = opts.spawn_with(target, StdioMode::Pipe)?;
    let io = dbg.stdio().expect("piped stdio");
    let feeder = {
        let io = io.clone();
        let input = input.to_vec();
        thread::spawn(move || {
            let _ = io.write_stdin(&input);
            io.close_stdin();
        })
    };
    let drains = [false, true].map(|stderr| {
        let io = io.clone();
        thread::spawn(move || if stderr { io.read_stderr_to_end() } else { io.read_stdout_to_end() })
    });
    let crash: Rc<RefCell<Option<Crash>>> = Rc::default();
    for sig in FATAL {
        let sink = crash.clone();
        dbg.set_signal_action(
            sig,
            SignalAction::Callback(
                trap_callback(move |dbg, ctx| {
                    if sink.borrow().is_none() {
                        *sink.borrow_mut() = Some(post_mortem(dbg, sig, ctx)?);
                    }
                    Ok(Directive::Continue)
                }),
                Disposition::Pass,
            ),
        )?;
    }
    let watchdog = opts.watchdog(dbg.pid());
    loop {
        if let RunOutcome::Exited(_) = dbg.run_until_exit()? {
            break;
        }
    }
    watchdog.disarm()?;
    let _ = feeder.join();
    for d in drains {
        let _ = d.join();
    }
    let crash = crash.borrow_mut().take();
    Ok(crash)
}

fn post_mortem(dbg: &mut Debugger, signal: i32, ctx: &scriptdbg_core::ThreadContext) -> scriptdbg_core::Result<Crash> {
    let regs = &ctx.regs;
    Ok(Crash {
        signal,
        tid: ctx.tid,
        registers: regs.iter().map(|(n, v)| (n.to_string(), v)).collect(),
        pc: regs.pc(),
        fp: regs.fp(),
        stack_top: dbg.read_u64(regs.sp()).ok(),
        stack_trace: dbg.backtrace(ctx.tid, 64)?,
    })
}

/// Confirms a crash with `payload`, then reruns with a cyclic pattern of
/// `max_len` bytes to find which input offsets land in fp and pc.
pub fn triage(target: &Target, payload: &[u8], max_len: usize, opts: &RunOptions) -> Result<TriageFinding> {
    let crash = run_with_input(target, payload, opts)?.ok_or(ToolError::NoCrash)?;
    let mut finding =
        TriageFinding { crash, fp_controlled: false, pc_controlled: false, offset_to_fp: None, offset_to_pc: None };
    if finding.crash.signal != libc::SIGSEGV {
        return Ok(finding);
    }
    let pattern = cyclic(max_len, DEFAULT_WIDTH)?;
    let Some(probe) = run_with_input(target, &pattern, opts)? else {
        return Ok(finding);
    };
    finding.offset_to_fp = cyclic_find_value(probe.fp, DEFAULT_WIDTH).ok();
    // A pattern return address is usually non-canonical: the fault is then
    // raised by the return itself and the value is still on the stack.
    finding.offset_to_pc = cyclic_find_value(probe.pc, DEFAULT_WIDTH)
        .ok()
        .or_else(|| probe.stack_top.and_then(|w| cyclic_find_value(w, DEFAULT_WIDTH).ok()));
    finding.fp_controlled = finding.offset_to_fp.is_some();
    finding.pc_controlled = finding.offset_to_pc.is_some();
    Ok(finding)
}

impl TriageFinding {
    pub fn to_text(&self) -> String {
        let c = &self.crash;
        let mut out = String::new();
        let _ = writeln!(out, "signal={}", c.signal);
        let _ = writeln!(out, "tid={}", c.tid);
        let _ = writeln!(out, "pc={:#x}", c.pc);
        let _ = writeln!(out, "fp={:#x}", c.fp);
        let _ = writeln!(out, "fp_controlled={}", self.fp_controlled as u8);
        if let Some(o) = self.offset_to_fp {
            let _ = writeln!(out, "offset_to_fp={o}");
        }
        let _ = writeln!(out, "pc_controlled={}", self.pc_controlled as u8);
        if let Some(o) = self.offset_to_pc {
            let _ = writeln!(out, "offset_to_pc={o}");
        }
        for (i, f) in c.stack_trace.iter().enumerate() {
            let name = match &f.symbol {
                Some((n, off)) => format!("{n}+{off:#x}"),
                None => "??".to_string(),
            };
            let _ = writeln!(out, "frame #{i} {:#x} {name}", f.return_address);
        }
        for (name, v) in &c.registers {
            let _ = writeln!(out, "reg {name}={v:#x}");
        }
        out
    }
}
