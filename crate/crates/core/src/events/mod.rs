//! The engine loop and scripting surface.
//!
//! A [`Debugger`] owns one tracee. It resumes the backend, decodes raw stop
//! notices into [`DebugEvent`]s, keeps syscall enter/exit pairing per thread,
//! applies fault rules and signal policies, steps transparently over
//! breakpoints and dispatches user callbacks synchronously on the tracer
//! thread. Callbacks receive `&mut Debugger` and may inspect or modify the
//! stopped tracee, but must not call [`Debugger::cont`],
//! [`Debugger::run_until_exit`] or [`Debugger::step`].

mod signals;
mod stdio;
mod syscalls;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::time::Instant;

pub use signals::{Disposition, SignalAction, SignalPolicy};
pub use stdio::StdioChannels;
pub use syscalls::{format_ret, Direction, FaultRule, FaultRuleStatus, Nth, SyscallRecord, SyscallSelector};

use self::syscalls::ActiveRule;
use crate::arch::{Arch, Role};
use crate::backend::{
    Backend, ExitStatus, PtraceBackend, RawStopNotice, ResumeMode, SpawnOptions, StopCause, Tid, TraceeHandle,
    TraceeState,
};
use crate::breakpoints::{Breakpoint, BreakpointKind, Location, TrapId, TrapRef, TrapTable, WatchTrigger, Watchpoint};
use crate::error::{Error, Result};
use crate::process::{read_maps, MemoryMap, RegisterFile, StopReason, ThreadContext};
use crate::symbols::{self, AddressInfo, ElfCache, LoadedObject, StackFrame};
use crate::syscalls::syscall_name;

const TRAP_BRKPT: i32 = 1;
const TRAP_HWBKPT: i32 = 4;
const SI_KERNEL: i32 = 0x80;

/// What a callback wants the loop to do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Directive {
    Continue,
    Stop,
}

pub type TrapCallback = Box<dyn FnMut(&mut Debugger, &ThreadContext) -> Result<Directive>>;
pub type SignalCallback = TrapCallback;
pub type SyscallCallback = Box<dyn FnMut(&mut Debugger, &SyscallRecord) -> Result<Directive>>;

/// Boxes a closure as a breakpoint, watchpoint or signal callback.
pub fn trap_callback<F>(f: F) -> TrapCallback
where
    F: FnMut(&mut Debugger, &ThreadContext) -> Result<Directive> + 'static,
{
    Box::new(f)
}

pub fn syscall_callback<F>(f: F) -> SyscallCallback
where
    F: FnMut(&mut Debugger, &SyscallRecord) -> Result<Directive> + 'static,
{
    Box::new(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DebugEvent {
    pub seq: u64,
    pub tid: Tid,
    pub reason: StopReason,
    /// Nanoseconds since the debugger was created.
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Exited(ExitStatus),
    /// A callback asked to stop; the tracee is stopped at this event.
    Stopped(DebugEvent),
}

#[derive(Debug, Default)]
struct ThreadState {
    in_syscall: bool,
    entered_nr: u64,
    entered_args: [u64; 6],
    hijacked_nr: Option<u64>,
    pending_fault: Option<i32>,
    /// Stopped at this trap; it is stepped over before the next resume.
    at_trap: Option<TrapRef>,
    stop_reason: Option<StopReason>,
    pending_signal: Option<i32>,
}

struct Subscription {
    id: u64,
    nrs: Option<BTreeSet<u64>>,
    on_enter: Option<SyscallCallback>,
    on_exit: Option<SyscallCallback>,
    has_enter: bool,
    has_exit: bool,
}

impl Subscription {
    fn matches(&self, nr: u64) -> bool {
        self.nrs.as_ref().is_none_or(|s| s.contains(&nr))
    }
}

pub struct Debugger {
    backend: Box<dyn Backend>,
    arch: Arch,
    traps: TrapTable,
    trap_callbacks: HashMap<TrapId, TrapCallback>,
    threads: BTreeMap<Tid, ThreadState>,
    subs: Vec<Subscription>,
    rules: Vec<ActiveRule>,
    next_id: u64,
    signals: SignalPolicy,
    seq: u64,
    clock: Instant,
    log: Vec<DebugEvent>,
    log_enabled: bool,
    stdio: Option<StdioChannels>,
    elf_cache: ElfCache,
    pending: VecDeque<RawStopNotice>,
    dispatch: Option<(Tid, Direction)>,
}

impl Debugger {
    /// Spawns a tracee stopped before its first instruction.
    pub fn spawn(opts: SpawnOptions) -> Result<Self> {
        let backend = PtraceBackend::spawn(&opts)?;
        Ok(Self::with_backend(Box::new(backend)))
    }

    /// Convenience wrapper around [`Debugger::spawn`] with default options.
    pub fn launch<I, S>(path: impl Into<std::path::PathBuf>, args: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::spawn(SpawnOptions::new(path).args(args))
    }

    pub fn attach(pid: i32) -> Result<Self> {
        let backend = PtraceBackend::attach(pid)?;
        Ok(Self::with_backend(Box::new(backend)))
    }

    /// Drives an arbitrary transport. The backend must be stopped.
    pub fn with_backend(mut backend: Box<dyn Backend>) -> Self {
        let arch = backend.handle().arch;
        let stdio = backend.take_stdio().map(StdioChannels::new);
        let threads = backend.handle().tids.iter().map(|t| (*t, ThreadState::default())).collect();
        Debugger {
            backend,
            arch,
            traps: TrapTable::new(arch),
            trap_callbacks: HashMap::new(),
            threads,
            subs: Vec::new(),
            rules: Vec::new(),
            next_id: 1,
            signals: SignalPolicy::new(),
            seq: 0,
            clock: Instant::now(),
            log: Vec::new(),
            log_enabled: true,
            stdio,
            elf_cache: ElfCache::default(),
            pending: VecDeque::new(),
            dispatch: None,
        }
    }

    pub fn handle(&self) -> &TraceeHandle {
        self.backend.handle()
    }

    pub fn pid(&self) -> i32 {
        self.handle().pid
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn state(&self) -> TraceeState {
        self.handle().state
    }

    pub fn tids(&self) -> Vec<Tid> {
        self.handle().tids.clone()
    }

    pub fn exit_status(&self) -> Option<ExitStatus> {
        self.handle().exit
    }

    /// Tracee streams, when spawned with piped stdio.
    pub fn stdio(&self) -> Option<StdioChannels> {
        self.stdio.clone()
    }

    /// Every delivered event, in delivery order.
    pub fn events(&self) -> &[DebugEvent] {
        &self.log
    }

    /// Turns event recording off for long runs.
    pub fn set_event_log(&mut self, enabled: bool) {
        self.log_enabled = enabled;
        if !enabled {
            self.log.clear();
        }
    }

    fn require_stopped(&self, op: &'static str) -> Result<()> {
        self.handle().require(op, &[TraceeState::Stopped])
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    // ---- registers and memory ----

    pub fn read_registers(&mut self, tid: Tid) -> Result<RegisterFile> {
        self.backend.read_registers(tid)
    }

    pub fn write_registers(&mut self, tid: Tid, regs: &RegisterFile) -> Result<()> {
        self.backend.write_registers(tid, regs)
    }

    pub fn snapshot_thread(&mut self, tid: Tid) -> Result<ThreadContext> {
        if !self.handle().has_thread(tid) {
            return Err(Error::NoSuchThread(tid));
        }
        let regs = self.backend.read_registers(tid)?;
        let st = self.threads.get(&tid);
        Ok(ThreadContext {
            tid,
            stop_reason: st.and_then(|s| s.stop_reason),
            regs,
            in_syscall: st.is_some_and(|s| s.in_syscall),
        })
    }

    /// Reads memory with breakpoint patches replaced by the original bytes.
    pub fn read_memory(&mut self, addr: u64, len: usize) -> Result<Vec<u8>> {
        let mut buf = self.backend.read_memory(addr, len)?;
        self.traps.mask(addr, &mut buf);
        Ok(buf)
    }

    /// Reads memory exactly as the tracee sees it, patches included.
    pub fn read_memory_raw(&mut self, addr: u64, len: usize) -> Result<Vec<u8>> {
        self.backend.read_memory(addr, len)
    }

    /// Writes memory; bytes under a breakpoint patch update the saved
    /// original instead, so the breakpoint stays armed.
    pub fn write_memory(&mut self, addr: u64, data: &[u8]) -> Result<()> {
        self.require_stopped("write_memory")?;
        let mut data = data.to_vec();
        self.traps.absorb_write(addr, &mut data);
        self.backend.write_memory(addr, &data)
    }

    pub fn write_memory_raw(&mut self, addr: u64, data: &[u8]) -> Result<()> {
        self.backend.write_memory(addr, data)
    }

    pub fn read_u64(&mut self, addr: u64) -> Result<u64> {
        let b = self.read_memory(addr, 8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) -> Result<()> {
        self.write_memory(addr, &value.to_le_bytes())
    }

    // ---- maps and symbols ----

    pub fn maps(&self) -> Result<Vec<MemoryMap>> {
        self.require_stopped("load_maps")?;
        read_maps(self.pid())
    }

    pub fn objects(&mut self) -> Result<Vec<LoadedObject>> {
        let maps = self.maps()?;
        Ok(symbols::enumerate_objects(&maps, &mut self.elf_cache))
    }

    pub fn resolve_symbol(&mut self, name: &str, object: Option<&str>) -> Result<u64> {
        let objects = self.objects()?;
        symbols::resolve_symbol(&objects, name, object)
    }

    pub fn resolve_address(&mut self, addr: u64) -> Result<Option<AddressInfo>> {
        let objects = self.objects()?;
        Ok(symbols::resolve_address(&objects, addr))
    }

    pub fn resolve_location(&mut self, location: &Location) -> Result<u64> {
        match location {
            Location::Address(a) => Ok(*a),
            Location::Symbol { name, object, offset } => {
                let base = self.resolve_symbol(name, object.as_deref())?;
                Ok(base.wrapping_add(*offset))
            }
        }
    }

    /// Frame-pointer backtrace of `tid`, symbolized.
    pub fn backtrace(&mut self, tid: Tid, max_depth: usize) -> Result<Vec<StackFrame>> {
        let regs = self.snapshot_thread(tid)?.regs;
        let maps = self.maps()?;
        let code = self.read_memory(regs.pc(), 4).unwrap_or_default();
        let backend = &mut self.backend;
        let mut frames = symbols::walk_frames(&regs, &code, &maps, max_depth, |addr| {
            backend.read_memory(addr, 8).ok().map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        });
        let objects = symbols::enumerate_objects(&maps, &mut self.elf_cache);
        symbols::symbolize(&mut frames, &objects);
        Ok(frames)
    }

    // ---- breakpoints and watchpoints ----

    pub fn set_breakpoint(
        &mut self,
        location: impl Into<Location>,
        kind: BreakpointKind,
        one_shot: bool,
        callback: Option<TrapCallback>,
    ) -> Result<TrapId> {
        self.require_stopped("set_breakpoint")?;
        let addr = self.resolve_location(&location.into())?;
        let maps = self.maps()?;
        if !crate::process::find_map(&maps, addr).is_some_and(|m| m.perms.exec) {
            return Err(Error::BadLocation { addr });
        }
        let id = self.traps.add_breakpoint(&mut *self.backend, addr, kind, one_shot, callback.is_some())?;
        if let Some(cb) = callback {
            self.trap_callbacks.insert(id, cb);
        }
        Ok(id)
    }

    /// Persistent software breakpoint without a callback.
    pub fn breakpoint(&mut self, location: impl Into<Location>) -> Result<TrapId> {
        self.set_breakpoint(location, BreakpointKind::Software, false, None)
    }

    /// Persistent software breakpoint running `f` on every hit.
    pub fn breakpoint_with<F>(&mut self, location: impl Into<Location>, f: F) -> Result<TrapId>
    where
        F: FnMut(&mut Debugger, &ThreadContext) -> Result<Directive> + 'static,
    {
        self.set_breakpoint(location, BreakpointKind::Software, false, Some(Box::new(f)))
    }

    pub fn set_watchpoint(
        &mut self,
        address: u64,
        length: usize,
        trigger: WatchTrigger,
        callback: Option<TrapCallback>,
    ) -> Result<TrapId> {
        self.require_stopped("set_watchpoint")?;
        let id = self.traps.add_watchpoint(&mut *self.backend, address, length, trigger, callback.is_some())?;
        if let Some(cb) = callback {
            self.trap_callbacks.insert(id, cb);
        }
        Ok(id)
    }

    pub fn clear(&mut self, id: TrapId) -> Result<()> {
        self.require_stopped("clear")?;
        self.traps.remove(&mut *self.backend, id)?;
        self.trap_callbacks.remove(&id);
        Ok(())
    }

    pub fn set_enabled(&mut self, id: TrapId, enabled: bool) -> Result<()> {
        self.require_stopped("set_enabled")?;
        self.traps.set_enabled(&mut *self.backend, id, enabled)
    }

    pub fn breakpoint_info(&self, id: TrapId) -> Result<Breakpoint> {
        self.traps.breakpoint(id).cloned().ok_or(Error::NoSuchTrap(id))
    }

    pub fn watchpoint_info(&self, id: TrapId) -> Result<Watchpoint> {
        self.traps.watchpoint(id).cloned().ok_or(Error::NoSuchTrap(id))
    }

    pub fn breakpoints(&self) -> Vec<Breakpoint> {
        self.traps.breakpoints().cloned().collect()
    }

    pub fn watchpoints(&self) -> Vec<Watchpoint> {
        self.traps.watchpoints().cloned().collect()
    }

    // ---- syscalls ----

    pub fn trace_syscalls(
        &mut self,
        selector: impl Into<SyscallSelector>,
        on_enter: Option<SyscallCallback>,
        on_exit: Option<SyscallCallback>,
    ) -> Result<u64> {
        self.require_stopped("trace_syscalls")?;
        let nrs = selector.into().resolve(self.arch)?;
        let id = self.fresh_id();
        self.subs.push(Subscription {
            id,
            nrs,
            has_enter: on_enter.is_some(),
            has_exit: on_exit.is_some(),
            on_enter,
            on_exit,
        });
        Ok(id)
    }

    pub fn untrace(&mut self, id: u64) -> Result<()> {
        let before = self.subs.len();
        self.subs.retain(|s| s.id != id);
        if self.subs.len() == before {
            return Err(Error::NoSuchTrap(id));
        }
        Ok(())
    }

    /// Overrides the syscall being entered. Only valid inside an enter handler.
    pub fn hijack_syscall(&mut self, new_nr: Option<u64>, new_args: [Option<u64>; 6]) -> Result<()> {
        let tid = match self.dispatch {
            Some((tid, Direction::Enter)) => tid,
            _ => return Err(Error::InvalidContext("hijack_syscall")),
        };
        // A pending fault already replaced the call; it is not run.
        if self.threads.get(&tid).is_some_and(|s| s.pending_fault.is_some()) {
            return Ok(());
        }
        let mut regs = self.backend.read_registers(tid)?;
        if let Some(nr) = new_nr {
            regs.set_role(Role::SyscallNr, nr);
        }
        for (i, v) in new_args.iter().enumerate() {
            if let Some(v) = v {
                regs.set_role(Role::SyscallArg(i as u8), *v);
            }
        }
        self.backend.write_registers(tid, &regs)?;
        let st = self.threads.entry(tid).or_default();
        if new_nr.is_some() {
            st.hijacked_nr = new_nr;
        }
        st.entered_args = regs.syscall_args();
        Ok(())
    }

    /// Replaces the return value. Only valid inside an exit handler.
    pub fn set_syscall_return(&mut self, ret: i64) -> Result<()> {
        let tid = match self.dispatch {
            Some((tid, Direction::Exit)) => tid,
            _ => return Err(Error::InvalidContext("set_syscall_return")),
        };
        let mut regs = self.backend.read_registers(tid)?;
        regs.set_role(Role::SyscallRet, ret as u64);
        self.backend.write_registers(tid, &regs)
    }

    pub fn inject_fault(&mut self, rule: FaultRule) -> Result<u64> {
        syscalls::validate(&rule)?;
        let nr = crate::syscalls::SyscallTable::for_arch(self.arch).resolve(&rule.syscall)?;
        if let Some(other) = self.rules.iter().find(|r| r.conflicts_with(nr, &rule)) {
            return Err(Error::RuleConflict(format!(
                "rule {} already faults {} on overlapping occurrences",
                other.id, rule.syscall
            )));
        }
        let id = self.fresh_id();
        self.rules.push(ActiveRule { id, nr, rule, matched: 0, fired: 0, consumed: false });
        Ok(id)
    }

    pub fn remove_fault(&mut self, id: u64) -> Result<()> {
        let before = self.rules.len();
        self.rules.retain(|r| r.id != id);
        if self.rules.len() == before {
            return Err(Error::NoSuchTrap(id));
        }
        Ok(())
    }

    pub fn fault_status(&self, id: u64) -> Result<FaultRuleStatus> {
        self.rules
            .iter()
            .find(|r| r.id == id)
            .map(|r| FaultRuleStatus { id: r.id, nr: r.nr, matched: r.matched, fired: r.fired, consumed: r.consumed })
            .ok_or(Error::NoSuchTrap(id))
    }

    // ---- signals ----

    pub fn set_signal_policy(&mut self, policy: SignalPolicy) {
        self.signals = policy;
    }

    pub fn set_signal_action(&mut self, signo: i32, action: SignalAction) -> Result<()> {
        self.signals.set(signo, action)
    }

    // ---- lifecycle ----

    pub fn kill(&mut self) -> Result<()> {
        self.backend.kill()?;
        self.threads.clear();
        Ok(())
    }

    /// Removes every trap and lets the tracee run on untraced.
    pub fn detach(&mut self) -> Result<()> {
        self.require_stopped("detach")?;
        self.traps.remove_all(&mut *self.backend)?;
        self.trap_callbacks.clear();
        let deliver: Vec<(Tid, i32)> =
            self.threads.iter_mut().filter_map(|(tid, st)| st.pending_signal.take().map(|s| (*tid, s))).collect();
        self.backend.detach(&deliver)?;
        self.threads.clear();
        Ok(())
    }

    /// Resumes until an event without a callback, a callback asking to stop,
    /// or process exit. Signals without a policy entry stop here too and are
    /// delivered on the next resume.
    pub fn cont(&mut self) -> Result<DebugEvent> {
        self.require_stopped("cont")?;
        loop {
            if let Some(ev) = self.advance(true)? {
                return Ok(ev);
            }
        }
    }

    /// Runs the tracee, dispatching callbacks, until it exits or a callback
    /// returns [`Directive::Stop`].
    pub fn run_until_exit(&mut self) -> Result<RunOutcome> {
        self.require_stopped("run_until_exit")?;
        loop {
            if let Some(ev) = self.advance(false)? {
                return Ok(match ev.reason {
                    StopReason::Exited(st) => RunOutcome::Exited(st),
                    _ => RunOutcome::Stopped(ev),
                });
            }
        }
    }

    /// Executes one instruction on `tid`; other threads stay stopped.
    pub fn step(&mut self, tid: Tid) -> Result<DebugEvent> {
        self.require_stopped("step")?;
        if !self.handle().has_thread(tid) {
            return Err(Error::NoSuchThread(tid));
        }
        let at = self.threads.get_mut(&tid).and_then(|s| s.at_trap.take());
        let notice = match at {
            Some(TrapRef::Breakpoint(id)) if self.parked_on(tid, id)? => self.step_over_trap(tid, id)?,
            _ => {
                self.backend.single_step(tid)?;
                let n = self.backend.wait_notice()?;
                (n.cause != StopCause::Step).then_some(n)
            }
        };
        match notice {
            None => Ok(self.deliver(tid, StopReason::Step)),
            Some(n) => match self.process(n, true)? {
                Some(ev) => Ok(ev),
                None => Ok(*self.log.last().unwrap_or(&DebugEvent {
                    seq: self.seq,
                    tid,
                    reason: StopReason::Step,
                    timestamp_ns: self.now(),
                })),
            },
        }
    }

    /// Moves `tid` past the software breakpoint it is stopped on, leaving the
    /// breakpoint armed.
    pub fn step_over(&mut self, tid: Tid) -> Result<()> {
        self.require_stopped("step_over")?;
        if !self.handle().has_thread(tid) {
            return Err(Error::NoSuchThread(tid));
        }
        let pc = self.backend.read_registers(tid)?.pc();
        let id = match self.traps.software_at(pc) {
            Some(id) => id,
            None => return Err(Error::InvalidState { op: "step_over", state: self.state() }),
        };
        if let Some(st) = self.threads.get_mut(&tid) {
            st.at_trap = None;
        }
        if let Some(n) = self.step_over_trap(tid, id)? {
            self.pending.push_back(n);
        }
        Ok(())
    }

    // ---- engine internals ----

    fn now(&self) -> u64 {
        self.clock.elapsed().as_nanos() as u64
    }

    fn deliver(&mut self, tid: Tid, reason: StopReason) -> DebugEvent {
        self.seq += 1;
        let ev = DebugEvent { seq: self.seq, tid, reason, timestamp_ns: self.now() };
        if self.log_enabled {
            self.log.push(ev);
        }
        if let Some(st) = self.threads.get_mut(&tid) {
            st.stop_reason = Some(reason);
        }
        ev
    }

    /// Whether `tid` sits exactly on the enabled breakpoint `id`.
    fn parked_on(&mut self, tid: Tid, id: TrapId) -> Result<bool> {
        let Some(b) = self.traps.breakpoint(id) else {
            return Ok(false);
        };
        let (enabled, addr) = (b.enabled, b.address);
        Ok(enabled && self.backend.read_registers(tid)?.pc() == addr)
    }

    /// Lifts the trap, steps `tid` once and re-arms. Returns a notice that
    /// interrupted the step, if any.
    fn step_over_trap(&mut self, tid: Tid, id: TrapId) -> Result<Option<RawStopNotice>> {
        let b = self.traps.breakpoint(id).expect("parked on known breakpoint").clone();
        match b.slot {
            Some(slot) => self.backend.set_hw_slot(tid, slot, None)?,
            None => self.traps.lift(&mut *self.backend, id)?,
        }
        self.backend.single_step(tid)?;
        let n = self.backend.wait_notice()?;
        if self.state() != TraceeState::Stopped {
            return Ok(Some(n));
        }
        match b.slot {
            Some(slot) => {
                let config = self.traps.hw_config().into_iter().find(|(s, _)| *s == slot).map(|(_, t)| t);
                self.backend.set_hw_slot(tid, slot, config)?;
            }
            None => self.traps.relay(&mut *self.backend, id)?,
        }
        if n.cause == StopCause::Step {
            return Ok(None);
        }
        // Interrupted before the instruction retired: still parked on the trap.
        if self.backend.read_registers(tid)?.pc() == b.address {
            if let Some(st) = self.threads.get_mut(&tid) {
                st.at_trap = Some(TrapRef::Breakpoint(id));
            }
        }
        Ok(Some(n))
    }

    fn wants_syscall_stops(&self) -> bool {
        !self.subs.is_empty()
            || self.rules.iter().any(|r| !r.consumed)
            || self.threads.values().any(|s| s.in_syscall && s.pending_fault.is_some())
    }

    /// Steps parked threads over their traps, then resumes everything.
    fn resume_all(&mut self) -> Result<()> {
        let parked: Vec<(Tid, TrapRef)> =
            self.threads.iter_mut().filter_map(|(tid, st)| st.at_trap.take().map(|t| (*tid, t))).collect();
        for (tid, trap) in parked {
            let TrapRef::Breakpoint(id) = trap else { continue };
            if !self.parked_on(tid, id)? {
                continue;
            }
            if let Some(n) = self.step_over_trap(tid, id)? {
                self.pending.push_back(n);
                return Ok(());
            }
        }
        let mode = if self.wants_syscall_stops() {
            ResumeMode::SyscallStop
        } else {
            for st in self.threads.values_mut() {
                st.in_syscall = false;
                st.pending_fault = None;
            }
            ResumeMode::Continue
        };
        let deliver: Vec<(Tid, i32)> =
            self.threads.iter_mut().filter_map(|(tid, st)| st.pending_signal.take().map(|s| (*tid, s))).collect();
        self.backend.resume(mode, &deliver)
    }

    /// Runs to the next notice and handles it. Returns the event when the
    /// caller should stop there.
    fn advance(&mut self, stop_unhandled: bool) -> Result<Option<DebugEvent>> {
        let notice = match self.pending.pop_front() {
            Some(n) => n,
            None => {
                self.resume_all()?;
                match self.pending.pop_front() {
                    Some(n) => n,
                    None => self.backend.wait_notice()?,
                }
            }
        };
        self.process(notice, stop_unhandled)
    }

    fn process(&mut self, n: RawStopNotice, stop_unhandled: bool) -> Result<Option<DebugEvent>> {
        let tid = n.tid;
        match n.cause {
            StopCause::Exit(st) => {
                let ev = self.deliver(tid, StopReason::Exited(st));
                self.threads.clear();
                Ok(Some(ev))
            }
            StopCause::Clone(new) => {
                self.threads.insert(new, ThreadState::default());
                self.traps.program_thread(&mut *self.backend, new)?;
                self.deliver(tid, StopReason::ThreadCreated(new));
                Ok(None)
            }
            StopCause::Exec => {
                // The old image is gone, and with it every patch and slot.
                self.traps.forget_all();
                self.trap_callbacks.clear();
                self.elf_cache.clear();
                let live = self.handle().tids.clone();
                self.threads.retain(|t, _| live.contains(t));
                Ok(None)
            }
            StopCause::Step => Ok(Some(self.deliver(tid, StopReason::Step))),
            StopCause::SyscallTrap => self.on_syscall(tid, stop_unhandled),
            StopCause::Signal(libc::SIGTRAP) => self.on_sigtrap(tid, stop_unhandled),
            StopCause::Signal(sig) => self.on_signal(tid, sig, stop_unhandled),
        }
    }

    fn on_sigtrap(&mut self, tid: Tid, stop_unhandled: bool) -> Result<Option<DebugEvent>> {
        let mut regs = self.backend.read_registers(tid)?;
        let site = regs.pc().wrapping_sub(self.arch.trap_pc_offset());
        if let Some(id) = self.traps.software_at(site) {
            regs.set_pc(site);
            self.backend.write_registers(tid, &regs)?;
            return self.on_hit(tid, TrapRef::Breakpoint(id), stop_unhandled);
        }
        let info = self.backend.signal_info(tid)?;
        if info.code == TRAP_HWBKPT {
            let owner = self.backend.take_hw_hit(tid)?.and_then(|s| self.traps.slot_owner(s));
            return match owner {
                Some(trap) => self.on_hit(tid, trap, stop_unhandled),
                None => Ok(None),
            };
        }
        let sw_code = match self.arch {
            Arch::Amd64 => SI_KERNEL,
            Arch::Aarch64 => TRAP_BRKPT,
        };
        if info.code == sw_code {
            // A trap we removed while it was already pending in another thread.
            let width = self.arch.trap_instruction().len();
            let here = self.backend.read_memory(site, width).unwrap_or_default();
            if here != self.arch.trap_instruction() {
                regs.set_pc(site);
                self.backend.write_registers(tid, &regs)?;
                return Ok(None);
            }
        }
        self.on_signal(tid, libc::SIGTRAP, stop_unhandled)
    }

    fn on_hit(&mut self, tid: Tid, trap: TrapRef, stop_unhandled: bool) -> Result<Option<DebugEvent>> {
        self.traps.record_hit(trap);
        let (id, reason, one_shot) = match trap {
            TrapRef::Breakpoint(id) => {
                let one_shot = self.traps.breakpoint(id).is_some_and(|b| b.one_shot);
                (id, StopReason::Breakpoint(id), one_shot)
            }
            TrapRef::Watchpoint(id) => (id, StopReason::Watchpoint(id), false),
        };
        if one_shot {
            self.traps.remove(&mut *self.backend, id)?;
        } else if matches!(trap, TrapRef::Breakpoint(_)) {
            if let Some(st) = self.threads.get_mut(&tid) {
                st.at_trap = Some(trap);
            }
        }
        let ev = self.deliver(tid, reason);
        let Some(mut cb) = self.trap_callbacks.remove(&id) else {
            return Ok(stop_unhandled.then_some(ev));
        };
        let ctx = self.snapshot_thread(tid)?;
        let result = cb(self, &ctx);
        let alive = self.traps.breakpoint(id).is_some() || self.traps.watchpoint(id).is_some();
        if alive && !self.trap_callbacks.contains_key(&id) {
            self.trap_callbacks.insert(id, cb);
        }
        Ok((result? == Directive::Stop).then_some(ev))
    }

    fn on_signal(&mut self, tid: Tid, sig: i32, stop_unhandled: bool) -> Result<Option<DebugEvent>> {
        let ev = self.deliver(tid, StopReason::Signal(sig));
        let action = self.signals.take(sig);
        let pass = match &action {
            None | Some(SignalAction::Pass) => true,
            Some(SignalAction::Suppress) => false,
            Some(SignalAction::Callback(_, d)) => *d == Disposition::Pass,
        };
        if pass {
            if let Some(st) = self.threads.get_mut(&tid) {
                st.pending_signal = Some(sig);
            }
        }
        match action {
            None => Ok(stop_unhandled.then_some(ev)),
            Some(SignalAction::Callback(mut cb, d)) => {
                let ctx = self.snapshot_thread(tid);
                let result = ctx.and_then(|ctx| cb(self, &ctx));
                self.signals.restore(sig, SignalAction::Callback(cb, d));
                Ok((result? == Directive::Stop).then_some(ev))
            }
            Some(a) => {
                self.signals.restore(sig, a);
                Ok(None)
            }
        }
    }

    fn on_syscall(&mut self, tid: Tid, stop_unhandled: bool) -> Result<Option<DebugEvent>> {
        let mut regs = self.backend.read_registers(tid)?;
        let entering = !self.threads.get(&tid).is_some_and(|s| s.in_syscall);
        let (nr, orig_nr, args, ret, injected) = if entering {
            let nr = regs.syscall_nr();
            let args = regs.syscall_args();
            let fault = self.rules.iter_mut().find_map(|r| r.observe(nr, &args).then_some(r.rule.errno));
            if fault.is_some() {
                regs.set_role(Role::SyscallNr, self.arch.harmless_syscall());
                self.backend.write_registers(tid, &regs)?;
            }
            let st = self.threads.entry(tid).or_default();
            st.in_syscall = true;
            st.entered_nr = nr;
            st.entered_args = args;
            st.hijacked_nr = None;
            st.pending_fault = fault;
            (nr, nr, args, None, fault.is_some())
        } else {
            let st = self.threads.entry(tid).or_default();
            st.in_syscall = false;
            let fault = st.pending_fault.take();
            let nr = match fault {
                Some(_) => st.entered_nr,
                None => st.hijacked_nr.unwrap_or(st.entered_nr),
            };
            let args = st.entered_args;
            if let Some(errno) = fault {
                regs.set_role(Role::SyscallRet, (-(errno as i64)) as u64);
                self.backend.write_registers(tid, &regs)?;
            }
            (nr, st.entered_nr, args, Some(regs.syscall_ret()), fault.is_some())
        };
        let direction = if entering { Direction::Enter } else { Direction::Exit };
        // A hijacked exit is also shown to whoever subscribed to the original call.
        let matching: Vec<usize> =
            (0..self.subs.len()).filter(|&i| self.subs[i].matches(nr) || self.subs[i].matches(orig_nr)).collect();
        if matching.is_empty() && !injected {
            return Ok(None);
        }
        let reason = match ret {
            None => StopReason::SyscallEnter { nr },
            Some(ret) => StopReason::SyscallExit { nr, ret },
        };
        let ev = self.deliver(tid, reason);
        let record =
            SyscallRecord { tid, nr, name: syscall_name(self.arch, nr), args, ret, direction, seq: ev.seq, injected };
        let mut handled = false;
        let mut stop = false;
        for i in matching {
            let id = self.subs[i].id;
            let cb = match direction {
                Direction::Enter => self.subs[i].on_enter.take(),
                Direction::Exit => self.subs[i].on_exit.take(),
            };
            let Some(mut cb) = cb else { continue };
            handled = true;
            self.dispatch = Some((tid, direction));
            let result = cb(self, &record);
            self.dispatch = None;
            if let Some(sub) = self.subs.iter_mut().find(|s| s.id == id) {
                let slot = match direction {
                    Direction::Enter => &mut sub.on_enter,
                    Direction::Exit => &mut sub.on_exit,
                };
                slot.get_or_insert(cb);
            }
            stop |= result? == Directive::Stop;
        }
        let subscribed = self.subs.iter().any(|s| {
            (s.matches(nr) || s.matches(orig_nr))
                && match direction {
                    Direction::Enter => !s.has_enter,
                    Direction::Exit => !s.has_exit,
                }
        });
        if stop || (stop_unhandled && !handled && subscribed) {
            return Ok(Some(ev));
        }
        Ok(None)
    }
}

impl std::fmt::Debug for Debugger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Debugger")
            .field("handle", self.handle())
            .field("traps", &self.traps)
            .field("seq", &self.seq)
            .finish_non_exhaustive()
    }
}
