//! Linux ptrace transport.
//!
//! Spawned tracees request tracing themselves and stop at the post-exec trap.
//! Attached processes are seized thread by thread and interrupted. Every stop
//! brings the remaining threads to a halt with a thread-directed SIGSTOP;
//! stops that race with that SIGSTOP are queued and surfaced on the next
//! resume without running anything.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::ffi::c_void;
use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use libc::c_int;
use nix::errno::Errno;
use nix::sys::ptrace as pt;
use nix::sys::signal::Signal;
use nix::unistd::Pid;

use super::{
    Backend, ExitStatus, HwKind, HwTrap, RawStopNotice, ResumeMode, SigInfo, SpawnOptions, StdioMode, StdioPipes,
    StopCause, Tid, TraceeHandle, TraceeState,
};
use crate::arch::Arch;
use crate::error::{Error, Result};
use crate::process::RegisterFile;
use crate::symbols::elf;

/// Transfers longer than this go through `process_vm_readv`/`writev`.
const BULK_THRESHOLD: usize = 16;
const WORD: u64 = 8;

#[derive(Debug, Default)]
struct ThreadRun {
    running: bool,
    /// A SIGSTOP (or seize interrupt) we sent has not been consumed yet.
    expect_stop: bool,
    deferred_signal: Option<i32>,
    regs: Option<CachedRegs>,
    #[cfg(target_arch = "aarch64")]
    hw: [Option<HwTrap>; 16],
}

#[derive(Debug)]
struct CachedRegs {
    regs: RegisterFile,
    dirty: bool,
    #[cfg_attr(not(target_arch = "aarch64"), allow(dead_code))]
    original_nr: u64,
}

enum Status {
    Exited(ExitStatus),
    SyscallTrap,
    Event(c_int),
    /// Group stop or seize interrupt.
    EventStop(i32),
    Signal(i32),
}

fn decode_status(status: c_int) -> Status {
    if libc::WIFEXITED(status) {
        return Status::Exited(ExitStatus::Code(libc::WEXITSTATUS(status)));
    }
    if libc::WIFSIGNALED(status) {
        return Status::Exited(ExitStatus::Signaled(libc::WTERMSIG(status)));
    }
    let sig = libc::WSTOPSIG(status);
    let event = status >> 16;
    if sig == libc::SIGTRAP | 0x80 {
        Status::SyscallTrap
    } else if event == libc::PTRACE_EVENT_STOP {
        Status::EventStop(sig)
    } else if event != 0 {
        Status::Event(event)
    } else {
        Status::Signal(sig)
    }
}

fn waitpid_raw(pid: c_int, flags: c_int) -> Result<Option<(Tid, c_int)>> {
    loop {
        let mut status: c_int = 0;
        let r = unsafe { libc::waitpid(pid, &mut status, flags) };
        if r > 0 {
            return Ok(Some((r, status)));
        }
        if r == 0 {
            return Ok(None);
        }
        match Errno::last() {
            Errno::EINTR => continue,
            Errno::ECHILD => return Err(Error::ProcessLost("no traced threads left".into())),
            e => return Err(Error::os("waitpid", e)),
        }
    }
}

fn tgkill(pid: i32, tid: Tid, sig: c_int) -> nix::Result<()> {
    let r = unsafe { libc::syscall(libc::SYS_tgkill, pid, tid, sig) };
    Errno::result(r).map(drop)
}

fn raw_resume(request: c_int, tid: Tid, sig: i32) -> nix::Result<()> {
    let r = unsafe { libc::ptrace(request as _, tid, std::ptr::null_mut::<c_void>(), sig as usize as *mut c_void) };
    Errno::result(r).map(drop)
}

fn request_for(mode: ResumeMode) -> c_int {
    match mode {
        ResumeMode::Continue => libc::PTRACE_CONT as c_int,
        ResumeMode::SyscallStop => libc::PTRACE_SYSCALL as c_int,
    }
}

fn list_tasks(pid: i32) -> Result<Vec<Tid>> {
    let dir = fs::read_dir(format!("/proc/{pid}/task")).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::NoSuchProcess(pid),
        _ => Error::Io(e),
    })?;
    let mut tids: Vec<Tid> =
        dir.filter_map(|e| e.ok()).filter_map(|e| e.file_name().to_str().and_then(|s| s.parse().ok())).collect();
    tids.sort_unstable();
    Ok(tids)
}

fn target_arch_of(path: &Path) -> Result<Arch> {
    let host = Arch::host().ok_or_else(|| Error::UnsupportedTarget("host architecture".into()))?;
    let arch = match elf::detect_arch(path) {
        Ok(arch) => arch,
        // Interpreter scripts run on the host architecture.
        Err(Error::ElfParse { .. }) if is_script(path) => host,
        Err(Error::ElfParse { cause, .. }) => {
            return Err(Error::Spawn {
                path: path.display().to_string(),
                reason: format!("not an ELF executable ({cause})"),
            })
        }
        Err(e) => return Err(e),
    };
    if arch != host {
        return Err(Error::UnsupportedTarget(format!("{} targets {arch}, tracer runs on {host}", path.display())));
    }
    Ok(arch)
}

fn is_script(path: &Path) -> bool {
    fs::read(path).is_ok_and(|b| b.starts_with(b"#!"))
}

pub struct PtraceBackend {
    handle: TraceeHandle,
    threads: BTreeMap<Tid, ThreadRun>,
    queue: VecDeque<RawStopNotice>,
    /// Stops reported by threads we have not yet adopted through a clone event.
    early_stops: HashSet<Tid>,
    stepping: Option<Tid>,
    run_mode: ResumeMode,
    spawned: bool,
    stdio: Option<StdioPipes>,
}

impl PtraceBackend {
    /// Starts `opts.path` under trace, stopped at the post-exec trap.
    pub fn spawn(opts: &SpawnOptions) -> Result<Self> {
        let path = &opts.path;
        let spawn_err = |reason: String| Error::Spawn { path: path.display().to_string(), reason };
        let meta = fs::metadata(path).map_err(|e| spawn_err(e.to_string()))?;
        if !meta.is_file() || meta.permissions().mode() & 0o111 == 0 {
            return Err(spawn_err("not an executable file".into()));
        }
        let arch = target_arch_of(path)?;

        let mut cmd = Command::new(path);
        cmd.args(&opts.args);
        if let Some(env) = &opts.env {
            cmd.env_clear().envs(env);
        }
        let (stdin, stdout, stderr) = match opts.stdio {
            StdioMode::Pipe => (Stdio::piped(), Stdio::piped(), Stdio::piped()),
            StdioMode::Inherit => (Stdio::inherit(), Stdio::inherit(), Stdio::inherit()),
            StdioMode::Null => (Stdio::null(), Stdio::null(), Stdio::null()),
        };
        cmd.stdin(stdin).stdout(stdout).stderr(stderr);

        let disable_aslr = opts.disable_aslr;
        // Only async-signal-safe calls between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                if disable_aslr {
                    let current = libc::personality(0xffff_ffff);
                    if current != -1 {
                        libc::personality((current as libc::c_ulong) | libc::ADDR_NO_RANDOMIZE as libc::c_ulong);
                    }
                }
                if libc::ptrace(libc::PTRACE_TRACEME, 0, 0, 0) == -1 {
                    return Err(io::Error::last_os_error());
                }
                Ok(())
            });
        }
        let mut child = cmd.spawn().map_err(|e| match e.raw_os_error() {
            Some(libc::EPERM) => Error::Permission(format!("trace request refused: {e}")),
            _ => spawn_err(e.to_string()),
        })?;
        let pid = child.id() as i32;
        let stdio = match (child.stdin.take(), child.stdout.take(), child.stderr.take()) {
            (Some(stdin), Some(stdout), Some(stderr)) => Some(StdioPipes { stdin, stdout, stderr }),
            _ => None,
        };
        // The child is reaped through waitpid below, never through `Child`.
        drop(child);

        let (_, status) = waitpid_raw(pid, libc::__WALL)?.expect("blocking waitpid");
        match decode_status(status) {
            Status::Signal(libc::SIGTRAP) => {}
            Status::Exited(st) => return Err(spawn_err(format!("exited before the first stop: {st:?}"))),
            _ => {
                let _ = nix::sys::signal::kill(Pid::from_raw(pid), Signal::SIGKILL);
                let _ = waitpid_raw(pid, libc::__WALL);
                return Err(spawn_err("unexpected first stop".into()));
            }
        }
        let options = pt::Options::PTRACE_O_TRACESYSGOOD
            | pt::Options::PTRACE_O_TRACECLONE
            | pt::Options::PTRACE_O_TRACEEXEC
            | pt::Options::PTRACE_O_EXITKILL;
        pt::setoptions(Pid::from_raw(pid), options).map_err(|e| Error::os("PTRACE_SETOPTIONS", e))?;

        let mut handle = TraceeHandle::new(pid, arch, disable_aslr);
        handle.set_state(TraceeState::Stopped);
        let mut threads = BTreeMap::new();
        threads.insert(pid, ThreadRun::default());
        log::debug!("spawned {} as pid {pid}", path.display());
        Ok(PtraceBackend {
            handle,
            threads,
            queue: VecDeque::new(),
            early_stops: HashSet::new(),
            stepping: None,
            run_mode: ResumeMode::Continue,
            spawned: true,
            stdio,
        })
    }

    /// Seizes every thread of a running process and interrupts it.
    pub fn attach(pid: i32) -> Result<Self> {
        if pid <= 0 {
            return Err(Error::NoSuchProcess(pid));
        }
        let exe = fs::read_link(format!("/proc/{pid}/exe")).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => Error::NoSuchProcess(pid),
            io::ErrorKind::PermissionDenied => Error::Permission(format!("/proc/{pid}/exe")),
            _ => Error::Io(e),
        })?;
        let arch = target_arch_of(&exe)?;
        let aslr_disabled = fs::read_to_string(format!("/proc/{pid}/personality"))
            .ok()
            .and_then(|s| u64::from_str_radix(s.trim(), 16).ok())
            .is_some_and(|p| p & libc::ADDR_NO_RANDOMIZE as u64 != 0);

        let mut backend = PtraceBackend {
            handle: TraceeHandle::new(pid, arch, aslr_disabled),
            threads: BTreeMap::new(),
            queue: VecDeque::new(),
            early_stops: HashSet::new(),
            stepping: None,
            run_mode: ResumeMode::Continue,
            spawned: false,
            stdio: None,
        };
        let options =
            pt::Options::PTRACE_O_TRACESYSGOOD | pt::Options::PTRACE_O_TRACECLONE | pt::Options::PTRACE_O_TRACEEXEC;

        // Threads may be created while we attach; repeat until the set is stable.
        loop {
            let tids = list_tasks(pid)?;
            let fresh: Vec<Tid> = tids.into_iter().filter(|t| !backend.threads.contains_key(t)).collect();
            if fresh.is_empty() {
                break;
            }
            for tid in fresh {
                match pt::seize(Pid::from_raw(tid), options) {
                    Ok(()) => {}
                    Err(Errno::ESRCH) if tid != pid => continue,
                    Err(Errno::ESRCH) => return Err(Error::NoSuchProcess(pid)),
                    Err(e) => return Err(Error::os("PTRACE_SEIZE", e)),
                }
                pt::interrupt(Pid::from_raw(tid)).map_err(|e| Error::os("PTRACE_INTERRUPT", e))?;
                backend.threads.insert(tid, ThreadRun { expect_stop: true, ..Default::default() });
                backend.await_expected_stop(tid)?;
            }
        }
        backend.handle.tids = backend.threads.keys().copied().collect();
        if let Some(pos) = backend.handle.tids.iter().position(|t| *t == pid) {
            backend.handle.tids.swap(0, pos);
        }
        backend.handle.set_state(TraceeState::Stopped);
        Ok(backend)
    }

    pub fn pid(&self) -> i32 {
        self.handle.pid
    }

    fn require(&self, op: &'static str, allowed: &[TraceeState]) -> Result<()> {
        self.handle.require(op, allowed)
    }

    fn thread_mut(&mut self, tid: Tid) -> Result<&mut ThreadRun> {
        self.threads.get_mut(&tid).ok_or(Error::NoSuchThread(tid))
    }

    /// Thread used for memory transfers.
    fn mem_tid(&self) -> Tid {
        if self.threads.contains_key(&self.handle.pid) {
            self.handle.pid
        } else {
            *self.threads.keys().next().unwrap_or(&self.handle.pid)
        }
    }

    fn sync_tids(&mut self) {
        let pid = self.handle.pid;
        let mut tids: Vec<Tid> = self.threads.keys().copied().filter(|t| *t != pid).collect();
        if self.threads.contains_key(&pid) {
            tids.insert(0, pid);
        }
        self.handle.tids = tids;
    }

    fn forget_thread(&mut self, tid: Tid) {
        self.threads.remove(&tid);
        self.queue.retain(|n| n.tid != tid);
        self.sync_tids();
    }

    /// Waits for a SIGSTOP/interrupt we sent to `tid`. Other stops reported
    /// first are queued; the expected stop then arrives later and is swallowed.
    fn await_expected_stop(&mut self, tid: Tid) -> Result<()> {
        loop {
            let Some((_, status)) = waitpid_raw(tid, libc::__WALL)? else {
                continue;
            };
            let t = self.thread_mut(tid)?;
            t.running = false;
            match decode_status(status) {
                Status::Signal(libc::SIGSTOP) | Status::EventStop(_) if t.expect_stop => {
                    t.expect_stop = false;
                    return Ok(());
                }
                Status::Exited(st) => {
                    if tid == self.handle.pid {
                        self.queue.push_back(RawStopNotice { tid, cause: StopCause::Exit(st) });
                    }
                    self.forget_thread(tid);
                    return Ok(());
                }
                other => {
                    if let Some(cause) = self.classify_stop(tid, other)? {
                        self.queue.push_back(RawStopNotice { tid, cause });
                    }
                    return Ok(());
                }
            }
        }
    }

    /// Turns a stop status into a notice cause, handling clone adoption.
    fn classify_stop(&mut self, tid: Tid, status: Status) -> Result<Option<StopCause>> {
        Ok(Some(match status {
            Status::SyscallTrap => StopCause::SyscallTrap,
            Status::Event(libc::PTRACE_EVENT_CLONE)
            | Status::Event(libc::PTRACE_EVENT_FORK)
            | Status::Event(libc::PTRACE_EVENT_VFORK) => {
                let new = pt::getevent(Pid::from_raw(tid)).map_err(|e| Error::os("PTRACE_GETEVENTMSG", e))? as Tid;
                self.adopt(new)?;
                StopCause::Clone(new)
            }
            Status::Event(libc::PTRACE_EVENT_EXEC) => {
                // Exec kills every other thread; the survivor takes the leader's tid.
                let pid = self.handle.pid;
                self.threads.retain(|t, _| *t == pid);
                self.threads.entry(pid).or_default();
                self.sync_tids();
                StopCause::Exec
            }
            Status::Event(_) => return Ok(None),
            Status::EventStop(sig) => StopCause::Signal(sig),
            Status::Signal(libc::SIGTRAP) if self.stepping == Some(tid) => {
                self.stepping = None;
                StopCause::Step
            }
            Status::Signal(sig) => StopCause::Signal(sig),
            Status::Exited(st) => StopCause::Exit(st),
        }))
    }

    /// Registers a thread created by clone; returns once it is stopped.
    fn adopt(&mut self, tid: Tid) -> Result<()> {
        self.threads.insert(tid, ThreadRun::default());
        self.sync_tids();
        if self.early_stops.remove(&tid) {
            return Ok(());
        }
        loop {
            let Some((_, status)) = waitpid_raw(tid, libc::__WALL)? else {
                continue;
            };
            match decode_status(status) {
                Status::Exited(_) => {
                    self.forget_thread(tid);
                    return Ok(());
                }
                _ => return Ok(()),
            }
        }
    }

    /// Brings every running thread to a stop.
    fn stop_others(&mut self) -> Result<()> {
        let pid = self.handle.pid;
        let running: Vec<Tid> = self.threads.iter().filter(|(_, t)| t.running).map(|(tid, _)| *tid).collect();
        for &tid in &running {
            match tgkill(pid, tid, libc::SIGSTOP) {
                Ok(()) => self.thread_mut(tid)?.expect_stop = true,
                Err(Errno::ESRCH) => {}
                Err(e) => return Err(Error::os("tgkill", e)),
            }
        }
        for tid in running {
            if self.threads.get(&tid).is_some_and(|t| t.running) {
                self.await_expected_stop(tid)?;
            }
        }
        Ok(())
    }

    fn flush_registers(&mut self) -> Result<()> {
        let arch = self.handle.arch;
        for (tid, t) in self.threads.iter_mut() {
            if let Some(c) = t.regs.as_mut().filter(|c| c.dirty) {
                set_regs(arch, *tid, &c.regs, c.original_nr)?;
                c.dirty = false;
                c.original_nr = c.regs.syscall_nr();
            }
        }
        Ok(())
    }

    fn resume_thread(&mut self, tid: Tid, request: c_int) -> Result<()> {
        let t = self.thread_mut(tid)?;
        let sig = t.deferred_signal.take().unwrap_or(0);
        t.regs = None;
        match raw_resume(request, tid, sig) {
            Ok(()) => {
                t.running = true;
                Ok(())
            }
            Err(Errno::ESRCH) => {
                // Killed underneath us; its exit is collected by the wait loop.
                t.running = true;
                Ok(())
            }
            Err(e) => Err(Error::os("ptrace resume", e)),
        }
    }

    fn finish(&mut self, st: ExitStatus) {
        self.threads.clear();
        self.queue.clear();
        self.handle.tids.clear();
        self.handle.exit = Some(st);
        self.handle.set_state(TraceeState::Exited);
    }

    /// Waits for the stepping thread specifically.
    fn wait_step(&mut self, tid: Tid) -> Result<RawStopNotice> {
        loop {
            let Some((_, status)) = waitpid_raw(tid, libc::__WALL)? else {
                continue;
            };
            let status = decode_status(status);
            if let Status::Exited(st) = status {
                self.stepping = None;
                if tid == self.handle.pid {
                    self.finish(st);
                    return Ok(RawStopNotice { tid, cause: StopCause::Exit(st) });
                }
                self.forget_thread(tid);
                return self.collect_group_exit();
            }
            let t = self.thread_mut(tid)?;
            t.running = false;
            if matches!(status, Status::Signal(libc::SIGSTOP) | Status::EventStop(_)) && t.expect_stop {
                t.expect_stop = false;
                raw_resume(libc::PTRACE_SINGLESTEP as c_int, tid, 0).map_err(|e| Error::os("PTRACE_SINGLESTEP", e))?;
                t.running = true;
                continue;
            }
            if let Some(cause) = self.classify_stop(tid, status)? {
                self.stepping = None;
                self.handle.set_state(TraceeState::Stopped);
                return Ok(RawStopNotice { tid, cause });
            }
            raw_resume(libc::PTRACE_SINGLESTEP as c_int, tid, 0).map_err(|e| Error::os("PTRACE_SINGLESTEP", e))?;
            self.thread_mut(tid)?.running = true;
        }
    }

    /// The stepped thread vanished: either the whole group is exiting, or
    /// only that thread left and the rest remain stopped.
    fn collect_group_exit(&mut self) -> Result<RawStopNotice> {
        let deadline = Instant::now() + Duration::from_millis(200);
        while Instant::now() < deadline {
            match waitpid_raw(-1, libc::__WALL | libc::__WNOTHREAD | libc::WNOHANG)? {
                Some((tid, status)) => {
                    if let Status::Exited(st) = decode_status(status) {
                        if tid == self.handle.pid {
                            self.finish(st);
                            return Ok(RawStopNotice { tid, cause: StopCause::Exit(st) });
                        }
                        self.forget_thread(tid);
                    }
                }
                None => std::thread::sleep(Duration::from_millis(1)),
            }
        }
        Err(Error::ProcessLost("stepped thread exited".into()))
    }

    fn reap_all(&mut self) {
        let pid = self.handle.pid;
        let others: Vec<Tid> = self.threads.keys().copied().filter(|t| *t != pid).collect();
        for tid in others {
            while let Ok(Some((_, status))) = waitpid_raw(tid, libc::__WALL) {
                if matches!(decode_status(status), Status::Exited(_)) {
                    break;
                }
            }
        }
        while let Ok(Some((_, status))) = waitpid_raw(pid, libc::__WALL) {
            if matches!(decode_status(status), Status::Exited(_)) {
                break;
            }
        }
    }

    fn debug_reg_offset(i: usize) -> usize {
        #[cfg(target_arch = "x86_64")]
        {
            std::mem::offset_of!(libc::user, u_debugreg) + i * 8
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            i
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn get_regs(arch: Arch, tid: Tid) -> Result<RegisterFile> {
    let r = pt::getregs(Pid::from_raw(tid)).map_err(|e| match e {
        Errno::ESRCH => Error::NoSuchThread(tid),
        e => Error::os("PTRACE_GETREGS", e),
    })?;
    let values = vec![
        r.r15, r.r14, r.r13, r.r12, r.rbp, r.rbx, r.r11, r.r10, r.r9, r.r8, r.rax, r.rcx, r.rdx, r.rsi, r.rdi,
        r.orig_rax, r.rip, r.cs, r.eflags, r.rsp, r.ss, r.fs_base, r.gs_base, r.ds, r.es, r.fs, r.gs,
    ];
    Ok(RegisterFile::from_values(arch, values))
}

#[cfg(target_arch = "x86_64")]
fn set_regs(_arch: Arch, tid: Tid, regs: &RegisterFile, _original_nr: u64) -> Result<()> {
    let v = regs.values();
    let r = libc::user_regs_struct {
        r15: v[0],
        r14: v[1],
        r13: v[2],
        r12: v[3],
        rbp: v[4],
        rbx: v[5],
        r11: v[6],
        r10: v[7],
        r9: v[8],
        r8: v[9],
        rax: v[10],
        rcx: v[11],
        rdx: v[12],
        rsi: v[13],
        rdi: v[14],
        orig_rax: v[15],
        rip: v[16],
        cs: v[17],
        eflags: v[18],
        rsp: v[19],
        ss: v[20],
        fs_base: v[21],
        gs_base: v[22],
        ds: v[23],
        es: v[24],
        fs: v[25],
        gs: v[26],
    };
    pt::setregs(Pid::from_raw(tid), r).map_err(|e| match e {
        Errno::ESRCH => Error::NoSuchThread(tid),
        e => Error::os("PTRACE_SETREGS", e),
    })
}

#[cfg(target_arch = "aarch64")]
const NT_ARM_SYSTEM_CALL: c_int = 0x404;
#[cfg(target_arch = "aarch64")]
const NT_ARM_HW_BREAK: c_int = 0x402;
#[cfg(target_arch = "aarch64")]
const NT_ARM_HW_WATCH: c_int = 0x403;

#[cfg(target_arch = "aarch64")]
fn regset<T>(request: libc::c_uint, tid: Tid, kind: c_int, data: &mut T) -> nix::Result<()> {
    let mut iov = libc::iovec { iov_base: data as *mut T as *mut c_void, iov_len: std::mem::size_of::<T>() };
    let r = unsafe { libc::ptrace(request, tid, kind as usize as *mut c_void, &mut iov as *mut _ as *mut c_void) };
    Errno::result(r).map(drop)
}

#[cfg(target_arch = "aarch64")]
fn get_regs(arch: Arch, tid: Tid) -> Result<RegisterFile> {
    let mut r: libc::user_regs_struct = unsafe { std::mem::zeroed() };
    regset(libc::PTRACE_GETREGSET, tid, libc::NT_PRSTATUS, &mut r).map_err(|e| match e {
        Errno::ESRCH => Error::NoSuchThread(tid),
        e => Error::os("PTRACE_GETREGSET", e),
    })?;
    let mut values = r.regs.to_vec();
    values.extend([r.sp, r.pc, r.pstate]);
    Ok(RegisterFile::from_values(arch, values))
}

#[cfg(target_arch = "aarch64")]
fn set_regs(_arch: Arch, tid: Tid, regs: &RegisterFile, original_nr: u64) -> Result<()> {
    let v = regs.values();
    let mut r: libc::user_regs_struct = unsafe { std::mem::zeroed() };
    r.regs.copy_from_slice(&v[..31]);
    r.sp = v[31];
    r.pc = v[32];
    r.pstate = v[33];
    regset(libc::PTRACE_SETREGSET, tid, libc::NT_PRSTATUS, &mut r).map_err(|e| Error::os("PTRACE_SETREGSET", e))?;
    // The syscall number is only honoured through its own regset.
    if regs.syscall_nr() != original_nr {
        let mut nr = regs.syscall_nr() as i32;
        regset(libc::PTRACE_SETREGSET, tid, NT_ARM_SYSTEM_CALL, &mut nr)
            .map_err(|e| Error::os("PTRACE_SETREGSET", e))?;
    }
    Ok(())
}

#[cfg(target_arch = "aarch64")]
#[repr(C)]
#[derive(Clone, Copy, Default)]
struct HwDebugReg {
    addr: u64,
    ctrl: u32,
    pad: u32,
}

#[cfg(target_arch = "aarch64")]
#[repr(C)]
struct HwDebugState {
    dbg_info: u32,
    pad: u32,
    regs: [HwDebugReg; 16],
}

#[cfg(target_arch = "aarch64")]
fn write_hw_state(tid: Tid, slots: &[Option<HwTrap>; 16]) -> Result<()> {
    for (kind, execute) in [(NT_ARM_HW_BREAK, true), (NT_ARM_HW_WATCH, false)] {
        let mut state = HwDebugState { dbg_info: 0, pad: 0, regs: [HwDebugReg::default(); 16] };
        for (i, slot) in slots.iter().enumerate() {
            let Some(trap) = slot else { continue };
            if (trap.kind == HwKind::Execute) != execute {
                continue;
            }
            let el0 = 0b10 << 1;
            let ctrl = if execute {
                (0xf << 5) | el0 | 1
            } else {
                let aligned = trap.addr & !7;
                let bas = ((1u32 << trap.len) - 1) << (trap.addr - aligned);
                let lsc = match trap.kind {
                    HwKind::Write => 0b10,
                    _ => 0b11,
                };
                (bas << 5) | (lsc << 3) | el0 | 1
            };
            state.regs[i] = HwDebugReg { addr: if execute { trap.addr } else { trap.addr & !7 }, ctrl, pad: 0 };
        }
        regset(libc::PTRACE_SETREGSET, tid, kind, &mut state).map_err(|e| Error::os("PTRACE_SETREGSET", e))?;
    }
    Ok(())
}

impl Backend for PtraceBackend {
    fn handle(&self) -> &TraceeHandle {
        &self.handle
    }

    fn read_registers(&mut self, tid: Tid) -> Result<RegisterFile> {
        self.require("read_registers", &[TraceeState::Stopped])?;
        let arch = self.handle.arch;
        let t = self.thread_mut(tid)?;
        if let Some(c) = &t.regs {
            return Ok(c.regs.clone());
        }
        let regs = get_regs(arch, tid)?;
        t.regs = Some(CachedRegs { original_nr: regs.syscall_nr(), regs: regs.clone(), dirty: false });
        Ok(regs)
    }

    fn write_registers(&mut self, tid: Tid, regs: &RegisterFile) -> Result<()> {
        self.require("write_registers", &[TraceeState::Stopped])?;
        if regs.arch() != self.handle.arch {
            return Err(Error::UnsupportedTarget(format!(
                "{} register file for a {} tracee",
                regs.arch(),
                self.handle.arch
            )));
        }
        let arch = self.handle.arch;
        let t = self.thread_mut(tid)?;
        let original_nr = match &t.regs {
            Some(c) => c.original_nr,
            None => get_regs(arch, tid)?.syscall_nr(),
        };
        t.regs = Some(CachedRegs { regs: regs.clone(), dirty: true, original_nr });
        Ok(())
    }

    fn read_memory_into(&mut self, addr: u64, buf: &mut [u8]) -> Result<()> {
        self.require("read_memory", &[TraceeState::Stopped])?;
        if buf.is_empty() {
            return Ok(());
        }
        let tid = self.mem_tid();
        let mut done = 0usize;
        if buf.len() > BULK_THRESHOLD {
            let local = [io::IoSliceMut::new(buf)];
            let remote = [nix::sys::uio::RemoteIoVec { base: addr as usize, len: local[0].len() }];
            let mut local = local;
            if let Ok(n) = nix::sys::uio::process_vm_readv(Pid::from_raw(tid), &mut local, &remote) {
                done = n;
            }
        }
        // Word-granular fallback; also pins down the exact faulting address.
        while done < buf.len() {
            let cur = addr.checked_add(done as u64).ok_or(Error::MemoryAccess { addr })?;
            let word_addr = cur & !(WORD - 1);
            let word = pt::read(Pid::from_raw(tid), word_addr as *mut c_void)
                .map_err(|_| Error::MemoryAccess { addr: cur })?;
            let bytes = word.to_ne_bytes();
            let skip = (cur - word_addr) as usize;
            let n = (bytes.len() - skip).min(buf.len() - done);
            buf[done..done + n].copy_from_slice(&bytes[skip..skip + n]);
            done += n;
        }
        Ok(())
    }

    fn write_memory(&mut self, addr: u64, data: &[u8]) -> Result<()> {
        self.require("write_memory", &[TraceeState::Stopped])?;
        if data.is_empty() {
            return Ok(());
        }
        let tid = self.mem_tid();
        let mut done = 0usize;
        if data.len() > BULK_THRESHOLD {
            let local = [io::IoSlice::new(data)];
            let remote = [nix::sys::uio::RemoteIoVec { base: addr as usize, len: data.len() }];
            // Fails on read-only pages (code); pokes below bypass protections.
            if let Ok(n) = nix::sys::uio::process_vm_writev(Pid::from_raw(tid), &local, &remote) {
                done = n;
            }
        }
        while done < data.len() {
            let cur = addr.checked_add(done as u64).ok_or(Error::MemoryAccess { addr })?;
            let word_addr = cur & !(WORD - 1);
            let skip = (cur - word_addr) as usize;
            let n = (WORD as usize - skip).min(data.len() - done);
            let pid = Pid::from_raw(tid);
            let mut bytes = if skip == 0 && n == WORD as usize {
                [0u8; 8]
            } else {
                pt::read(pid, word_addr as *mut c_void).map_err(|_| Error::MemoryAccess { addr: cur })?.to_ne_bytes()
            };
            bytes[skip..skip + n].copy_from_slice(&data[done..done + n]);
            pt::write(pid, word_addr as *mut c_void, i64::from_ne_bytes(bytes) as libc::c_long)
                .map_err(|_| Error::MemoryAccess { addr: cur })?;
            done += n;
        }
        Ok(())
    }

    fn resume(&mut self, mode: ResumeMode, deliver: &[(Tid, i32)]) -> Result<()> {
        self.require("resume", &[TraceeState::Stopped])?;
        self.flush_registers()?;
        self.run_mode = mode;
        for &(tid, sig) in deliver {
            self.thread_mut(tid)?.deferred_signal = Some(sig);
        }
        self.handle.set_state(TraceeState::Running);
        if !self.queue.is_empty() {
            // Pending stops surface first; nothing actually runs.
            return Ok(());
        }
        let request = request_for(mode);
        let tids: Vec<Tid> = self.threads.keys().copied().collect();
        for tid in tids {
            self.resume_thread(tid, request)?;
        }
        Ok(())
    }

    fn single_step(&mut self, tid: Tid) -> Result<()> {
        self.require("single_step", &[TraceeState::Stopped])?;
        if !self.threads.contains_key(&tid) {
            return Err(Error::NoSuchThread(tid));
        }
        self.flush_registers()?;
        let t = self.thread_mut(tid)?;
        t.regs = None;
        raw_resume(libc::PTRACE_SINGLESTEP as c_int, tid, 0).map_err(|e| Error::os("PTRACE_SINGLESTEP", e))?;
        t.running = true;
        self.stepping = Some(tid);
        self.handle.set_state(TraceeState::Running);
        Ok(())
    }

    fn wait_notice(&mut self) -> Result<RawStopNotice> {
        self.require("wait_notice", &[TraceeState::Running])?;
        if let Some(tid) = self.stepping {
            return self.wait_step(tid);
        }
        if let Some(notice) = self.queue.pop_front() {
            if let StopCause::Exit(st) = notice.cause {
                self.finish(st);
            } else {
                self.handle.set_state(TraceeState::Stopped);
            }
            return Ok(notice);
        }
        let pid = self.handle.pid;
        loop {
            let Some((tid, status)) = waitpid_raw(-1, libc::__WALL | libc::__WNOTHREAD)? else {
                continue;
            };
            let status = decode_status(status);
            if !self.threads.contains_key(&tid) {
                // A new thread can report its first stop before the clone event.
                if !matches!(status, Status::Exited(_)) {
                    self.early_stops.insert(tid);
                }
                continue;
            }
            if let Status::Exited(st) = status {
                if tid == pid {
                    self.finish(st);
                    return Ok(RawStopNotice { tid, cause: StopCause::Exit(st) });
                }
                self.forget_thread(tid);
                continue;
            }
            let t = self.thread_mut(tid)?;
            t.running = false;
            t.regs = None;
            if matches!(status, Status::Signal(libc::SIGSTOP) | Status::EventStop(_)) && t.expect_stop {
                t.expect_stop = false;
                self.resume_thread(tid, request_for(self.run_mode))?;
                continue;
            }
            match self.classify_stop(tid, status)? {
                Some(cause) => {
                    self.stop_others()?;
                    self.handle.set_state(TraceeState::Stopped);
                    return Ok(RawStopNotice { tid, cause });
                }
                None => self.resume_thread(tid, request_for(self.run_mode))?,
            }
        }
    }

    fn signal_info(&mut self, tid: Tid) -> Result<SigInfo> {
        self.require("signal_info", &[TraceeState::Stopped])?;
        let info = pt::getsiginfo(Pid::from_raw(tid)).map_err(|e| match e {
            Errno::ESRCH => Error::NoSuchThread(tid),
            e => Error::os("PTRACE_GETSIGINFO", e),
        })?;
        Ok(SigInfo { signo: info.si_signo, code: info.si_code, addr: unsafe { info.si_addr() } as u64 })
    }

    #[cfg(target_arch = "x86_64")]
    fn set_hw_slot(&mut self, tid: Tid, slot: usize, trap: Option<HwTrap>) -> Result<()> {
        self.require("set_hw_slot", &[TraceeState::Stopped])?;
        if !self.threads.contains_key(&tid) {
            return Err(Error::NoSuchThread(tid));
        }
        let pid = Pid::from_raw(tid);
        let peek = |i| {
            pt::read_user(pid, Self::debug_reg_offset(i) as *mut c_void).map_err(|e| Error::os("PTRACE_PEEKUSER", e))
        };
        let poke = |i, v: u64| {
            pt::write_user(pid, Self::debug_reg_offset(i) as *mut c_void, v as libc::c_long)
                .map_err(|e| Error::os("PTRACE_POKEUSER", e))
        };
        let mut dr7 = peek(7)? as u64;
        dr7 &= !(0b11 << (slot * 2));
        dr7 &= !(0b1111 << (16 + slot * 4));
        poke(7, dr7)?;
        if let Some(trap) = trap {
            let rw: u64 = match trap.kind {
                HwKind::Execute => 0b00,
                HwKind::Write => 0b01,
                HwKind::ReadWrite => 0b11,
            };
            let len: u64 = match (trap.kind, trap.len) {
                (HwKind::Execute, _) | (_, 1) => 0b00,
                (_, 2) => 0b01,
                (_, 8) => 0b10,
                (_, 4) => 0b11,
                (_, other) => return Err(Error::Alignment { addr: trap.addr, len: other }),
            };
            poke(slot, trap.addr)?;
            dr7 |= 1 << (slot * 2);
            dr7 |= (rw | (len << 2)) << (16 + slot * 4);
            poke(7, dr7)?;
        }
        Ok(())
    }

    #[cfg(target_arch = "x86_64")]
    fn take_hw_hit(&mut self, tid: Tid) -> Result<Option<usize>> {
        self.require("take_hw_hit", &[TraceeState::Stopped])?;
        let pid = Pid::from_raw(tid);
        let dr6 = pt::read_user(pid, Self::debug_reg_offset(6) as *mut c_void)
            .map_err(|e| Error::os("PTRACE_PEEKUSER", e))? as u64;
        pt::write_user(pid, Self::debug_reg_offset(6) as *mut c_void, 0)
            .map_err(|e| Error::os("PTRACE_POKEUSER", e))?;
        Ok((0..4).find(|i| dr6 & (1 << i) != 0))
    }

    #[cfg(target_arch = "aarch64")]
    fn set_hw_slot(&mut self, tid: Tid, slot: usize, trap: Option<HwTrap>) -> Result<()> {
        self.require("set_hw_slot", &[TraceeState::Stopped])?;
        let t = self.thread_mut(tid)?;
        t.hw[slot] = trap;
        let slots = t.hw;
        write_hw_state(tid, &slots)
    }

    #[cfg(target_arch = "aarch64")]
    fn take_hw_hit(&mut self, tid: Tid) -> Result<Option<usize>> {
        let info = self.signal_info(tid)?;
        let t = self.thread_mut(tid)?;
        Ok(t.hw.iter().position(|s| {
            s.is_some_and(|trap| match trap.kind {
                HwKind::Execute => trap.addr == info.addr,
                _ => (trap.addr & !7) <= info.addr && info.addr < trap.addr + trap.len as u64,
            })
        }))
    }

    fn detach(&mut self, deliver: &[(Tid, i32)]) -> Result<()> {
        self.require("detach", &[TraceeState::Stopped])?;
        self.flush_registers()?;
        // Consume SIGSTOPs still in flight so no thread stays frozen after release.
        let pending: Vec<Tid> = self.threads.iter().filter(|(_, t)| t.expect_stop).map(|(tid, _)| *tid).collect();
        for tid in pending {
            if raw_resume(libc::PTRACE_CONT as c_int, tid, 0).is_ok() {
                self.thread_mut(tid)?.running = true;
                self.await_expected_stop(tid)?;
            }
        }
        let mut signals: BTreeMap<Tid, i32> = deliver.iter().copied().collect();
        for (tid, t) in self.threads.iter_mut() {
            if let Some(sig) = t.deferred_signal.take() {
                signals.entry(*tid).or_insert(sig);
            }
        }
        for n in self.queue.drain(..) {
            if let StopCause::Signal(sig) = n.cause {
                if sig != libc::SIGSTOP && sig != libc::SIGTRAP {
                    signals.entry(n.tid).or_insert(sig);
                }
            }
        }
        for &tid in self.threads.keys() {
            let sig = signals.get(&tid).copied().unwrap_or(0);
            let r = unsafe {
                libc::ptrace(libc::PTRACE_DETACH, tid, std::ptr::null_mut::<c_void>(), sig as usize as *mut c_void)
            };
            if r == -1 && Errno::last() != Errno::ESRCH {
                return Err(Error::os("PTRACE_DETACH", Errno::last()));
            }
        }
        self.threads.clear();
        self.handle.set_state(TraceeState::Detached);
        Ok(())
    }

    fn kill(&mut self) -> Result<()> {
        self.require("kill", &[TraceeState::Created, TraceeState::Stopped, TraceeState::Running])?;
        let _ = nix::sys::signal::kill(Pid::from_raw(self.handle.pid), Signal::SIGKILL);
        self.reap_all();
        self.threads.clear();
        self.queue.clear();
        self.handle.tids.clear();
        self.handle.set_state(TraceeState::Killed);
        Ok(())
    }

    fn take_stdio(&mut self) -> Option<StdioPipes> {
        self.stdio.take()
    }
}

impl Drop for PtraceBackend {
    fn drop(&mut self) {
        match self.handle.state {
            TraceeState::Stopped if !self.spawned => {
                let _ = self.detach(&[]);
            }
            TraceeState::Created | TraceeState::Stopped | TraceeState::Running => {
                let _ = self.kill();
            }
            _ => {}
        }
    }
}
