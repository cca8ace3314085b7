//! Code and data traps: software breakpoints by instruction patching,
//! hardware breakpoints and watchpoints through the debug-register slot pool.
//!
//! [`TrapTable`] owns the bookkeeping and talks to the backend for patching
//! and slot programming. Stop decoding and the step-over protocol live in the
//! event loop, which consults this table.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::arch::Arch;
use crate::backend::{Backend, HwKind, HwTrap, Tid};
use crate::error::{Error, Result};

/// Identifier shared by breakpoints and watchpoints.
pub type TrapId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BreakpointKind {
    Software,
    Hardware,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Breakpoint {
    pub id: TrapId,
    pub address: u64,
    pub kind: BreakpointKind,
    pub enabled: bool,
    pub one_shot: bool,
    pub hit_count: u64,
    /// Original instruction bytes under the patch; empty while disabled.
    pub saved_bytes: Vec<u8>,
    /// Hardware slot, for hardware breakpoints.
    pub slot: Option<usize>,
    pub has_callback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WatchTrigger {
    Write,
    ReadWrite,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Watchpoint {
    pub id: TrapId,
    pub address: u64,
    pub length: usize,
    pub trigger: WatchTrigger,
    pub slot: usize,
    pub enabled: bool,
    pub hit_count: u64,
    pub has_callback: bool,
}

/// Where to place a breakpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Address(u64),
    Symbol {
        name: String,
        /// Restricts the lookup to one loaded object (path or file name).
        object: Option<String>,
        offset: u64,
    },
}

impl Location {
    pub fn symbol(name: impl Into<String>) -> Self {
        Location::Symbol { name: name.into(), object: None, offset: 0 }
    }

    pub fn symbol_in(object: impl Into<String>, name: impl Into<String>) -> Self {
        Location::Symbol { name: name.into(), object: Some(object.into()), offset: 0 }
    }
}

impl From<u64> for Location {
    fn from(addr: u64) -> Self {
        Location::Address(addr)
    }
}

impl From<&str> for Location {
    fn from(s: &str) -> Self {
        s.parse().unwrap_or_else(|_| Location::symbol(s))
    }
}

impl FromStr for Location {
    type Err = Error;

    /// `0x401000`, `name`, `name+0x10` or `object:name+0x10`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::SymbolNotFound(s.to_string());
        if let Some(hex) = s.strip_prefix("0x") {
            return u64::from_str_radix(hex, 16).map(Location::Address).map_err(|_| bad());
        }
        let (object, rest) = match s.rsplit_once(':') {
            Some((o, r)) => (Some(o.to_string()), r),
            None => (None, s),
        };
        let (name, offset) = match rest.split_once('+') {
            Some((n, off)) => {
                let off = match off.strip_prefix("0x") {
                    Some(h) => u64::from_str_radix(h, 16),
                    None => off.parse(),
                };
                (n, off.map_err(|_| bad())?)
            }
            None => (rest, 0),
        };
        if name.is_empty() {
            return Err(bad());
        }
        Ok(Location::Symbol { name: name.to_string(), object, offset })
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Address(a) => write!(f, "{a:#x}"),
            Location::Symbol { name, object, offset } => {
                if let Some(o) = object {
                    write!(f, "{o}:")?;
                }
                f.write_str(name)?;
                if *offset != 0 {
                    write!(f, "+{offset:#x}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrapRef {
    Breakpoint(TrapId),
    Watchpoint(TrapId),
}

/// All traps of one debuggee.
#[derive(Debug)]
pub struct TrapTable {
    arch: Arch,
    next_id: TrapId,
    breakpoints: BTreeMap<TrapId, Breakpoint>,
    watchpoints: BTreeMap<TrapId, Watchpoint>,
    /// Enabled software breakpoints by address.
    patched: HashMap<u64, TrapId>,
    slots: Vec<Option<TrapRef>>,
}

impl TrapTable {
    pub fn new(arch: Arch) -> Self {
        TrapTable {
            arch,
            next_id: 1,
            breakpoints: BTreeMap::new(),
            watchpoints: BTreeMap::new(),
            patched: HashMap::new(),
            slots: vec![None; arch.hw_slots()],
        }
    }

    fn fresh_id(&mut self) -> TrapId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn breakpoint(&self, id: TrapId) -> Option<&Breakpoint> {
        self.breakpoints.get(&id)
    }

    pub fn watchpoint(&self, id: TrapId) -> Option<&Watchpoint> {
        self.watchpoints.get(&id)
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = &Breakpoint> {
        self.breakpoints.values()
    }

    pub fn watchpoints(&self) -> impl Iterator<Item = &Watchpoint> {
        self.watchpoints.values()
    }

    pub fn is_empty(&self) -> bool {
        self.breakpoints.is_empty() && self.watchpoints.is_empty()
    }

    /// Enabled software breakpoint patched at `addr`.
    pub fn software_at(&self, addr: u64) -> Option<TrapId> {
        self.patched.get(&addr).copied()
    }

    pub fn slot_owner(&self, slot: usize) -> Option<TrapRef> {
        self.slots.get(slot).copied().flatten()
    }

    pub fn slots_in_use(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    fn free_slot(&self) -> Result<usize> {
        self.slots.iter().position(|s| s.is_none()).ok_or(Error::NoFreeSlot)
    }

    fn enabled_at(&self, addr: u64) -> bool {
        self.breakpoints.values().any(|b| b.enabled && b.address == addr)
    }

    pub(crate) fn record_hit(&mut self, trap: TrapRef) {
        match trap {
            TrapRef::Breakpoint(id) => {
                if let Some(b) = self.breakpoints.get_mut(&id) {
                    b.hit_count += 1;
                }
            }
            TrapRef::Watchpoint(id) => {
                if let Some(w) = self.watchpoints.get_mut(&id) {
                    w.hit_count += 1;
                }
            }
        }
    }

    /// Active hardware configuration of every slot, for programming new threads.
    pub(crate) fn hw_config(&self) -> Vec<(usize, HwTrap)> {
        (0..self.slots.len()).filter_map(|slot| self.slot_config(slot).map(|t| (slot, t))).collect()
    }

    fn slot_config(&self, slot: usize) -> Option<HwTrap> {
        match self.slot_owner(slot)? {
            TrapRef::Breakpoint(id) => {
                let b = &self.breakpoints[&id];
                b.enabled.then_some(HwTrap { addr: b.address, len: 1, kind: HwKind::Execute })
            }
            TrapRef::Watchpoint(id) => {
                let w = &self.watchpoints[&id];
                w.enabled.then_some(HwTrap {
                    addr: w.address,
                    len: w.length,
                    kind: match w.trigger {
                        WatchTrigger::Write => HwKind::Write,
                        WatchTrigger::ReadWrite => HwKind::ReadWrite,
                    },
                })
            }
        }
    }

    fn program_slot(&self, backend: &mut dyn Backend, slot: usize) -> Result<()> {
        let config = self.slot_config(slot);
        let tids = backend.handle().tids.clone();
        for tid in tids {
            backend.set_hw_slot(tid, slot, config)?;
        }
        Ok(())
    }

    /// Programs every active slot on a freshly created thread.
    pub(crate) fn program_thread(&self, backend: &mut dyn Backend, tid: Tid) -> Result<()> {
        for (slot, trap) in self.hw_config() {
            backend.set_hw_slot(tid, slot, Some(trap))?;
        }
        Ok(())
    }

    fn patch(&mut self, backend: &mut dyn Backend, id: TrapId) -> Result<()> {
        let trap = self.arch.trap_instruction();
        let b = self.breakpoints.get_mut(&id).expect("known breakpoint");
        let mut saved = vec![0; trap.len()];
        backend.read_memory_into(b.address, &mut saved)?;
        backend.write_memory(b.address, trap)?;
        b.saved_bytes = saved;
        self.patched.insert(b.address, id);
        Ok(())
    }

    fn unpatch(&mut self, backend: &mut dyn Backend, id: TrapId) -> Result<()> {
        let b = self.breakpoints.get_mut(&id).expect("known breakpoint");
        if !b.saved_bytes.is_empty() {
            backend.write_memory(b.address, &b.saved_bytes)?;
            b.saved_bytes.clear();
        }
        self.patched.remove(&b.address);
        Ok(())
    }

    /// Installs an enabled breakpoint at a validated address.
    pub(crate) fn add_breakpoint(
        &mut self,
        backend: &mut dyn Backend,
        address: u64,
        kind: BreakpointKind,
        one_shot: bool,
        has_callback: bool,
    ) -> Result<TrapId> {
        if self.enabled_at(address) {
            return Err(Error::DuplicateTrap { addr: address });
        }
        let slot = match kind {
            BreakpointKind::Hardware => Some(self.free_slot()?),
            BreakpointKind::Software => None,
        };
        let id = self.fresh_id();
        self.breakpoints.insert(
            id,
            Breakpoint {
                id,
                address,
                kind,
                enabled: true,
                one_shot,
                hit_count: 0,
                saved_bytes: Vec::new(),
                slot,
                has_callback,
            },
        );
        let installed = match slot {
            Some(slot) => {
                self.slots[slot] = Some(TrapRef::Breakpoint(id));
                self.program_slot(backend, slot)
            }
            None => self.patch(backend, id),
        };
        if let Err(e) = installed {
            if let Some(slot) = slot {
                self.slots[slot] = None;
                let _ = self.program_slot(backend, slot);
            }
            self.breakpoints.remove(&id);
            return Err(e);
        }
        Ok(id)
    }

    pub(crate) fn add_watchpoint(
        &mut self,
        backend: &mut dyn Backend,
        address: u64,
        length: usize,
        trigger: WatchTrigger,
        has_callback: bool,
    ) -> Result<TrapId> {
        if !matches!(length, 1 | 2 | 4 | 8) || !address.is_multiple_of(length as u64) {
            return Err(Error::Alignment { addr: address, len: length });
        }
        let slot = self.free_slot()?;
        let id = self.fresh_id();
        self.watchpoints
            .insert(id, Watchpoint { id, address, length, trigger, slot, enabled: true, hit_count: 0, has_callback });
        self.slots[slot] = Some(TrapRef::Watchpoint(id));
        if let Err(e) = self.program_slot(backend, slot) {
            self.slots[slot] = None;
            self.watchpoints.remove(&id);
            let _ = self.program_slot(backend, slot);
            return Err(e);
        }
        Ok(id)
    }

    pub(crate) fn set_enabled(&mut self, backend: &mut dyn Backend, id: TrapId, enabled: bool) -> Result<()> {
        if let Some(b) = self.breakpoints.get(&id) {
            if b.enabled == enabled {
                return Ok(());
            }
            if enabled && self.enabled_at(b.address) {
                return Err(Error::DuplicateTrap { addr: b.address });
            }
            let (kind, slot) = (b.kind, b.slot);
            self.breakpoints.get_mut(&id).unwrap().enabled = enabled;
            return match (kind, slot) {
                (BreakpointKind::Hardware, Some(slot)) => self.program_slot(backend, slot),
                _ if enabled => self.patch(backend, id),
                _ => self.unpatch(backend, id),
            };
        }
        if let Some(w) = self.watchpoints.get_mut(&id) {
            if w.enabled != enabled {
                w.enabled = enabled;
                let slot = w.slot;
                return self.program_slot(backend, slot);
            }
            return Ok(());
        }
        Err(Error::NoSuchTrap(id))
    }

    pub(crate) fn remove(&mut self, backend: &mut dyn Backend, id: TrapId) -> Result<()> {
        let slot = if let Some(b) = self.breakpoints.get(&id) {
            match b.slot {
                Some(slot) => Some(slot),
                None => {
                    if b.enabled {
                        self.unpatch(backend, id)?;
                    }
                    None
                }
            }
        } else if let Some(w) = self.watchpoints.get(&id) {
            Some(w.slot)
        } else {
            return Err(Error::NoSuchTrap(id));
        };
        self.breakpoints.remove(&id);
        self.watchpoints.remove(&id);
        if let Some(slot) = slot {
            self.slots[slot] = None;
            self.program_slot(backend, slot)?;
        }
        Ok(())
    }

    /// Removes every trap, restoring patched code and clearing all slots.
    pub(crate) fn remove_all(&mut self, backend: &mut dyn Backend) -> Result<()> {
        let ids: Vec<TrapId> = self.breakpoints.keys().chain(self.watchpoints.keys()).copied().collect();
        for id in ids {
            self.remove(backend, id)?;
        }
        Ok(())
    }

    /// Forgets every trap without touching the tracee (its image was replaced).
    pub(crate) fn forget_all(&mut self) {
        self.breakpoints.clear();
        self.watchpoints.clear();
        self.patched.clear();
        self.slots.iter_mut().for_each(|s| *s = None);
    }

    /// Temporarily restores the original bytes of a software breakpoint.
    pub(crate) fn lift(&self, backend: &mut dyn Backend, id: TrapId) -> Result<()> {
        let b = &self.breakpoints[&id];
        backend.write_memory(b.address, &b.saved_bytes)
    }

    /// Re-applies the patch removed by [`TrapTable::lift`].
    pub(crate) fn relay(&self, backend: &mut dyn Backend, id: TrapId) -> Result<()> {
        let b = &self.breakpoints[&id];
        backend.write_memory(b.address, self.arch.trap_instruction())
    }

    /// Replaces patched bytes inside `[addr, addr + buf.len())` with the originals.
    pub fn mask(&self, addr: u64, buf: &mut [u8]) {
        self.overlaps(addr, buf.len(), |b, at, from| {
            let n = (b.saved_bytes.len() - from).min(buf.len() - at);
            buf[at..at + n].copy_from_slice(&b.saved_bytes[from..from + n]);
        });
    }

    /// Prepares a write over patched code: the new bytes become the saved
    /// originals and the patch is kept in the outgoing data.
    pub(crate) fn absorb_write(&mut self, addr: u64, data: &mut [u8]) {
        let trap = self.arch.trap_instruction();
        let mut updates: Vec<(TrapId, usize, usize, usize)> = Vec::new();
        self.overlaps(addr, data.len(), |b, at, from| {
            let n = (b.saved_bytes.len() - from).min(data.len() - at);
            updates.push((b.id, at, from, n));
        });
        for (id, at, from, n) in updates {
            let b = self.breakpoints.get_mut(&id).unwrap();
            b.saved_bytes[from..from + n].copy_from_slice(&data[at..at + n]);
            data[at..at + n].copy_from_slice(&trap[from..from + n]);
        }
    }

    /// Calls `f(bp, index into range, index into patch)` for each enabled
    /// software breakpoint overlapping the range.
    fn overlaps(&self, addr: u64, len: usize, mut f: impl FnMut(&Breakpoint, usize, usize)) {
        if len == 0 || self.patched.is_empty() {
            return;
        }
        let width = self.arch.trap_instruction().len() as u64;
        let end = addr.saturating_add(len as u64);
        for &id in self.patched.values() {
            let b = &self.breakpoints[&id];
            let (bs, be) = (b.address, b.address.saturating_add(width));
            if bs >= end || be <= addr {
                continue;
            }
            let at = bs.saturating_sub(addr) as usize;
            let from = addr.saturating_sub(bs) as usize;
            f(b, at, from);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{RawStopNotice, ResumeMode, SigInfo, TraceeHandle, TraceeState};
    use crate::process::RegisterFile;
    use proptest::prelude::*;

    /// Backend double with a flat memory image and recorded slot programming.
    struct FakeBackend {
        handle: TraceeHandle,
        mem: Vec<u8>,
        slots: HashMap<(Tid, usize), HwTrap>,
    }

    impl FakeBackend {
        fn new(arch: Arch) -> Self {
            let mut handle = TraceeHandle::new(100, arch, true);
            handle.tids = vec![100, 101];
            handle.set_state(TraceeState::Stopped);
            FakeBackend { handle, mem: (0..4096u32).map(|i| (i * 7 + 3) as u8).collect(), slots: HashMap::new() }
        }
    }

    impl Backend for FakeBackend {
        fn handle(&self) -> &TraceeHandle {
            &self.handle
        }
        fn read_registers(&mut self, _: Tid) -> Result<RegisterFile> {
            Ok(RegisterFile::zeroed(self.handle.arch))
        }
        fn write_registers(&mut self, _: Tid, _: &RegisterFile) -> Result<()> {
            Ok(())
        }
        fn read_memory_into(&mut self, addr: u64, buf: &mut [u8]) -> Result<()> {
            let a = addr as usize;
            buf.copy_from_slice(self.mem.get(a..a + buf.len()).ok_or(Error::MemoryAccess { addr })?);
            Ok(())
        }
        fn write_memory(&mut self, addr: u64, data: &[u8]) -> Result<()> {
            let a = addr as usize;
            self.mem.get_mut(a..a + data.len()).ok_or(Error::MemoryAccess { addr })?.copy_from_slice(data);
            Ok(())
        }
        fn resume(&mut self, _: ResumeMode, _: &[(Tid, i32)]) -> Result<()> {
            unimplemented!()
        }
        fn single_step(&mut self, _: Tid) -> Result<()> {
            unimplemented!()
        }
        fn wait_notice(&mut self) -> Result<RawStopNotice> {
            unimplemented!()
        }
        fn signal_info(&mut self, _: Tid) -> Result<SigInfo> {
            unimplemented!()
        }
        fn set_hw_slot(&mut self, tid: Tid, slot: usize, trap: Option<HwTrap>) -> Result<()> {
            match trap {
                Some(t) => self.slots.insert((tid, slot), t),
                None => self.slots.remove(&(tid, slot)),
            };
            Ok(())
        }
        fn take_hw_hit(&mut self, _: Tid) -> Result<Option<usize>> {
            Ok(None)
        }
        fn detach(&mut self, _: &[(Tid, i32)]) -> Result<()> {
            Ok(())
        }
        fn kill(&mut self) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn location_parsing() {
        assert_eq!("0x401000".parse::<Location>().unwrap(), Location::Address(0x401000));
        assert_eq!("f".parse::<Location>().unwrap(), Location::symbol("f"));
        assert_eq!(
            "libc.so.6:puts+0x10".parse::<Location>().unwrap(),
            Location::Symbol { name: "puts".into(), object: Some("libc.so.6".into()), offset: 16 }
        );
        assert!("0xzz".parse::<Location>().is_err());
        assert_eq!(Location::from("main+4").to_string(), "main+0x4");
    }

    #[test]
    fn patch_mask_and_restore() {
        for arch in [Arch::Amd64, Arch::Aarch64] {
            let mut be = FakeBackend::new(arch);
            let before = be.mem.clone();
            let mut t = TrapTable::new(arch);
            let a = t.add_breakpoint(&mut be, 0x100, BreakpointKind::Software, false, false).unwrap();
            let b = t.add_breakpoint(&mut be, 0x108, BreakpointKind::Software, false, false).unwrap();
            assert_eq!(&be.mem[0x100..0x100 + arch.trap_instruction().len()], arch.trap_instruction());
            assert!(matches!(
                t.add_breakpoint(&mut be, 0x100, BreakpointKind::Software, false, false),
                Err(Error::DuplicateTrap { addr: 0x100 })
            ));

            let mut buf = be.mem[0xf0..0x120].to_vec();
            t.mask(0xf0, &mut buf);
            assert_eq!(buf, before[0xf0..0x120]);
            // Range starting inside a patch.
            let mut buf = be.mem[0x101..0x103].to_vec();
            t.mask(0x101, &mut buf);
            assert_eq!(buf, before[0x101..0x103]);

            t.set_enabled(&mut be, a, false).unwrap();
            assert!(t.breakpoint(a).unwrap().saved_bytes.is_empty());
            t.remove(&mut be, b).unwrap();
            t.remove(&mut be, a).unwrap();
            assert_eq!(be.mem, before);
            assert!(matches!(t.remove(&mut be, a), Err(Error::NoSuchTrap(_))));
        }
    }

    #[test]
    fn writes_over_patches_update_saved_bytes() {
        let mut be = FakeBackend::new(Arch::Amd64);
        let mut t = TrapTable::new(Arch::Amd64);
        let id = t.add_breakpoint(&mut be, 0x200, BreakpointKind::Software, false, false).unwrap();
        let mut data = vec![0x90; 4];
        t.absorb_write(0x1fe, &mut data);
        assert_eq!(data, [0x90, 0x90, 0xCC, 0x90]);
        assert_eq!(t.breakpoint(id).unwrap().saved_bytes, [0x90]);
    }

    #[test]
    fn slot_pool_is_shared_and_reusable() {
        let mut be = FakeBackend::new(Arch::Amd64);
        let mut t = TrapTable::new(Arch::Amd64);
        let hw = t.add_breakpoint(&mut be, 0x300, BreakpointKind::Hardware, false, false).unwrap();
        let ws: Vec<_> =
            (0..3).map(|i| t.add_watchpoint(&mut be, 0x800 + 8 * i, 8, WatchTrigger::Write, false).unwrap()).collect();
        assert!(matches!(t.add_watchpoint(&mut be, 0x900, 4, WatchTrigger::Write, false), Err(Error::NoFreeSlot)));
        // Every thread carries the same configuration.
        assert_eq!(be.slots.len(), 8);
        t.remove(&mut be, ws[1]).unwrap();
        assert_eq!(be.slots.len(), 6);
        t.add_watchpoint(&mut be, 0x900, 4, WatchTrigger::ReadWrite, false).unwrap();
        assert_eq!(t.slots_in_use(), 4);
        t.set_enabled(&mut be, hw, false).unwrap();
        assert_eq!(be.slots.len(), 6);
        assert!(matches!(
            t.add_watchpoint(&mut be, 0x901, 2, WatchTrigger::Write, false),
            Err(Error::Alignment { .. })
        ));
        assert!(matches!(
            t.add_watchpoint(&mut be, 0x900, 3, WatchTrigger::Write, false),
            Err(Error::Alignment { .. })
        ));
    }

    proptest! {
        #[test]
        fn random_toggles_then_clear_restore_code(
            addrs in proptest::collection::btree_set(0u64..4000, 1..8),
            toggles in proptest::collection::vec((0usize..8, any::<bool>()), 0..100),
        ) {
            let mut be = FakeBackend::new(Arch::Amd64);
            let before = be.mem.clone();
            let mut t = TrapTable::new(Arch::Amd64);
            let ids: Vec<_> = addrs
                .iter()
                .map(|a| t.add_breakpoint(&mut be, *a, BreakpointKind::Software, false, false).unwrap())
                .collect();
            for (i, on) in toggles {
                t.set_enabled(&mut be, ids[i % ids.len()], on).unwrap();
                let mut view = be.mem.clone();
                t.mask(0, &mut view);
                prop_assert_eq!(&view, &before);
            }
            t.remove_all(&mut be).unwrap();
            prop_assert_eq!(be.mem, before);
        }
    }
}
