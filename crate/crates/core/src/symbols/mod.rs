//! Runtime symbolization: loaded-object discovery from the memory map,
//! name/address resolution and frame-pointer stack walks.

pub mod elf;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

pub use elf::{parse_symbols, ElfFile, SymbolEntry, SymbolKind, SymbolTable};

use crate::arch::Arch;
use crate::error::{Error, Result};
use crate::process::{find_map, MemoryMap, RegisterFile};

/// An object file mapped into the tracee.
#[derive(Debug, Clone)]
pub struct LoadedObject {
    pub path: String,
    /// Lowest start address among the object's mappings.
    pub base: u64,
    pub is_pie: bool,
    /// Added to a symbol value to obtain its runtime address.
    pub load_bias: u64,
    pub symbols: Arc<Vec<SymbolEntry>>,
    /// Address ranges of the mappings backed by this object.
    pub ranges: Vec<(u64, u64)>,
}

impl LoadedObject {
    pub fn contains(&self, addr: u64) -> bool {
        self.ranges.iter().any(|(s, e)| *s <= addr && addr < *e)
    }

    pub fn file_name(&self) -> &str {
        Path::new(&self.path).file_name().and_then(|n| n.to_str()).unwrap_or(&self.path)
    }

    /// Filter used by [`resolve_symbol`]: full path, file name, or file name
    /// up to its first version suffix (`libc` matches `libc.so.6`).
    pub fn matches(&self, filter: &str) -> bool {
        let name = self.file_name();
        self.path == filter
            || name == filter
            || name.strip_prefix(filter).is_some_and(|rest| rest.starts_with('.') || rest.starts_with('-'))
    }

    pub fn runtime_address(&self, sym: &SymbolEntry) -> u64 {
        sym.value.wrapping_add(self.load_bias)
    }

    pub fn symbol(&self, name: &str) -> Option<&SymbolEntry> {
        self.symbols.iter().find(|s| s.name == name)
    }
}

/// Parsed ELF files keyed by path, so repeated enumeration stays cheap.
#[derive(Debug, Default)]
pub struct ElfCache {
    files: HashMap<String, Option<Arc<ElfFile>>>,
}

impl ElfCache {
    pub fn get(&mut self, path: &str) -> Option<Arc<ElfFile>> {
        self.files
            .entry(path.to_string())
            .or_insert_with(|| match ElfFile::open(path) {
                Ok(elf) => Some(Arc::new(elf)),
                Err(e) => {
                    log::debug!("no symbols for {path}: {e}");
                    None
                }
            })
            .clone()
    }

    pub fn clear(&mut self) {
        self.files.clear();
    }
}

/// Groups file-backed maps by path, in address order of first appearance.
pub fn enumerate_objects(maps: &[MemoryMap], cache: &mut ElfCache) -> Vec<LoadedObject> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(u64, u64)>> = HashMap::new();
    for m in maps.iter().filter(|m| m.is_file_backed()) {
        let path = m.path.clone().unwrap_or_default();
        groups
            .entry(path.clone())
            .or_insert_with(|| {
                order.push(path);
                Vec::new()
            })
            .push((m.start, m.end));
    }
    order
        .into_iter()
        .map(|path| {
            let ranges = groups.remove(&path).unwrap_or_default();
            let base = ranges.iter().map(|r| r.0).min().unwrap_or(0);
            let elf = if path.ends_with(" (deleted)") { None } else { cache.get(&path) };
            let (is_pie, load_bias, symbols) = match elf {
                Some(elf) if elf.is_pie() => (true, base.wrapping_sub(elf.link_base()), Arc::new(elf.symbols.clone())),
                Some(elf) => (false, 0, Arc::new(elf.symbols.clone())),
                None => (false, 0, Arc::new(Vec::new())),
            };
            LoadedObject { path, base, is_pie, load_bias, symbols, ranges }
        })
        .collect()
}

/// Runtime address of `name`, optionally restricted to objects matching `object`.
pub fn resolve_symbol(objects: &[LoadedObject], name: &str, object: Option<&str>) -> Result<u64> {
    let mut hits: Vec<(&LoadedObject, u64)> = Vec::new();
    for obj in objects {
        if object.is_some_and(|f| !obj.matches(f)) {
            continue;
        }
        if let Some(sym) = obj.symbol(name) {
            hits.push((obj, obj.runtime_address(sym)));
        }
    }
    match hits.as_slice() {
        [] => Err(Error::SymbolNotFound(match object {
            Some(f) => format!("{f}:{name}"),
            None => name.to_string(),
        })),
        [(_, addr)] => Ok(*addr),
        many => Err(Error::AmbiguousSymbol {
            name: name.to_string(),
            candidates: many.iter().map(|(o, _)| o.path.clone()).collect(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressInfo {
    pub object: String,
    /// Containing function, or `None` when only the object is known.
    pub symbol: Option<String>,
    /// Offset from the symbol, or from the object base without one.
    pub offset: u64,
}

/// Symbolizes `addr` against the loaded objects.
pub fn resolve_address(objects: &[LoadedObject], addr: u64) -> Option<AddressInfo> {
    let obj = objects.iter().find(|o| o.contains(addr))?;
    let mut best: Option<(&SymbolEntry, u64)> = None;
    let mut nearest_unsized: Option<(&SymbolEntry, u64)> = None;
    for sym in obj.symbols.iter().filter(|s| s.kind == SymbolKind::Func) {
        let start = obj.runtime_address(sym);
        if start > addr {
            continue;
        }
        if sym.size > 0 {
            if addr - start < sym.size && best.is_none_or(|(b, _)| sym.size < b.size) {
                best = Some((sym, start));
            }
        } else if nearest_unsized.is_none_or(|(_, s)| start > s) {
            nearest_unsized = Some((sym, start));
        }
    }
    // An unsized label only counts when no sized function claims the address.
    let chosen = best.or(nearest_unsized);
    Some(match chosen {
        Some((sym, start)) => {
            AddressInfo { object: obj.path.clone(), symbol: Some(sym.name.clone()), offset: addr - start }
        }
        None => AddressInfo { object: obj.path.clone(), symbol: None, offset: addr - obj.base },
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackFrame {
    /// Current pc for frame 0, the saved return address for outer frames.
    pub return_address: u64,
    pub frame_base: u64,
    /// Function name and offset, when resolvable.
    pub symbol: Option<(String, u64)>,
}

impl StackFrame {
    pub fn function(&self) -> Option<&str> {
        self.symbol.as_ref().map(|(n, _)| n.as_str())
    }
}

/// Where the caller's return address lives when stopped in a prologue.
enum Prologue {
    /// Frame not set up: return address at `[sp]` (AMD64) or in the link register.
    Entry,
    /// Frame pointer pushed but not yet moved: return address at `[sp + 8]`.
    Pushed,
    Body,
}

fn prologue_state(arch: Arch, code: &[u8]) -> Prologue {
    match arch {
        Arch::Amd64 => match code {
            [0xf3, 0x0f, 0x1e, 0xfa, ..] | [0x55, ..] | [0xc3, ..] => Prologue::Entry,
            [0x48, 0x89, 0xe5, ..] => Prologue::Pushed,
            _ => Prologue::Body,
        },
        Arch::Aarch64 => {
            let Some(word) = code.get(..4) else {
                return Prologue::Body;
            };
            let insn = u32::from_le_bytes(word.try_into().unwrap());
            // stp x29, x30, [sp, #imm]!  /  mov x29, sp  /  ret
            if insn & 0xffc0_7fff == 0xa980_7bfd || insn == 0x9100_03fd || insn == 0xd65f_03c0 {
                Prologue::Entry
            } else {
                Prologue::Body
            }
        }
    }
}

/// Frame-pointer walk. `code` holds the (unpatched) bytes at pc, `read_word`
/// reads one stack word and returns `None` when unreadable.
pub fn walk_frames(
    regs: &RegisterFile,
    code: &[u8],
    maps: &[MemoryMap],
    max_depth: usize,
    mut read_word: impl FnMut(u64) -> Option<u64>,
) -> Vec<StackFrame> {
    let arch = regs.arch();
    let mut frames = Vec::new();
    if max_depth == 0 {
        return frames;
    }
    let (pc, sp, fp) = (regs.pc(), regs.sp(), regs.fp());
    let on_stack = |addr: u64| find_map(maps, addr).is_some_and(|m| m.is_stack_like());
    let is_code = |addr: u64| find_map(maps, addr).is_some_and(|m| m.perms.exec);

    let state = prologue_state(arch, code);
    let frame0_base = match (arch, &state) {
        (Arch::Amd64, Prologue::Entry) => sp.wrapping_sub(8),
        (Arch::Amd64, Prologue::Pushed) => sp,
        (Arch::Aarch64, Prologue::Entry) => sp.wrapping_sub(16),
        _ => fp,
    };
    frames.push(StackFrame { return_address: pc, frame_base: frame0_base, symbol: None });

    // The caller frame whose return address is not on the fp chain yet.
    let leaf_return = match (arch, state) {
        (Arch::Amd64, Prologue::Entry) => read_word(sp),
        (Arch::Amd64, Prologue::Pushed) => read_word(sp.wrapping_add(8)),
        (Arch::Aarch64, Prologue::Entry) => regs.by_name("x30"),
        _ => None,
    };
    if let Some(ret) = leaf_return {
        if frames.len() >= max_depth || !is_code(ret) || !on_stack(fp) || fp <= frame0_base {
            return frames;
        }
        frames.push(StackFrame { return_address: ret, frame_base: fp, symbol: None });
    }

    let mut cur = fp;
    if frames.len() == 1 && !on_stack(cur) {
        return frames;
    }
    while frames.len() < max_depth {
        let (Some(saved_fp), Some(ret)) = (read_word(cur), read_word(cur.wrapping_add(8))) else {
            break;
        };
        if ret == 0 || !is_code(ret) {
            break;
        }
        let last_base = frames.last().map(|f| f.frame_base).unwrap_or(0);
        // Outermost frames keep a null saved fp; they are still reported.
        if saved_fp != 0 && (saved_fp <= cur || saved_fp <= last_base || !on_stack(saved_fp)) {
            break;
        }
        let base = if saved_fp == 0 { cur.wrapping_add(16) } else { saved_fp };
        if base <= last_base {
            break;
        }
        frames.push(StackFrame { return_address: ret, frame_base: base, symbol: None });
        if saved_fp == 0 {
            break;
        }
        cur = saved_fp;
    }
    frames
}

/// Fills in `symbol` for each frame. Outer frames are looked up at
/// `return_address - 1` so calls at the very end of a function resolve to it.
pub fn symbolize(frames: &mut [StackFrame], objects: &[LoadedObject]) {
    for (i, frame) in frames.iter_mut().enumerate() {
        let probe = if i == 0 { frame.return_address } else { frame.return_address.wrapping_sub(1) };
        frame.symbol = resolve_address(objects, probe)
            .and_then(|info| info.symbol.map(|name| (name, info.offset + (frame.return_address - probe))));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::parse_maps;

    fn obj(path: &str, base: u64, bias: u64, syms: &[(&str, u64, u64)]) -> LoadedObject {
        LoadedObject {
            path: path.into(),
            base,
            is_pie: bias != 0,
            load_bias: bias,
            symbols: Arc::new(
                syms.iter()
                    .map(|(n, v, s)| SymbolEntry {
                        name: n.to_string(),
                        value: *v,
                        size: *s,
                        kind: SymbolKind::Func,
                        source_table: SymbolTable::Symtab,
                    })
                    .collect(),
            ),
            ranges: vec![(base, base + 0x10000)],
        }
    }

    #[test]
    fn resolution_and_ambiguity() {
        let objs = [
            obj("/bin/main", 0x400000, 0, &[("f", 0x401000, 0x20), ("g", 0x401020, 0)]),
            obj("/lib/libshadow.so", 0x7f0000000000, 0x7f0000000000, &[("f", 0x1100, 0x10)]),
        ];
        assert!(matches!(
            resolve_symbol(&objs, "f", None),
            Err(Error::AmbiguousSymbol { ref candidates, .. }) if candidates.len() == 2
        ));
        assert_eq!(resolve_symbol(&objs, "f", Some("main")).unwrap(), 0x401000);
        assert_eq!(resolve_symbol(&objs, "f", Some("libshadow")).unwrap(), 0x7f0000001100);
        assert!(matches!(resolve_symbol(&objs, "h", None), Err(Error::SymbolNotFound(_))));

        let info = resolve_address(&objs, 0x401004).unwrap();
        assert_eq!((info.symbol.as_deref(), info.offset), (Some("f"), 4));
        let info = resolve_address(&objs, 0x401030).unwrap();
        assert_eq!((info.symbol.as_deref(), info.offset), (Some("g"), 0x10));
        let info = resolve_address(&objs, 0x400010).unwrap();
        assert_eq!((info.symbol, info.offset), (None, 0x10));
        assert!(resolve_address(&objs, 0x10).is_none());
    }

    #[test]
    fn fp_walk_over_synthetic_stack() {
        let maps = parse_maps(
            "00400000-00401000 r-xp 00000000 08:01 1 /bin/main\n\
             7ffff000-80000000 rw-p 00000000 00:00 0 [stack]\n",
        )
        .unwrap();
        let mut stack: HashMap<u64, u64> = HashMap::new();
        // frame chain: 0x7ffff100 -> 0x7ffff200 -> 0x7ffff300 -> 0
        stack.insert(0x7ffff100, 0x7ffff200);
        stack.insert(0x7ffff108, 0x400100);
        stack.insert(0x7ffff200, 0x7ffff300);
        stack.insert(0x7ffff208, 0x400200);
        stack.insert(0x7ffff300, 0);
        stack.insert(0x7ffff308, 0x400300);
        let mut regs = RegisterFile::zeroed(Arch::Amd64);
        regs.set_pc(0x400050);
        regs.set_by_name("rsp", 0x7ffff0f0);
        regs.set_by_name("rbp", 0x7ffff100);
        let read = |a: u64| stack.get(&a).copied();

        let frames = walk_frames(&regs, &[0x90], &maps, 16, read);
        let bases: Vec<u64> = frames.iter().map(|f| f.frame_base).collect();
        assert_eq!(bases, [0x7ffff100, 0x7ffff200, 0x7ffff300, 0x7ffff310]);
        assert_eq!(frames[1].return_address, 0x400100);
        assert_eq!(walk_frames(&regs, &[0x90], &maps, 1, read).len(), 1);

        // At a push-rbp entry the caller's return address is on top of the stack.
        stack.insert(0x7ffff0f0, 0x400080);
        let read = |a: u64| stack.get(&a).copied();
        let frames = walk_frames(&regs, &[0x55], &maps, 3, read);
        assert_eq!(frames[1].return_address, 0x400080);
        assert_eq!(frames[1].frame_base, 0x7ffff100);
        assert_eq!(frames[2].return_address, 0x400100);

        // Garbage fp truncates the walk.
        regs.set_by_name("rbp", 0x6161616161616161);
        assert_eq!(walk_frames(&regs, &[0x90], &maps, 16, read).len(), 1);
    }
}
