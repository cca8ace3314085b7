//! Minimal ELF64 little-endian reader: header, program headers and the two
//! symbol tables. Every access is bounds-checked against the input buffer.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::arch::Arch;
use crate::error::{Error, Result};

pub const ET_EXEC: u16 = 2;
pub const ET_DYN: u16 = 3;
pub const PT_LOAD: u32 = 1;
pub const PF_X: u32 = 1;

const SHT_SYMTAB: u32 = 2;
const SHT_DYNSYM: u32 = 11;
const SHN_UNDEF: u16 = 0;
const STT_OBJECT: u8 = 1;
const STT_FUNC: u8 = 2;

const EHDR_SIZE: usize = 64;
const PHDR_SIZE: usize = 56;
const SHDR_SIZE: usize = 64;
const SYM_SIZE: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolKind {
    Func,
    Object,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SymbolTable {
    Dynsym,
    Symtab,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolEntry {
    pub name: String,
    /// Link-time value: an offset from the load base for PIE and shared
    /// objects, an absolute address for non-PIE executables.
    pub value: u64,
    pub size: u64,
    pub kind: SymbolKind,
    pub source_table: SymbolTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub vaddr: u64,
    pub memsz: u64,
    pub offset: u64,
    pub filesz: u64,
    pub flags: u32,
}

#[derive(Debug, Clone)]
pub struct ElfFile {
    pub arch: Arch,
    pub elf_type: u16,
    pub entry: u64,
    pub loads: Vec<Segment>,
    pub symbols: Vec<SymbolEntry>,
}

impl ElfFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let data = fs::read(path)?;
        Self::parse(&data)
    }

    pub fn parse(data: &[u8]) -> Result<Self> {
        let r = Reader(data);
        let (arch, elf_type) = check_ident(&r)?;
        let entry = r.u64(24)?;
        let loads = program_headers(&r)?;
        let symbols = symbols(&r)?;
        Ok(ElfFile { arch, elf_type, entry, loads, symbols })
    }

    pub fn is_pie(&self) -> bool {
        self.elf_type == ET_DYN
    }

    /// Lowest loadable virtual address, rounded down to a page.
    pub fn link_base(&self) -> u64 {
        self.loads.iter().map(|s| s.vaddr).min().unwrap_or(0) & !0xfff
    }

    /// File offset backing link-time address `vaddr`.
    pub fn vaddr_to_offset(&self, vaddr: u64) -> Option<u64> {
        self.loads.iter().find(|s| s.vaddr <= vaddr && vaddr - s.vaddr < s.filesz).map(|s| s.offset + (vaddr - s.vaddr))
    }

    pub fn symbol(&self, name: &str) -> Option<&SymbolEntry> {
        self.symbols.iter().find(|s| s.name == name)
    }
}

/// Symbols of the ELF file at `path`, deduplicated by name.
pub fn parse_symbols(path: impl AsRef<Path>) -> Result<Vec<SymbolEntry>> {
    Ok(ElfFile::open(path)?.symbols)
}

/// Reads only the header to find the target architecture.
pub fn detect_arch(path: impl AsRef<Path>) -> Result<Arch> {
    let mut head = Vec::with_capacity(EHDR_SIZE);
    fs::File::open(path)?.take(EHDR_SIZE as u64).read_to_end(&mut head)?;
    check_ident(&Reader(&head)).map(|(arch, _)| arch)
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn bytes(&self, offset: u64, len: u64) -> Result<&[u8]> {
        let start = usize::try_from(offset).ok();
        let end = offset.checked_add(len).and_then(|e| usize::try_from(e).ok());
        match (start, end) {
            (Some(s), Some(e)) if e <= self.0.len() => Ok(&self.0[s..e]),
            _ => Err(Error::ElfParse { offset, cause: "read past end of file" }),
        }
    }

    fn u8(&self, offset: u64) -> Result<u8> {
        Ok(self.bytes(offset, 1)?[0])
    }

    fn u16(&self, offset: u64) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(offset, 2)?.try_into().unwrap()))
    }

    fn u32(&self, offset: u64) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(offset, 4)?.try_into().unwrap()))
    }

    fn u64(&self, offset: u64) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(offset, 8)?.try_into().unwrap()))
    }

    fn cstr(&self, offset: u64, limit: u64) -> Result<&str> {
        let tail = self.bytes(offset, limit.saturating_sub(offset))?;
        let end = tail.iter().position(|b| *b == 0).ok_or(Error::ElfParse { offset, cause: "unterminated string" })?;
        std::str::from_utf8(&tail[..end]).map_err(|_| Error::ElfParse { offset, cause: "symbol name is not UTF-8" })
    }
}

fn check_ident(r: &Reader) -> Result<(Arch, u16)> {
    if r.bytes(0, 4)? != b"\x7fELF" {
        return Err(Error::ElfParse { offset: 0, cause: "bad magic" });
    }
    match r.u8(4)? {
        2 => {}
        1 => return Err(Error::UnsupportedTarget("32-bit ELF".into())),
        _ => return Err(Error::ElfParse { offset: 4, cause: "bad class" }),
    }
    match r.u8(5)? {
        1 => {}
        2 => return Err(Error::UnsupportedTarget("big-endian ELF".into())),
        _ => return Err(Error::ElfParse { offset: 5, cause: "bad data encoding" }),
    }
    r.bytes(0, EHDR_SIZE as u64)?;
    let machine = r.u16(18)?;
    let arch =
        Arch::from_elf_machine(machine).ok_or_else(|| Error::UnsupportedTarget(format!("ELF machine {machine}")))?;
    Ok((arch, r.u16(16)?))
}

fn table_layout(r: &Reader, off_at: u64, entsize_at: u64, num_at: u64, min_entsize: usize) -> Result<(u64, u64, u64)> {
    let off = r.u64(off_at)?;
    let entsize = r.u16(entsize_at)? as u64;
    let num = r.u16(num_at)? as u64;
    if num > 0 && entsize < min_entsize as u64 {
        return Err(Error::ElfParse { offset: entsize_at, cause: "header entry size too small" });
    }
    Ok((off, entsize, num))
}

fn program_headers(r: &Reader) -> Result<Vec<Segment>> {
    let (phoff, entsize, num) = table_layout(r, 32, 54, 56, PHDR_SIZE)?;
    let mut loads = Vec::new();
    for i in 0..num {
        let base = i
            .checked_mul(entsize)
            .and_then(|o| o.checked_add(phoff))
            .ok_or(Error::ElfParse { offset: 32, cause: "program header offset overflow" })?;
        r.bytes(base, entsize)?;
        if r.u32(base)? != PT_LOAD {
            continue;
        }
        let seg = Segment {
            flags: r.u32(base + 4)?,
            offset: r.u64(base + 8)?,
            vaddr: r.u64(base + 16)?,
            filesz: r.u64(base + 32)?,
            memsz: r.u64(base + 40)?,
        };
        if seg.vaddr.checked_add(seg.memsz).is_none() || seg.filesz > seg.memsz {
            return Err(Error::ElfParse { offset: base, cause: "inconsistent PT_LOAD segment" });
        }
        loads.push(seg);
    }
    Ok(loads)
}

struct Section {
    kind: u32,
    offset: u64,
    size: u64,
    link: u32,
    entsize: u64,
}

fn sections(r: &Reader) -> Result<Vec<Section>> {
    let (shoff, entsize, num) = table_layout(r, 40, 58, 60, SHDR_SIZE)?;
    let mut out = Vec::with_capacity(num as usize);
    for i in 0..num {
        let base = i
            .checked_mul(entsize)
            .and_then(|o| o.checked_add(shoff))
            .ok_or(Error::ElfParse { offset: 40, cause: "section header offset overflow" })?;
        r.bytes(base, entsize)?;
        out.push(Section {
            kind: r.u32(base + 4)?,
            offset: r.u64(base + 24)?,
            size: r.u64(base + 32)?,
            link: r.u32(base + 40)?,
            entsize: r.u64(base + 56)?,
        });
    }
    Ok(out)
}

fn symbols(r: &Reader) -> Result<Vec<SymbolEntry>> {
    let sections = sections(r)?;
    let mut out: Vec<SymbolEntry> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    // SYMTAB first so it claims names before DYNSYM.
    for (kind, table) in [(SHT_SYMTAB, SymbolTable::Symtab), (SHT_DYNSYM, SymbolTable::Dynsym)] {
        let mut from_table: Vec<SymbolEntry> = Vec::new();
        for sec in sections.iter().filter(|s| s.kind == kind) {
            read_table(r, &sections, sec, table, &mut from_table)?;
        }
        for sym in from_table {
            match index.get(&sym.name) {
                None => {
                    index.insert(sym.name.clone(), out.len());
                    out.push(sym);
                }
                Some(&i) => {
                    let existing = &mut out[i];
                    if existing.source_table == sym.source_table && existing.size == 0 && sym.size != 0 {
                        *existing = sym;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn read_table(
    r: &Reader,
    sections: &[Section],
    sec: &Section,
    table: SymbolTable,
    out: &mut Vec<SymbolEntry>,
) -> Result<()> {
    if sec.entsize < SYM_SIZE as u64 {
        return Err(Error::ElfParse { offset: sec.offset, cause: "symbol entry size too small" });
    }
    let strtab = sections
        .get(sec.link as usize)
        .ok_or(Error::ElfParse { offset: sec.offset, cause: "symbol table links a missing string table" })?;
    let str_end = strtab
        .offset
        .checked_add(strtab.size)
        .ok_or(Error::ElfParse { offset: strtab.offset, cause: "string table overflow" })?;
    r.bytes(strtab.offset, strtab.size)?;
    r.bytes(sec.offset, sec.size)?;
    let count = sec.size / sec.entsize;
    for i in 0..count {
        let base = sec.offset + i * sec.entsize;
        let name_off = r.u32(base)? as u64;
        let info = r.u8(base + 4)?;
        let shndx = r.u16(base + 6)?;
        let value = r.u64(base + 8)?;
        let size = r.u64(base + 16)?;
        if name_off == 0 || shndx == SHN_UNDEF {
            continue;
        }
        let name_at = strtab
            .offset
            .checked_add(name_off)
            .ok_or(Error::ElfParse { offset: base, cause: "symbol name offset overflow" })?;
        if name_at >= str_end {
            return Err(Error::ElfParse { offset: base, cause: "symbol name outside string table" });
        }
        let name = r.cstr(name_at, str_end)?;
        if name.is_empty() || value.checked_add(size).is_none() {
            continue;
        }
        let kind = match info & 0xf {
            STT_FUNC => SymbolKind::Func,
            STT_OBJECT => SymbolKind::Object,
            _ => SymbolKind::Other,
        };
        out.push(SymbolEntry { name: name.to_string(), value, size, kind, source_table: table });
    }
    Ok(())
}
