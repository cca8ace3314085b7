//! Syscall number/name tables, loaded from the checked-in `data/syscalls.tbl`.
//!
//! The table format is one entry per line, `<arch> <nr> <name>`, with `#`
//! comments. It is embedded at compile time so lookups never depend on the
//! host's headers.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::arch::Arch;
use crate::error::{Error, Result};

const TABLE: &str = include_str!("../data/syscalls.tbl");

#[derive(Debug, Default)]
pub struct SyscallTable {
    by_nr: HashMap<u64, &'static str>,
    by_name: HashMap<&'static str, u64>,
}

impl SyscallTable {
    pub fn for_arch(arch: Arch) -> &'static SyscallTable {
        static AMD64: OnceLock<SyscallTable> = OnceLock::new();
        static AARCH64: OnceLock<SyscallTable> = OnceLock::new();
        let cell = match arch {
            Arch::Amd64 => &AMD64,
            Arch::Aarch64 => &AARCH64,
        };
        cell.get_or_init(|| parse_table(TABLE, arch).expect("embedded syscall table is well formed"))
    }

    pub fn name(&self, nr: u64) -> Option<&'static str> {
        self.by_nr.get(&nr).copied()
    }

    pub fn number(&self, name: &str) -> Option<u64> {
        self.by_name.get(name).copied()
    }

    /// Accepts either a name or a decimal number.
    pub fn resolve(&self, spec: &str) -> Result<u64> {
        if let Some(nr) = self.number(spec) {
            return Ok(nr);
        }
        match spec.parse::<u64>() {
            Ok(nr) if self.by_nr.contains_key(&nr) => Ok(nr),
            _ => Err(Error::UnknownSyscall(spec.to_string())),
        }
    }

    pub fn len(&self) -> usize {
        self.by_nr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_nr.is_empty()
    }
}

/// Display name for `nr`, falling back to `syscall_<nr>` for unknown numbers.
pub fn syscall_name(arch: Arch, nr: u64) -> String {
    match SyscallTable::for_arch(arch).name(nr) {
        Some(name) => name.to_string(),
        None => format!("syscall_{nr}"),
    }
}

fn parse_table(text: &'static str, arch: Arch) -> std::result::Result<SyscallTable, String> {
    let mut table = SyscallTable::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&'static str> = line.split_whitespace().collect();
        let [a, nr, name] = fields[..] else {
            return Err(format!("line {}: expected 3 fields", lineno + 1));
        };
        let a: Arch = a.parse()?;
        if a != arch {
            continue;
        }
        let nr: u64 = nr.parse().map_err(|_| format!("line {}: bad number {nr}", lineno + 1))?;
        table.by_nr.insert(nr, name);
        table.by_name.insert(name, nr);
    }
    Ok(table)
}
