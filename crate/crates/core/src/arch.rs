//! Architecture tables: register layouts, ABI register roles, trap encodings
//! and debug-register capacity for every supported target.
//!
//! All architecture knowledge used by the rest of the engine lives here, so
//! the event loop and tools can stay architecture-neutral.

use std::fmt;

/// Supported target architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Amd64,
    Aarch64,
}

/// Abstract register roles resolved per architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Pc,
    Sp,
    Fp,
    SyscallNr,
    /// Syscall argument 0..=5.
    SyscallArg(u8),
    SyscallRet,
}

impl Role {
    pub const ALL: [Role; 11] = [
        Role::Pc,
        Role::Sp,
        Role::Fp,
        Role::SyscallNr,
        Role::SyscallArg(0),
        Role::SyscallArg(1),
        Role::SyscallArg(2),
        Role::SyscallArg(3),
        Role::SyscallArg(4),
        Role::SyscallArg(5),
        Role::SyscallRet,
    ];
}

/// Index of a concrete register inside an architecture's register table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegisterId(pub(crate) u16);

impl RegisterId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

// Field order of the kernel's `user_regs_struct`.
const AMD64_REGS: &[&str] = &[
    "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10", "r9", "r8", "rax", "rcx", "rdx", "rsi", "rdi", "orig_rax",
    "rip", "cs", "eflags", "rsp", "ss", "fs_base", "gs_base", "ds", "es", "fs", "gs",
];

const AMD64_GP: &[&str] =
    &["rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"];

// Field order of the kernel's `user_pt_regs`.
const AARCH64_REGS: &[&str] = &[
    "x0", "x1", "x2", "x3", "x4", "x5", "x6", "x7", "x8", "x9", "x10", "x11", "x12", "x13", "x14", "x15", "x16", "x17",
    "x18", "x19", "x20", "x21", "x22", "x23", "x24", "x25", "x26", "x27", "x28", "x29", "x30", "sp", "pc", "pstate",
];

const AARCH64_GP: &[&str] = &[
    "x0", "x1", "x2", "x3", "x4", "x5", "x6", "x7", "x8", "x9", "x10", "x11", "x12", "x13", "x14", "x15", "x16", "x17",
    "x18", "x19", "x20", "x21", "x22", "x23", "x24", "x25", "x26", "x27", "x28", "x29", "x30",
];

// brk #0
const AARCH64_TRAP: [u8; 4] = 0xd420_0000u32.to_le_bytes();

impl Arch {
    /// Architecture of the machine this crate was compiled for.
    pub fn host() -> Option<Arch> {
        if cfg!(target_arch = "x86_64") {
            Some(Arch::Amd64)
        } else if cfg!(target_arch = "aarch64") {
            Some(Arch::Aarch64)
        } else {
            None
        }
    }

    /// Maps an ELF `e_machine` value.
    pub fn from_elf_machine(machine: u16) -> Option<Arch> {
        match machine {
            62 => Some(Arch::Amd64),
            183 => Some(Arch::Aarch64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Amd64 => "amd64",
            Arch::Aarch64 => "aarch64",
        }
    }

    /// Every register of the snapshot, in kernel layout order.
    pub fn register_names(self) -> &'static [&'static str] {
        match self {
            Arch::Amd64 => AMD64_REGS,
            Arch::Aarch64 => AARCH64_REGS,
        }
    }

    pub fn general_purpose(self) -> impl Iterator<Item = RegisterId> {
        let names = match self {
            Arch::Amd64 => AMD64_GP,
            Arch::Aarch64 => AARCH64_GP,
        };
        names.iter().map(move |n| self.register(n).expect("gp register in table"))
    }

    pub fn register(self, name: &str) -> Option<RegisterId> {
        self.register_names().iter().position(|n| *n == name).map(|i| RegisterId(i as u16))
    }

    pub fn register_name(self, id: RegisterId) -> &'static str {
        self.register_names()[id.index()]
    }

    /// Resolves an ABI role to its concrete register.
    ///
    /// On AMD64 the syscall number lives in `orig_rax` at a syscall stop;
    /// `rax` is already reused by the kernel for the return value.
    pub fn role(self, role: Role) -> RegisterId {
        let name = match (self, role) {
            (Arch::Amd64, Role::Pc) => "rip",
            (Arch::Amd64, Role::Sp) => "rsp",
            (Arch::Amd64, Role::Fp) => "rbp",
            (Arch::Amd64, Role::SyscallNr) => "orig_rax",
            (Arch::Amd64, Role::SyscallRet) => "rax",
            (Arch::Amd64, Role::SyscallArg(i)) => ["rdi", "rsi", "rdx", "r10", "r8", "r9"][i as usize],
            (Arch::Aarch64, Role::Pc) => "pc",
            (Arch::Aarch64, Role::Sp) => "sp",
            (Arch::Aarch64, Role::Fp) => "x29",
            (Arch::Aarch64, Role::SyscallNr) => "x8",
            (Arch::Aarch64, Role::SyscallRet) => "x0",
            (Arch::Aarch64, Role::SyscallArg(i)) => ["x0", "x1", "x2", "x3", "x4", "x5"][i as usize],
        };
        self.register(name).expect("role table names a real register")
    }

    /// Instruction bytes written over a software breakpoint site.
    pub fn trap_instruction(self) -> &'static [u8] {
        match self {
            Arch::Amd64 => &[0xCC],
            Arch::Aarch64 => &AARCH64_TRAP,
        }
    }

    /// How far past the patch the reported pc sits after a software trap.
    pub fn trap_pc_offset(self) -> u64 {
        match self {
            Arch::Amd64 => 1,
            Arch::Aarch64 => 0,
        }
    }

    /// Hardware breakpoint/watchpoint slots available per thread.
    pub fn hw_slots(self) -> usize {
        match self {
            Arch::Amd64 => 4,
            Arch::Aarch64 => 4,
        }
    }

    pub fn word_size(self) -> usize {
        8
    }

    /// A syscall without side effects, used to neutralize faulted calls.
    pub fn harmless_syscall(self) -> u64 {
        match self {
            Arch::Amd64 => 39,
            Arch::Aarch64 => 172,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "amd64" | "x86_64" => Ok(Arch::Amd64),
            "aarch64" | "arm64" => Ok(Arch::Aarch64),
            other => Err(format!("unknown architecture {other}")),
        }
    }
}
