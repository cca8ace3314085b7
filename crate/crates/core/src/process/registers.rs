use std::fmt;

use crate::arch::{Arch, RegisterId, Role};

/// Architecture-tagged snapshot of a thread's integer register file.
///
/// Values are stored in the kernel's layout order for `arch`, so a snapshot
/// read from the tracee and written back unchanged is a no-op.
#[derive(Clone, PartialEq, Eq)]
pub struct RegisterFile {
    arch: Arch,
    values: Vec<u64>,
}

impl RegisterFile {
    pub fn zeroed(arch: Arch) -> Self {
        RegisterFile { arch, values: vec![0; arch.register_names().len()] }
    }

    /// Builds a snapshot from values in kernel layout order.
    ///
    /// Panics if `values` does not cover the whole register table.
    pub fn from_values(arch: Arch, values: Vec<u64>) -> Self {
        assert_eq!(values.len(), arch.register_names().len());
        RegisterFile { arch, values }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn get(&self, id: RegisterId) -> u64 {
        self.values[id.index()]
    }

    pub fn set(&mut self, id: RegisterId, value: u64) {
        self.values[id.index()] = value;
    }

    pub fn by_name(&self, name: &str) -> Option<u64> {
        self.arch.register(name).map(|id| self.get(id))
    }

    pub fn set_by_name(&mut self, name: &str, value: u64) -> bool {
        match self.arch.register(name) {
            Some(id) => {
                self.set(id, value);
                true
            }
            None => false,
        }
    }

    pub fn role(&self, role: Role) -> u64 {
        self.get(self.arch.role(role))
    }

    pub fn set_role(&mut self, role: Role, value: u64) {
        let id = self.arch.role(role);
        self.set(id, value);
    }

    pub fn pc(&self) -> u64 {
        self.role(Role::Pc)
    }

    pub fn set_pc(&mut self, pc: u64) {
        self.set_role(Role::Pc, pc);
    }

    pub fn sp(&self) -> u64 {
        self.role(Role::Sp)
    }

    pub fn fp(&self) -> u64 {
        self.role(Role::Fp)
    }

    pub fn syscall_nr(&self) -> u64 {
        self.role(Role::SyscallNr)
    }

    pub fn syscall_args(&self) -> [u64; 6] {
        std::array::from_fn(|i| self.role(Role::SyscallArg(i as u8)))
    }

    pub fn syscall_ret(&self) -> i64 {
        self.role(Role::SyscallRet) as i64
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, u64)> + '_ {
        self.arch.register_names().iter().copied().zip(self.values.iter().copied())
    }
}

impl fmt::Debug for RegisterFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (name, v) in self.iter() {
            m.entry(&name, &format_args!("{v:#x}"));
        }
        m.finish()
    }
}

/// Decodes a raw syscall return into an errno when it falls in the kernel's
/// error window `[-4095, -1]`.
pub fn syscall_errno(ret: i64) -> Option<i32> {
    if (-4095..=-1).contains(&ret) {
        Some((-ret) as i32)
    } else {
        None
    }
}
