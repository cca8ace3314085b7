#!/usr/bin/env python3
"""Regenerate crates/core/data/syscalls.tbl from the host's kernel UAPI headers.

Output format: one entry per line, `<arch> <nr> <name>`.
"""
import re
import sys

AMD64_HDR = "/usr/include/x86_64-linux-gnu/asm/unistd_64.h"
GENERIC_HDR = "/usr/include/asm-generic/unistd.h"

# 64-bit names for the __NR3264_* aliases in the generic table.
ALIASES_64 = {
    "fcntl": "fcntl",
    "statfs": "statfs",
    "fstatfs": "fstatfs",
    "truncate": "truncate",
    "ftruncate": "ftruncate",
    "lseek": "lseek",
    "sendfile": "sendfile",
    "fstatat": "newfstatat",
    "fstat": "fstat",
    "mmap": "mmap",
    "fadvise64": "fadvise64",
}

# Feature macros the arm64 UAPI header defines before including the generic table.
ARM64_WANTS = {
    "__ARCH_WANT_RENAMEAT",
    "__ARCH_WANT_NEW_STAT",
    "__ARCH_WANT_SET_GET_RLIMIT",
    "__ARCH_WANT_SYS_CLONE3",
}


def amd64():
    out = []
    for line in open(AMD64_HDR):
        m = re.match(r"#define __NR_(\w+)\s+(\d+)", line)
        if m:
            out.append((int(m.group(2)), m.group(1)))
    return out


def aarch64():
    out = []
    stack = []
    for line in open(GENERIC_HDR):
        s = line.strip()
        if s.startswith("#if"):
            active = True
            if s.startswith("#ifdef"):
                active = s.split()[1] in ARM64_WANTS
            elif s.startswith("#ifndef"):
                active = s.split()[1] not in ARM64_WANTS and s.split()[1] != "__SYSCALL"
                if s.split()[1] == "__SYSCALL":
                    active = True
            elif "__BITS_PER_LONG == 32" in s:
                active = False
            elif "__ARCH_WANT_TIME32_SYSCALLS" in s:
                active = True
            stack.append(active)
            continue
        if s.startswith("#else"):
            stack[-1] = not stack[-1]
            continue
        if s.startswith("#endif"):
            stack.pop()
            continue
        if not all(stack):
            continue
        m = re.match(r"#define __NR3264_(\w+)\s+(\d+)", s)
        if m:
            out.append((int(m.group(2)), ALIASES_64[m.group(1)]))
            continue
        m = re.match(r"#define __NR_(\w+)\s+(\d+)", s)
        if m and m.group(1) != "syscalls":
            out.append((int(m.group(2)), m.group(1)))
    return sorted(set(out))


def main():
    w = sys.stdout
    w.write("# <arch> <nr> <name>\n")
    w.write("# generated by scripts/gen_syscall_table.py\n")
    for nr, name in sorted(amd64()):
        w.write(f"amd64 {nr} {name}\n")
    for nr, name in aarch64():
        w.write(f"aarch64 {nr} {name}\n")


if __name__ == "__main__":
    main()
