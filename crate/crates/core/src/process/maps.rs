//! `/proc/<pid>/maps` mirror.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

const PAGE_SIZE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
    pub private: bool,
}

impl Perms {
    fn parse(s: &str) -> Option<Perms> {
        let b = s.as_bytes();
        if b.len() != 4 {
            return None;
        }
        let flag = |c: u8, set: u8| match c {
            b'-' => Some(false),
            c if c == set => Some(true),
            _ => None,
        };
        Some(Perms {
            read: flag(b[0], b'r')?,
            write: flag(b[1], b'w')?,
            exec: flag(b[2], b'x')?,
            private: match b[3] {
                b'p' => true,
                b's' => false,
                _ => return None,
            },
        })
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}{}{}",
            if self.read { 'r' } else { '-' },
            if self.write { 'w' } else { '-' },
            if self.exec { 'x' } else { '-' },
            if self.private { 'p' } else { 's' },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryMap {
    pub start: u64,
    pub end: u64,
    pub perms: Perms,
    pub file_offset: u64,
    pub path: Option<String>,
}

impl MemoryMap {
    pub fn contains(&self, addr: u64) -> bool {
        self.start <= addr && addr < self.end
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// True for mappings backed by a regular file.
    pub fn is_file_backed(&self) -> bool {
        self.path.as_deref().is_some_and(|p| p.starts_with('/'))
    }

    /// Anonymous read/write memory, which is where thread stacks live.
    pub fn is_stack_like(&self) -> bool {
        self.perms.read
            && self.perms.write
            && !self.perms.exec
            && match self.path.as_deref() {
                None => true,
                Some(p) => p.starts_with("[stack"),
            }
    }
}

fn parse_line(line: &str) -> Option<MemoryMap> {
    let mut fields = line.splitn(6, ' ');
    let range = fields.next()?;
    let perms = Perms::parse(fields.next()?)?;
    let offset = u64::from_str_radix(fields.next()?, 16).ok()?;
    let _dev = fields.next()?;
    let _inode: u64 = fields.next()?.parse().ok()?;
    let path = fields.next().map(str::trim_start).filter(|p| !p.is_empty()).map(str::to_string);

    let (start, end) = range.split_once('-')?;
    let start = u64::from_str_radix(start, 16).ok()?;
    let end = u64::from_str_radix(end, 16).ok()?;
    if start >= end || start % PAGE_SIZE != 0 || end % PAGE_SIZE != 0 {
        return None;
    }
    Some(MemoryMap { start, end, perms, file_offset: offset, path })
}

/// Parses maps text, checking that entries are sorted and disjoint.
pub fn parse_maps(text: &str) -> Result<Vec<MemoryMap>> {
    let mut maps: Vec<MemoryMap> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let map = parse_line(line).ok_or_else(|| Error::MapParse { line: line.to_string() })?;
        if let Some(prev) = maps.last() {
            if map.start < prev.end {
                return Err(Error::MapParse { line: line.to_string() });
            }
        }
        maps.push(map);
    }
    Ok(maps)
}

pub fn read_maps(pid: i32) -> Result<Vec<MemoryMap>> {
    let path = format!("/proc/{pid}/maps");
    let text = std::fs::read_to_string(Path::new(&path)).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NoSuchProcess(pid),
        _ => Error::Io(e),
    })?;
    parse_maps(&text)
}

/// The unique map containing `addr`. `maps` must be sorted by start.
pub fn find_map(maps: &[MemoryMap], addr: u64) -> Option<&MemoryMap> {
    let idx = maps.partition_point(|m| m.start <= addr);
    idx.checked_sub(1).map(|i| &maps[i]).filter(|m| m.contains(addr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = "\
00400000-00401000 r--p 00000000 08:02 131 /bin/true
00401000-00402000 r-xp 00001000 08:02 131 /bin/true
7ffff7fc1000-7ffff7fc5000 r--p 00000000 00:00 0                          [vvar]
7ffffffde000-7ffffffff000 rw-p 00000000 00:00 0                          [stack]
7ffff0000000-7ffff0002000 rw-p 00000000 00:00 0
";

    #[test]
    fn parses_fields() {
        let line = "556600000000-556600001000 r-xp 00001000 08:02 131 /bin/true";
        let maps = parse_maps(line).unwrap();
        assert_eq!(maps.len(), 1);
        let m = &maps[0];
        assert_eq!(m.start, 0x5566_0000_0000);
        assert_eq!(m.end, 0x5566_0000_1000);
        assert!(m.perms.exec && m.perms.read && !m.perms.write && m.perms.private);
        assert_eq!(m.file_offset, 0x1000);
        assert_eq!(m.path.as_deref(), Some("/bin/true"));
        assert_eq!(m.perms.to_string(), "r-xp");
    }

    #[test]
    fn path_with_spaces_and_anonymous() {
        let maps = parse_maps(
            "00400000-00401000 r--p 00000000 08:02 131 /tmp/a b/c\n\
             00500000-00502000 rw-p 00000000 00:00 0 \n",
        )
        .unwrap();
        assert_eq!(maps[0].path.as_deref(), Some("/tmp/a b/c"));
        assert_eq!(maps[1].path, None);
        assert_eq!(maps[1].len(), 8192);
    }

    #[test]
    fn rejects_bad_lines() {
        for bad in [
            "00400000-00401000  00000000 08:02 131 /bin/true",
            "00400000-00401000 rwz 00000000 08:02 131",
            "00401000-00400000 r--p 00000000 08:02 131",
            "00400001-00401000 r--p 00000000 08:02 131",
            "garbage",
        ] {
            assert!(matches!(parse_maps(bad), Err(Error::MapParse { .. })), "{bad}");
        }
        // overlap
        assert!(
            parse_maps("00400000-00402000 r--p 00000000 08:02 131\n00401000-00403000 r--p 00000000 08:02 131").is_err()
        );
    }

    #[test]
    fn find_map_boundaries() {
        let maps = parse_maps("00400000-00401000 r--p 00000000 08:02 131 /bin/true\n").unwrap();
        assert_eq!(find_map(&maps, 0x400000).unwrap().start, 0x400000);
        assert!(find_map(&maps, 0x401000).is_none());
        assert!(find_map(&maps, 0x3fffff).is_none());
        assert!(find_map(&[], 0x400000).is_none());
    }

    #[test]
    fn stack_like() {
        let maps = parse_maps(SAMPLE).unwrap_err();
        // SAMPLE is intentionally unsorted at the tail.
        assert!(matches!(maps, Error::MapParse { .. }));
        let sorted: String = {
            let mut lines: Vec<&str> = SAMPLE.lines().collect();
            lines.sort_by_key(|l| u64::from_str_radix(l.split('-').next().unwrap(), 16).unwrap());
            lines.join("\n")
        };
        let maps = parse_maps(&sorted).unwrap();
        let stack = maps.iter().find(|m| m.path.as_deref() == Some("[stack]")).unwrap();
        assert!(stack.is_stack_like());
        assert!(!maps[0].is_stack_like());
        assert!(maps[0].is_file_backed());
    }

    fn arb_maps() -> impl Strategy<Value = Vec<MemoryMap>> {
        proptest::collection::vec((0u64..64, 1u64..8), 0..24).prop_map(|spans| {
            let mut maps = Vec::new();
            let mut cursor = 0x10000u64;
            for (gap, len) in spans {
                let start = cursor + gap * PAGE_SIZE;
                let end = start + len * PAGE_SIZE;
                maps.push(MemoryMap { start, end, perms: Perms::default(), file_offset: 0, path: None });
                cursor = end;
            }
            maps
        })
    }

    proptest! {
        #[test]
        fn find_map_matches_linear_scan(maps in arb_maps(), probe in 0x10000u64..0x200000) {
            let linear = maps.iter().find(|m| m.start <= probe && probe < m.end);
            prop_assert_eq!(find_map(&maps, probe), linear);
        }
    }
}
