//! Functional oracle: the version every read must observe if the hierarchy
//! behaves correctly.

use std::collections::HashMap;

use crate::cache::Version;
use crate::trace::{AccessKind, MemoryRequest};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldenMemory {
    line_shift: u32,
    versions: HashMap<u64, Version>,
    next_version: Version,
}

impl GoldenMemory {
    pub fn new(line_size: u32) -> Self {
        GoldenMemory {
            line_shift: line_size.trailing_zeros(),
            versions: HashMap::new(),
            next_version: 1,
        }
    }

    pub fn line_addr(&self, addr: u64) -> u64 {
        addr >> self.line_shift << self.line_shift
    }

    /// Applies one request in trace order. Writes take the next version;
    /// reads return the current one (0 for never-written lines).
    pub fn apply(&mut self, request: &MemoryRequest) -> Version {
        let line = self.line_addr(request.address);
        match request.kind {
            AccessKind::Read => self.read(line),
            AccessKind::Write => {
                let v = self.next_version;
                self.next_version += 1;
                self.versions.insert(line, v);
                v
            }
        }
    }

    pub fn read(&self, addr: u64) -> Version {
        self.versions
            .get(&self.line_addr(addr))
            .copied()
            .unwrap_or(0)
    }

    pub fn next_version(&self) -> Version {
        self.next_version
    }

    pub fn len(&self) -> usize {
        self.versions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.versions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, Version)> + '_ {
        self.versions.iter().map(|(&a, &v)| (a, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    CorruptedRead,
}

/// Compares a serviced read against the oracle.
pub fn verify_outcome(corrupted: bool, returned: Version, expected: Version) -> Verdict {
    if corrupted || returned != expected {
        Verdict::CorruptedRead
    } else {
        Verdict::Ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(index: usize, kind: AccessKind, address: u64) -> MemoryRequest {
        MemoryRequest {
            index,
            kind,
            address,
        }
    }

    #[test]
    fn unwritten_line_reads_zero() {
        let mut g = GoldenMemory::new(64);
        assert_eq!(g.apply(&req(0, AccessKind::Read, 0x1234)), 0);
    }

    #[test]
    fn read_after_write_sees_the_write() {
        let mut g = GoldenMemory::new(64);
        let v = g.apply(&req(0, AccessKind::Write, 0x100));
        assert_eq!(g.apply(&req(1, AccessKind::Read, 0x13f)), v);
    }

    #[test]
    fn interleaved_lines_keep_their_versions() {
        let mut g = GoldenMemory::new(64);
        let mut vx = 0;
        for i in 0..12 {
            let addr = if i == 4 { 0x0 } else { 0x40 * (i as u64 + 2) };
            let v = g.apply(&req(i, AccessKind::Write, addr));
            if i == 4 {
                vx = v;
            }
        }
        assert_eq!(vx, 5);
        assert_eq!(g.apply(&req(12, AccessKind::Read, 0x8)), 5);
    }

    #[test]
    fn verdicts() {
        assert_eq!(verify_outcome(false, 3, 3), Verdict::Ok);
        assert_eq!(verify_outcome(true, 3, 3), Verdict::CorruptedRead);
        assert_eq!(verify_outcome(false, 2, 3), Verdict::CorruptedRead);
    }
}
