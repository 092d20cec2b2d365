//! Identifiers, physical ranges and size constants shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;
pub const GIB: u64 = 1024 * MIB;

/// Stage-2 page granule used for IO space.
pub const PAGE_4K: u64 = 4 * KIB;
/// Stage-2 block granule used for RAM.
pub const BLOCK_2M: u64 = 2 * MIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoreId(pub u32);

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "core{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SandboxId(pub u32);

impl fmt::Display for SandboxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sb{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DevId(pub u32);

impl fmt::Display for DevId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev{}", self.0)
    }
}

/// An execution context that owns a stage-2 table set: the rich OS or one sandbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ContextId {
    Ros,
    Sandbox(SandboxId),
}

impl ContextId {
    pub fn sandbox(self) -> Option<SandboxId> {
        match self {
            ContextId::Ros => None,
            ContextId::Sandbox(id) => Some(id),
        }
    }
}

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextId::Ros => f.write_str("ros"),
            ContextId::Sandbox(id) => id.fmt(f),
        }
    }
}

impl From<SandboxId> for ContextId {
    fn from(id: SandboxId) -> Self {
        ContextId::Sandbox(id)
    }
}

/// Half-open physical address range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhysRange {
    pub start: u64,
    pub end: u64,
}

impl PhysRange {
    pub const fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub const fn with_len(start: u64, len: u64) -> Self {
        Self {
            start,
            end: start + len,
        }
    }

    pub fn len(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.start <= addr && addr < self.end
    }

    pub fn contains_range(&self, other: &PhysRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &PhysRange) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// True when the two ranges touch end-to-start without overlapping.
    pub fn adjoins(&self, other: &PhysRange) -> bool {
        self.end == other.start || other.end == self.start
    }

    pub fn is_aligned(&self, granule: u64) -> bool {
        self.start.is_multiple_of(granule) && self.end.is_multiple_of(granule)
    }

    /// Base addresses of every `granule`-sized chunk in the range.
    pub fn chunks(&self, granule: u64) -> impl Iterator<Item = u64> {
        let start = self.start;
        let n = self.len() / granule;
        (0..n).map(move |i| start + i * granule)
    }
}

impl fmt::Display for PhysRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#x}, {:#x})", self.start, self.end)
    }
}

pub fn align_down(addr: u64, granule: u64) -> u64 {
    addr - addr % granule
}

pub fn align_up(addr: u64, granule: u64) -> u64 {
    addr.div_ceil(granule) * granule
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_relations() {
        let a = PhysRange::with_len(0, 2 * MIB);
        let b = PhysRange::with_len(2 * MIB, 2 * MIB);
        assert!(a.adjoins(&b));
        assert!(!a.overlaps(&b));
        assert!(PhysRange::new(0, 4 * MIB).contains_range(&b));
        assert_eq!(PhysRange::new(0, 6 * MIB).chunks(BLOCK_2M).count(), 3);
    }

    #[test]
    fn alignment_helpers() {
        assert_eq!(align_down(0x1234, PAGE_4K), 0x1000);
        assert_eq!(align_up(0x1234, PAGE_4K), 0x2000);
        assert_eq!(align_up(0x2000, PAGE_4K), 0x2000);
    }
}
