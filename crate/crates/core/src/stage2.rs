//! Per-context stage-2 table sets. These are the only memory and IO access
//! control the normal world has: 2 MB identity blocks for RAM, 4 KB identity
//! pages for MMIO.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hw::{Machine, TlbEntry};
use crate::types::{ContextId, CoreId, PhysRange, BLOCK_2M, GIB, KIB, PAGE_4K};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Granularity {
    Block2M,
    Page4K,
}

impl Granularity {
    pub const fn bytes(self) -> u64 {
        match self {
            Granularity::Block2M => BLOCK_2M,
            Granularity::Page4K => PAGE_4K,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attr {
    Normal,
    Device,
    /// RAM mapped into exactly the rich OS and one sandbox.
    SharedChannel,
}

impl Attr {
    pub const fn granularity(self) -> Granularity {
        match self {
            Attr::Normal | Attr::SharedChannel => Granularity::Block2M,
            Attr::Device => Granularity::Page4K,
        }
    }
}

/// A valid descriptor. Invalid descriptors are not stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct S2Entry {
    pub ipa_block: u64,
    pub pa_block: u64,
    pub granularity: Granularity,
    pub attr: Attr,
}

impl S2Entry {
    pub fn range(&self) -> PhysRange {
        PhysRange::with_len(self.ipa_block, self.granularity.bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Translation {
    Hit(u64),
    Fault,
}

impl Translation {
    pub fn is_hit(self) -> bool {
        matches!(self, Translation::Hit(_))
    }
}

/// Bytes charged for one translation table page.
pub const TABLE_PAGE_BYTES: u64 = 4 * KIB;
/// Fixed cost of the top-level table (one page covering up to 512 GB).
pub const TOP_LEVEL_BYTES: u64 = TABLE_PAGE_BYTES;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Stage2TableSet {
    pub context: ContextId,
    entries: BTreeMap<u64, S2Entry>,
}

impl Stage2TableSet {
    pub fn new(context: ContextId) -> Self {
        Self {
            context,
            entries: BTreeMap::new(),
        }
    }

    /// The valid entry covering `ipa`, if any.
    pub fn lookup(&self, ipa: u64) -> Option<&S2Entry> {
        self.entries
            .range(..=ipa)
            .next_back()
            .map(|(_, e)| e)
            .filter(|e| e.range().contains(ipa))
    }

    pub fn entries(&self) -> impl Iterator<Item = &S2Entry> {
        self.entries.values()
    }

    pub fn entries_in(&self, range: PhysRange) -> impl Iterator<Item = &S2Entry> {
        let lead = self
            .entries
            .range(..range.start)
            .next_back()
            .map(|(_, e)| e)
            .filter(move |e| e.range().overlaps(&range));
        lead.into_iter()
            .chain(self.entries.range(range.start..range.end).map(|(_, e)| e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Identity-maps every granule of `range` with `attr`.
    ///
    /// Atomic: on error nothing is mapped.
    pub fn map(&mut self, range: PhysRange, attr: Attr) -> Result<usize> {
        let granularity = attr.granularity();
        let g = granularity.bytes();
        if range.is_empty() || !range.is_aligned(g) {
            return Err(Error::Alignment { range, granule: g });
        }
        if let Some(e) = self.entries_in(range).next() {
            return Err(Error::DoubleMap {
                block: e.ipa_block.max(range.start),
            });
        }
        let mut n = 0;
        for base in range.chunks(g) {
            self.entries.insert(
                base,
                S2Entry {
                    ipa_block: base,
                    pa_block: base,
                    granularity,
                    attr,
                },
            );
            n += 1;
        }
        Ok(n)
    }

    /// Invalidates every entry in `range`. Strict: every granule must be mapped.
    ///
    /// Atomic: on error nothing is unmapped.
    pub fn unmap(&mut self, range: PhysRange) -> Result<usize> {
        if range.is_empty() || !range.is_aligned(PAGE_4K) {
            return Err(Error::Alignment {
                range,
                granule: PAGE_4K,
            });
        }
        let mut cursor = range.start;
        let mut victims = Vec::new();
        while cursor < range.end {
            match self.entries.get(&cursor) {
                Some(e) => {
                    let size = e.granularity.bytes();
                    if cursor + size > range.end {
                        return Err(Error::Alignment {
                            range,
                            granule: size,
                        });
                    }
                    victims.push(cursor);
                    cursor += size;
                }
                None => {
                    if let Some(e) = self.lookup(cursor) {
                        return Err(Error::Alignment {
                            range,
                            granule: e.granularity.bytes(),
                        });
                    }
                    return Err(Error::NotMapped { block: cursor });
                }
            }
        }
        for v in &victims {
            self.entries.remove(v);
        }
        Ok(victims.len())
    }

    /// Modeled table storage: a fixed top-level page, one level-2 page per
    /// populated 1 GB region and one level-3 page per 2 MB region that holds
    /// 4 KB pages.
    pub fn footprint(&self) -> u64 {
        let mut l2: Vec<u64> = Vec::new();
        let mut l3: Vec<u64> = Vec::new();
        for e in self.entries.values() {
            let gb = e.ipa_block / GIB;
            if l2.last() != Some(&gb) {
                l2.push(gb);
            }
            if e.granularity == Granularity::Page4K {
                let mb2 = e.ipa_block / BLOCK_2M;
                if l3.last() != Some(&mb2) {
                    l3.push(mb2);
                }
            }
        }
        // entries are address-ordered, so duplicates are adjacent
        TOP_LEVEL_BYTES + TABLE_PAGE_BYTES * (l2.len() as u64 + l3.len() as u64)
    }
}

impl Machine {
    /// Walks the core's active table set. A TLB hit short-circuits the walk;
    /// a table hit fills the TLB.
    pub fn s2_translate(&mut self, core: CoreId, ipa: u64) -> Translation {
        let Some(ctx) = self
            .cores
            .get(core.0 as usize)
            .and_then(|c| c.active_tables)
        else {
            return Translation::Fault;
        };
        if let Some(e) = self.tlbs[core.0 as usize].lookup(ctx, ipa) {
            return Translation::Hit(e.pa_block + (ipa - e.ipa_block));
        }
        let Some(entry) = self.tables.get(&ctx).and_then(|t| t.lookup(ipa)).copied() else {
            return Translation::Fault;
        };
        self.tlb_insert(
            core,
            TlbEntry {
                core,
                context: ctx,
                ipa_block: entry.ipa_block,
                pa_block: entry.pa_block,
                granularity: entry.granularity,
            },
        );
        Translation::Hit(entry.pa_block + (ipa - entry.ipa_block))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::MachineConfig;
    use crate::types::{SandboxId, MIB};
    use proptest::prelude::*;

    fn sb1() -> ContextId {
        ContextId::Sandbox(SandboxId(1))
    }

    #[test]
    fn map_128mb_gives_64_blocks() {
        let mut t = Stage2TableSet::new(sb1());
        let r = PhysRange::new(256 * MIB, 384 * MIB);
        assert_eq!(
            t.map(r, Attr::Normal).unwrap(),
            (128 * MIB / BLOCK_2M) as usize
        );
        assert!(t.entries().all(|e| e.granularity == Granularity::Block2M));
        assert_eq!(t.unmap(r).unwrap(), 64);
        assert!(t.is_empty());
    }

    #[test]
    fn misaligned_normal_map_fails() {
        let mut t = Stage2TableSet::new(sb1());
        let r = PhysRange::new(256 * MIB, 256 * MIB + PAGE_4K);
        assert!(matches!(
            t.map(r, Attr::Normal),
            Err(Error::Alignment { .. })
        ));
        assert!(t.is_empty());
    }

    #[test]
    fn device_map_uses_4k_pages() {
        let cfg = MachineConfig::default();
        let gpu = cfg.peripherals[0].mmio;
        let mut t = Stage2TableSet::new(sb1());
        assert_eq!(
            t.map(gpu, Attr::Device).unwrap(),
            (gpu.len() / PAGE_4K) as usize
        );
        assert!(t.entries().all(|e| e.granularity == Granularity::Page4K));
    }

    #[test]
    fn double_map_is_rejected_atomically() {
        let mut t = Stage2TableSet::new(sb1());
        t.map(PhysRange::new(4 * MIB, 6 * MIB), Attr::Normal)
            .unwrap();
        let err = t.map(PhysRange::new(0, 8 * MIB), Attr::Normal).unwrap_err();
        assert_eq!(err, Error::DoubleMap { block: 4 * MIB });
        assert_eq!(t.len(), 1);
        // a 4 KB page inside a mapped 2 MB block also overlaps
        assert!(matches!(
            t.map(
                PhysRange::with_len(4 * MIB + PAGE_4K, PAGE_4K),
                Attr::Device
            ),
            Err(Error::DoubleMap { .. })
        ));
    }

    #[test]
    fn unmapping_unmapped_range_is_strict() {
        let mut t = Stage2TableSet::new(sb1());
        assert_eq!(
            t.unmap(PhysRange::new(0, 2 * MIB)),
            Err(Error::NotMapped { block: 0 })
        );
        t.map(PhysRange::new(0, 2 * MIB), Attr::Normal).unwrap();
        assert_eq!(
            t.unmap(PhysRange::new(0, 4 * MIB)),
            Err(Error::NotMapped { block: 2 * MIB })
        );
        assert_eq!(t.len(), 1);
        assert!(matches!(
            t.unmap(PhysRange::new(0, PAGE_4K)),
            Err(Error::Alignment { .. })
        ));
    }

    #[test]
    fn unmapped_peripheral_page_faults_for_ros() {
        let mut m = Machine::new(MachineConfig::default()).unwrap();
        let wifi = m.config.peripherals[1].mmio;
        let page = PhysRange::with_len(wifi.start, PAGE_4K);
        assert_eq!(
            m.tables_mut(ContextId::Ros).unwrap().unmap(page).unwrap(),
            1
        );
        assert_eq!(m.s2_translate(CoreId(0), wifi.start), Translation::Fault);
        assert!(m.s2_translate(CoreId(0), wifi.start + PAGE_4K).is_hit());
    }

    #[test]
    fn identity_hit_and_foreign_fault() {
        let mut m = Machine::new(MachineConfig::default()).unwrap();
        assert_eq!(
            m.s2_translate(CoreId(1), 0x1000_0000),
            Translation::Hit(0x1000_0000)
        );
        let region = PhysRange::new(256 * MIB, 384 * MIB);
        let mut sb = Stage2TableSet::new(sb1());
        sb.map(region, Attr::Normal).unwrap();
        m.tables.insert(sb1(), sb);
        m.tables_mut(ContextId::Ros).unwrap().unmap(region).unwrap();
        assert_eq!(m.s2_translate(CoreId(1), 300 * MIB), Translation::Fault);
    }

    #[test]
    fn stale_tlb_entry_still_translates() {
        let mut m = Machine::new(MachineConfig::default()).unwrap();
        let region = PhysRange::new(256 * MIB, 258 * MIB);
        assert!(m.s2_translate(CoreId(1), region.start).is_hit());
        m.tables_mut(ContextId::Ros).unwrap().unmap(region).unwrap();
        // the only reason this still hits is the retained TLB entry
        assert!(m
            .tlb_entries()
            .any(|e| e.context == ContextId::Ros && e.covers(region.start + 8)));
        assert!(m.s2_translate(CoreId(1), region.start + 8).is_hit());
        m.tlb_flush_range(region).unwrap();
        assert_eq!(
            m.s2_translate(CoreId(1), region.start + 8),
            Translation::Fault
        );
    }

    #[test]
    fn footprint_bounds() {
        let empty = Stage2TableSet::new(sb1());
        assert_eq!(empty.footprint(), TOP_LEVEL_BYTES);

        let cfg = MachineConfig::default();
        let mut t = Stage2TableSet::new(sb1());
        t.map(PhysRange::new(0, cfg.ram_bytes), Attr::Normal)
            .unwrap();
        t.map(cfg.io_window, Attr::Device).unwrap();
        let fp = t.footprint();
        assert!(fp <= 2 * MIB, "footprint {fp}");
        assert!(8 * fp <= 16 * MIB);
        // 1 top page + 4 level-2 pages + 256 level-3 pages
        assert_eq!(fp, TABLE_PAGE_BYTES * (1 + 4 + 256));
    }

    proptest! {
        // With empty TLBs the walk agrees with a direct scan of the entries.
        #[test]
        fn translate_agrees_with_table_scan(
            blocks in proptest::collection::btree_set(0u64..64, 0..20),
            probes in proptest::collection::vec(0u64..(130 * MIB), 1..40),
        ) {
            let mut m = Machine::new(MachineConfig::small()).unwrap();
            let mut t = Stage2TableSet::new(sb1());
            for b in &blocks {
                t.map(PhysRange::with_len(b * BLOCK_2M, BLOCK_2M), Attr::Normal).unwrap();
            }
            m.tables.insert(sb1(), t.clone());
            m.cores[1].active_tables = Some(sb1());
            for ipa in probes {
                m.tlbs[1] = crate::hw::Tlb::new(8);
                let expected = blocks.contains(&(ipa / BLOCK_2M));
                let got = m.s2_translate(CoreId(1), ipa);
                prop_assert_eq!(got.is_hit(), expected);
                if let Translation::Hit(pa) = got {
                    prop_assert_eq!(pa, ipa);
                }
            }
            for e in t.entries() {
                prop_assert_eq!(e.ipa_block, e.pa_block);
                prop_assert_eq!(e.attr.granularity(), e.granularity);
            }
        }
    }
}
