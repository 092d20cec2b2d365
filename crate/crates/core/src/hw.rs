//! Physical machine model: cores, the RAM/MMIO address map, per-core TLBs and
//! a shared, physically indexed L2 cache whose lines remember who filled them.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stage2::{Granularity, Stage2TableSet};
use crate::types::{
    align_down, ContextId, CoreId, DevId, PhysRange, SandboxId, BLOCK_2M, GIB, MIB, PAGE_4K,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreClass {
    Big,
    Little,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoreDesc {
    pub id: CoreId,
    pub class: CoreClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeripheralKind {
    Gpu,
    Wifi,
    Bluetooth,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PeripheralDesc {
    pub id: DevId,
    pub name: String,
    pub kind: PeripheralKind,
    pub mmio: PhysRange,
    pub dma_capable: bool,
    /// Driver is a loadable module not shared with other devices.
    pub independent: bool,
    pub always_busy_in_ros: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub address_space_bytes: u64,
    /// RAM occupies `[0, ram_bytes)`.
    pub ram_bytes: u64,
    pub io_window: PhysRange,
    /// Carve-outs inside RAM that no normal-world context may map
    /// (secure-world memory, the monitor's page-table pool).
    #[serde(default)]
    pub reserved: Vec<PhysRange>,
    pub cores: Vec<CoreDesc>,
    pub peripherals: Vec<PeripheralDesc>,
    pub cache_line_bytes: u64,
    pub tlb_capacity: usize,
    /// `None` means an unbounded cache.
    #[serde(default)]
    pub cache_capacity: Option<usize>,
}

impl Default for MachineConfig {
    /// Eight cores (four little, four big), 4 GB of address space with the
    /// top 512 MB used as the IO window.
    fn default() -> Self {
        let io_base = 3 * GIB + 512 * MIB;
        let cores = (0..8)
            .map(|i| CoreDesc {
                id: CoreId(i),
                class: if i < 4 {
                    CoreClass::Little
                } else {
                    CoreClass::Big
                },
            })
            .collect();
        let peripherals = vec![
            PeripheralDesc {
                id: DevId(0),
                name: "gpu".into(),
                kind: PeripheralKind::Gpu,
                mmio: PhysRange::with_len(io_base, 64 * 1024),
                dma_capable: true,
                independent: true,
                always_busy_in_ros: true,
            },
            PeripheralDesc {
                id: DevId(1),
                name: "wifi".into(),
                kind: PeripheralKind::Wifi,
                mmio: PhysRange::with_len(io_base + MIB, 16 * 1024),
                dma_capable: true,
                independent: true,
                always_busy_in_ros: false,
            },
            PeripheralDesc {
                id: DevId(2),
                name: "bluetooth".into(),
                kind: PeripheralKind::Bluetooth,
                mmio: PhysRange::with_len(io_base + 2 * MIB, 4 * 1024),
                dma_capable: false,
                independent: true,
                always_busy_in_ros: false,
            },
            PeripheralDesc {
                id: DevId(3),
                name: "usb".into(),
                kind: PeripheralKind::Other,
                mmio: PhysRange::with_len(io_base + 3 * MIB, 64 * 1024),
                dma_capable: true,
                independent: false,
                always_busy_in_ros: false,
            },
        ];
        MachineConfig {
            address_space_bytes: 4 * GIB,
            ram_bytes: io_base,
            io_window: PhysRange::new(io_base, 4 * GIB),
            reserved: vec![
                // monitor page-table pool, then the secure-world carve-out
                PhysRange::with_len(io_base - 32 * MIB, 16 * MIB),
                PhysRange::with_len(io_base - 16 * MIB, 16 * MIB),
            ],
            cores,
            peripherals,
            cache_line_bytes: 64,
            tlb_capacity: 512,
            cache_capacity: None,
        }
    }
}

impl MachineConfig {
    /// Three cores, sixteen 2 MB RAM frames and one DMA-capable peripheral:
    /// small enough for exhaustive exploration.
    pub fn small() -> Self {
        MachineConfig {
            address_space_bytes: 64 * MIB,
            ram_bytes: 32 * MIB,
            io_window: PhysRange::new(48 * MIB, 64 * MIB),
            reserved: Vec::new(),
            cores: vec![
                CoreDesc {
                    id: CoreId(0),
                    class: CoreClass::Little,
                },
                CoreDesc {
                    id: CoreId(1),
                    class: CoreClass::Big,
                },
                CoreDesc {
                    id: CoreId(2),
                    class: CoreClass::Big,
                },
            ],
            peripherals: vec![PeripheralDesc {
                id: DevId(0),
                name: "wifi".into(),
                kind: PeripheralKind::Wifi,
                mmio: PhysRange::with_len(48 * MIB, PAGE_4K),
                dma_capable: true,
                independent: true,
                always_busy_in_ros: false,
            }],
            cache_line_bytes: 64,
            tlb_capacity: 8,
            cache_capacity: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.cores.len() < 2 {
            return bad(format!(
                "at least 2 cores required, got {}",
                self.cores.len()
            ));
        }
        for (i, c) in self.cores.iter().enumerate() {
            if c.id.0 as usize != i {
                return bad(format!(
                    "core ids must be dense from 0; found {} at {i}",
                    c.id
                ));
            }
        }
        if self.ram_bytes == 0 || !self.ram_bytes.is_multiple_of(BLOCK_2M) {
            return bad("ram size must be a non-zero multiple of 2 MB".into());
        }
        let io = self.io_window;
        if io.is_empty() || io.end > self.address_space_bytes || !io.is_aligned(PAGE_4K) {
            return bad(format!("io window {io} outside the address space"));
        }
        if io.start < self.ram_bytes {
            return bad(format!("io window {io} overlaps RAM"));
        }
        for r in &self.reserved {
            if !r.is_aligned(BLOCK_2M) || r.end > self.ram_bytes || r.is_empty() {
                return bad(format!(
                    "reserved region {r} must be 2 MB aligned inside RAM"
                ));
            }
        }
        if !self.cache_line_bytes.is_power_of_two() || self.cache_line_bytes < 16 {
            return bad("cache line size must be a power of two >= 16".into());
        }
        if self.tlb_capacity == 0 {
            return bad("tlb capacity must be positive".into());
        }
        for (i, p) in self.peripherals.iter().enumerate() {
            if p.mmio.is_empty() || !p.mmio.is_aligned(PAGE_4K) {
                return bad(format!(
                    "{} mmio range {} is not 4 KB aligned",
                    p.name, p.mmio
                ));
            }
            if !io.contains_range(&p.mmio) {
                return bad(format!(
                    "{} mmio range {} outside io window",
                    p.name, p.mmio
                ));
            }
            for q in &self.peripherals[..i] {
                if q.id == p.id {
                    return bad(format!("duplicate device id {}", p.id));
                }
                if q.mmio.overlaps(&p.mmio) {
                    return bad(format!("{} and {} share MMIO pages", q.name, p.name));
                }
            }
        }
        Ok(())
    }

    pub fn ram_range(&self) -> PhysRange {
        PhysRange::new(0, self.ram_bytes)
    }

    /// RAM ranges usable by normal-world contexts (RAM minus reserved holes).
    pub fn usable_ram(&self) -> Vec<PhysRange> {
        let mut holes = self.reserved.clone();
        holes.sort();
        let mut out = Vec::new();
        let mut cursor = 0;
        for h in holes {
            if h.start > cursor {
                out.push(PhysRange::new(cursor, h.start));
            }
            cursor = cursor.max(h.end);
        }
        if cursor < self.ram_bytes {
            out.push(PhysRange::new(cursor, self.ram_bytes));
        }
        out
    }

    pub fn peripheral(&self, dev: DevId) -> Option<&PeripheralDesc> {
        self.peripherals.iter().find(|p| p.id == dev)
    }
}

/// Classification of a physical address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddrClass {
    Ram,
    Mmio(DevId),
    Hole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoreState {
    RunningRos,
    RunningSandbox(SandboxId),
    BusyWait,
    Off,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Core {
    pub id: CoreId,
    pub class: CoreClass,
    pub state: CoreState,
    /// The VTTBR analogue: which context's stage-2 tables this core walks.
    pub active_tables: Option<ContextId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TlbEntry {
    pub core: CoreId,
    pub context: ContextId,
    pub ipa_block: u64,
    pub pa_block: u64,
    pub granularity: Granularity,
}

impl TlbEntry {
    pub fn covers(&self, ipa: u64) -> bool {
        let size = self.granularity.bytes();
        self.ipa_block <= ipa && ipa < self.ipa_block + size
    }

    pub fn pa_range(&self) -> PhysRange {
        PhysRange::with_len(self.pa_block, self.granularity.bytes())
    }
}

/// FIFO-evicting per-core TLB.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tlb {
    capacity: usize,
    entries: VecDeque<TlbEntry>,
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn lookup(&self, context: ContextId, ipa: u64) -> Option<&TlbEntry> {
        self.entries
            .iter()
            .find(|e| e.context == context && e.covers(ipa))
    }

    pub fn insert(&mut self, entry: TlbEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn entries(&self) -> impl Iterator<Item = &TlbEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn retain(&mut self, mut keep: impl FnMut(&TlbEntry) -> bool) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| keep(e));
        before - self.entries.len()
    }
}

/// A valid L2 line. Invalid lines are simply absent from the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheLine {
    pub pa_line: u64,
    pub fill_owner: ContextId,
}

/// Physically indexed, owner-tagged L2 model.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Cache {
    line_bytes: u64,
    capacity: Option<usize>,
    lines: BTreeMap<u64, ContextId>,
    fifo: VecDeque<u64>,
}

impl Cache {
    pub fn new(line_bytes: u64, capacity: Option<usize>) -> Self {
        Self {
            line_bytes,
            capacity,
            lines: BTreeMap::new(),
            fifo: VecDeque::new(),
        }
    }

    pub fn line_bytes(&self) -> u64 {
        self.line_bytes
    }

    pub fn line_of(&self, pa: u64) -> u64 {
        align_down(pa, self.line_bytes)
    }

    pub fn fill(&mut self, owner: ContextId, pa: u64) {
        let line = self.line_of(pa);
        let fresh = self.lines.insert(line, owner).is_none();
        if let Some(cap) = self.capacity {
            if fresh {
                self.fifo.push_back(line);
                while self.lines.len() > cap {
                    if let Some(victim) = self.fifo.pop_front() {
                        self.lines.remove(&victim);
                    }
                }
            }
        }
    }

    /// Raw presence lookup; the owner of the valid line covering `pa`.
    pub fn probe(&self, pa: u64) -> Option<ContextId> {
        self.lines.get(&self.line_of(pa)).copied()
    }

    pub fn lines(&self) -> impl Iterator<Item = CacheLine> + '_ {
        self.lines.iter().map(|(&pa_line, &fill_owner)| CacheLine {
            pa_line,
            fill_owner,
        })
    }

    pub fn lines_in(&self, range: PhysRange) -> impl Iterator<Item = CacheLine> + '_ {
        self.lines
            .range(range.start..range.end)
            .map(|(&pa_line, &fill_owner)| CacheLine {
                pa_line,
                fill_owner,
            })
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Invalidates lines in `range` whose owner fails `keep`.
    pub fn invalidate_in(
        &mut self,
        range: PhysRange,
        mut keep: impl FnMut(ContextId) -> bool,
    ) -> usize {
        let victims: Vec<u64> = self
            .lines
            .range(range.start..range.end)
            .filter(|(_, &o)| !keep(o))
            .map(|(&l, _)| l)
            .collect();
        self.remove_all(&victims)
    }

    pub fn invalidate_owner(&mut self, owner: ContextId) -> usize {
        let victims: Vec<u64> = self
            .lines
            .iter()
            .filter(|(_, &o)| o == owner)
            .map(|(&l, _)| l)
            .collect();
        self.remove_all(&victims)
    }

    fn remove_all(&mut self, victims: &[u64]) -> usize {
        for v in victims {
            self.lines.remove(v);
        }
        if self.capacity.is_some() && !victims.is_empty() {
            self.fifo.retain(|l| self.lines.contains_key(l));
        }
        victims.len()
    }
}

/// The whole platform: cores, TLBs, cache and every context's stage-2 tables.
#[derive(Debug, Clone)]
pub struct Machine {
    pub config: MachineConfig,
    pub cores: Vec<Core>,
    pub tlbs: Vec<Tlb>,
    pub cache: Cache,
    pub tables: BTreeMap<ContextId, Stage2TableSet>,
    generation: u64,
    cache_generation: u64,
}

impl Machine {
    /// Every core runs the rich OS, which maps all usable RAM and every
    /// peripheral's MMIO pages.
    pub fn new(config: MachineConfig) -> Result<Self> {
        config.validate()?;
        let cores = config
            .cores
            .iter()
            .map(|d| Core {
                id: d.id,
                class: d.class,
                state: CoreState::RunningRos,
                active_tables: Some(ContextId::Ros),
            })
            .collect();
        let tlbs = config
            .cores
            .iter()
            .map(|_| Tlb::new(config.tlb_capacity))
            .collect();
        let mut ros = Stage2TableSet::new(ContextId::Ros);
        for r in config.usable_ram() {
            ros.map(r, crate::stage2::Attr::Normal)?;
        }
        for p in &config.peripherals {
            ros.map(p.mmio, crate::stage2::Attr::Device)?;
        }
        let mut tables = BTreeMap::new();
        tables.insert(ContextId::Ros, ros);
        Ok(Machine {
            cache: Cache::new(config.cache_line_bytes, config.cache_capacity),
            config,
            cores,
            tlbs,
            tables,
            generation: 0,
            cache_generation: 0,
        })
    }

    /// Bumped on every state mutation; lets callers skip re-checking
    /// invariants over unchanged state.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Bumped only by cache and TLB changes.
    pub fn cache_generation(&self) -> u64 {
        self.cache_generation
    }

    pub(crate) fn touch(&mut self) {
        self.generation += 1;
    }

    fn touch_cache(&mut self) {
        self.cache_generation += 1;
    }

    pub fn classify(&self, pa: u64) -> AddrClass {
        if pa < self.config.ram_bytes {
            if self.config.reserved.iter().any(|r| r.contains(pa)) {
                AddrClass::Hole
            } else {
                AddrClass::Ram
            }
        } else if let Some(p) = self.config.peripherals.iter().find(|p| p.mmio.contains(pa)) {
            AddrClass::Mmio(p.id)
        } else {
            AddrClass::Hole
        }
    }

    pub fn core(&self, id: CoreId) -> Result<&Core> {
        self.cores.get(id.0 as usize).ok_or(Error::UnknownCore(id))
    }

    pub fn core_mut(&mut self, id: CoreId) -> Result<&mut Core> {
        self.touch();
        self.cores
            .get_mut(id.0 as usize)
            .ok_or(Error::UnknownCore(id))
    }

    pub fn tables(&self, ctx: ContextId) -> Option<&Stage2TableSet> {
        self.tables.get(&ctx)
    }

    pub fn tables_mut(&mut self, ctx: ContextId) -> Option<&mut Stage2TableSet> {
        self.touch();
        self.tables.get_mut(&ctx)
    }

    pub(crate) fn install_tables(&mut self, set: Stage2TableSet) {
        self.touch();
        self.tables.insert(set.context, set);
    }

    pub(crate) fn remove_tables(&mut self, ctx: ContextId) -> Option<Stage2TableSet> {
        self.touch();
        self.tables.remove(&ctx)
    }

    pub fn cache_fill(&mut self, ctx: ContextId, pa: u64) {
        self.touch_cache();
        self.cache.fill(ctx, pa);
    }

    pub fn cache_probe(&self, pa: u64) -> Option<ContextId> {
        self.cache.probe(pa)
    }

    pub(crate) fn tlb_insert(&mut self, core: CoreId, entry: TlbEntry) {
        self.touch_cache();
        self.tlbs[core.0 as usize].insert(entry);
    }

    /// Drops every TLB entry, on any core, whose PA block intersects a
    /// 2 MB aligned range.
    pub fn tlb_flush_range(&mut self, range: PhysRange) -> Result<usize> {
        if !range.is_aligned(BLOCK_2M) {
            return Err(Error::Alignment {
                range,
                granule: BLOCK_2M,
            });
        }
        Ok(self.tlb_flush_where(|e| e.pa_range().overlaps(&range)))
    }

    /// Page-granular variant used for MMIO pages.
    pub fn tlb_flush_pages(&mut self, range: PhysRange) -> Result<usize> {
        if !range.is_aligned(PAGE_4K) {
            return Err(Error::Alignment {
                range,
                granule: PAGE_4K,
            });
        }
        Ok(self.tlb_flush_where(|e| e.pa_range().overlaps(&range)))
    }

    /// Drops every entry tagged with `ctx` (VMID-wide invalidation).
    pub fn tlb_flush_context(&mut self, ctx: ContextId) -> usize {
        self.tlb_flush_where(|e| e.context == ctx)
    }

    fn tlb_flush_where(&mut self, mut hit: impl FnMut(&TlbEntry) -> bool) -> usize {
        self.touch_cache();
        self.tlbs.iter_mut().map(|t| t.retain(|e| !hit(e))).sum()
    }

    pub fn tlb_entries(&self) -> impl Iterator<Item = &TlbEntry> {
        self.tlbs.iter().flat_map(|t| t.entries())
    }

    pub fn invalidate_cache_in(
        &mut self,
        range: PhysRange,
        keep: impl FnMut(ContextId) -> bool,
    ) -> usize {
        self.touch_cache();
        self.cache.invalidate_in(range, keep)
    }

    pub fn invalidate_cache_owner(&mut self, owner: ContextId) -> usize {
        self.touch_cache();
        self.cache.invalidate_owner(owner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage2::{Attr, Translation};

    #[test]
    fn default_machine_boots_all_cores_in_ros() {
        let m = Machine::new(MachineConfig::default()).unwrap();
        assert_eq!(m.cores.len(), 8);
        assert_eq!(
            m.cores.iter().filter(|c| c.class == CoreClass::Big).count(),
            4
        );
        assert!(m
            .cores
            .iter()
            .all(|c| c.state == CoreState::RunningRos && c.active_tables == Some(ContextId::Ros)));
        assert!(m.tlb_entries().next().is_none());
        assert!(m.cache.is_empty());
        assert_eq!(m.tables.len(), 1);
    }

    #[test]
    fn one_core_is_rejected() {
        let mut cfg = MachineConfig::default();
        cfg.cores.truncate(1);
        assert!(matches!(Machine::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn shared_mmio_page_is_rejected() {
        let mut cfg = MachineConfig::default();
        cfg.peripherals[1].mmio = PhysRange::with_len(cfg.peripherals[0].mmio.start, PAGE_4K);
        assert!(matches!(Machine::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn misaligned_mmio_is_rejected() {
        let mut cfg = MachineConfig::default();
        cfg.peripherals[2].mmio.start += 0x10;
        assert!(matches!(Machine::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn io_window_overlapping_ram_is_rejected() {
        let cfg = MachineConfig {
            ram_bytes: 4 * GIB - 2 * MIB,
            ..MachineConfig::default()
        };
        assert!(matches!(Machine::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn classification_is_total() {
        let m = Machine::new(MachineConfig::default()).unwrap();
        assert_eq!(m.classify(0x1000), AddrClass::Ram);
        let gpu = m.config.peripherals[0].mmio.start;
        assert_eq!(m.classify(gpu + 0x100), AddrClass::Mmio(DevId(0)));
        assert_eq!(m.classify(m.config.reserved[1].start), AddrClass::Hole);
        assert_eq!(m.classify(4 * GIB - PAGE_4K), AddrClass::Hole);
    }

    #[test]
    fn fill_then_probe_hits_and_rounds_to_line() {
        let mut m = Machine::new(MachineConfig::default()).unwrap();
        m.cache_fill(ContextId::Ros, 0x1000);
        assert_eq!(m.cache_probe(0x1000), Some(ContextId::Ros));
        m.cache_fill(ContextId::Ros, 0x2013);
        assert_eq!(m.cache_probe(0x2000), Some(ContextId::Ros));
        assert_eq!(m.cache.lines().count(), 2);
    }

    #[test]
    fn bounded_cache_evicts_fifo() {
        let mut c = Cache::new(64, Some(2));
        c.fill(ContextId::Ros, 0);
        c.fill(ContextId::Ros, 64);
        c.fill(ContextId::Ros, 128);
        assert_eq!(c.probe(0), None);
        assert_eq!(c.probe(64), Some(ContextId::Ros));
        assert_eq!(c.probe(128), Some(ContextId::Ros));
    }

    #[test]
    fn tlb_is_fifo_bounded() {
        let mut t = Tlb::new(2);
        for i in 0..3 {
            t.insert(TlbEntry {
                core: CoreId(0),
                context: ContextId::Ros,
                ipa_block: i * BLOCK_2M,
                pa_block: i * BLOCK_2M,
                granularity: Granularity::Block2M,
            });
        }
        assert_eq!(t.len(), 2);
        assert!(t.lookup(ContextId::Ros, 0).is_none());
        assert!(t.lookup(ContextId::Ros, 2 * BLOCK_2M + 5).is_some());
    }

    fn entry(core: u32, block: u64) -> TlbEntry {
        TlbEntry {
            core: CoreId(core),
            context: ContextId::Ros,
            ipa_block: block,
            pa_block: block,
            granularity: Granularity::Block2M,
        }
    }

    #[test]
    fn flush_counts_matching_entries_across_cores() {
        let mut m = Machine::new(MachineConfig::default()).unwrap();
        let base = 256 * MIB;
        m.tlb_insert(CoreId(1), entry(1, base));
        m.tlb_insert(CoreId(1), entry(1, base + BLOCK_2M));
        m.tlb_insert(CoreId(3), entry(3, base + 4 * BLOCK_2M));
        m.tlb_insert(CoreId(3), entry(3, 0));
        let range = PhysRange::with_len(base, 8 * BLOCK_2M);
        // oracle: linear scan over every TLB
        let expected = m
            .tlb_entries()
            .filter(|e| e.pa_range().overlaps(&range))
            .count();
        assert_eq!(expected, 3);
        assert_eq!(m.tlb_flush_range(range).unwrap(), 3);
        assert_eq!(m.tlb_entries().count(), 1);
        assert_eq!(m.tlb_flush_range(range).unwrap(), 0);
    }

    #[test]
    fn flush_rejects_misaligned_range() {
        let mut m = Machine::new(MachineConfig::default()).unwrap();
        assert!(matches!(
            m.tlb_flush_range(PhysRange::with_len(0x1000, BLOCK_2M)),
            Err(Error::Alignment { .. })
        ));
    }

    #[test]
    fn flush_after_one_translate_removes_one() {
        let mut m = Machine::new(MachineConfig::default()).unwrap();
        let pa = 0x1000_0000;
        assert_eq!(m.s2_translate(CoreId(2), pa), Translation::Hit(pa));
        assert_eq!(m.tlb_entries().count(), 1);
        let r = PhysRange::with_len(align_down(pa, BLOCK_2M), BLOCK_2M);
        assert_eq!(m.tlb_flush_range(r).unwrap(), 1);
    }

    #[test]
    fn ros_maps_ram_as_normal_and_mmio_as_device() {
        let m = Machine::new(MachineConfig::default()).unwrap();
        let ros = m.tables(ContextId::Ros).unwrap();
        let gpu = m.config.peripherals[0].mmio.start;
        assert_eq!(ros.lookup(gpu).map(|e| e.attr), Some(Attr::Device));
        assert_eq!(ros.lookup(0x20_0000).map(|e| e.attr), Some(Attr::Normal));
        assert!(ros.lookup(m.config.reserved[0].start).is_none());
    }
}
