//! The rich-OS side of the system: contiguous sandbox memory, the shared
//! channel pool, sandbox creation, driver handshakes and data transfer.

use std::collections::{BTreeMap, VecDeque};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{Actor, CostKey, Direction, SimTime};
use crate::error::{Error, Result};
use crate::hw::{CoreClass, Machine, PeripheralKind};
use crate::monitor::{CoreOwner, LaunchSpec};
use crate::sos::{Quota, SandboxState};
use crate::types::{ContextId, CoreId, DevId, PhysRange, SandboxId, BLOCK_2M, GIB, MIB};
use crate::world::{Action, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RosConfig {
    /// Weakly reserved ranges sandbox memory is carved from.
    pub cma_extents: Vec<PhysRange>,
    pub shared_pool: PhysRange,
    pub channel_bytes: u64,
    /// Step size of sandbox-initiated memory adjustment.
    pub adjust_granularity: u64,
    pub device_wait_timeout_ms: f64,
    pub optimized_core_transfer: bool,
}

impl Default for RosConfig {
    fn default() -> Self {
        RosConfig {
            cma_extents: vec![
                PhysRange::with_len(GIB, 512 * MIB),
                PhysRange::with_len(2 * GIB, 512 * MIB),
            ],
            shared_pool: PhysRange::with_len(2 * GIB + 512 * MIB, 32 * MIB),
            channel_bytes: 4 * MIB,
            adjust_granularity: 16 * MIB,
            device_wait_timeout_ms: 10_000.0,
            optimized_core_transfer: true,
        }
    }
}

impl RosConfig {
    pub fn small() -> Self {
        RosConfig {
            cma_extents: vec![PhysRange::new(8 * MIB, 28 * MIB)],
            shared_pool: PhysRange::new(28 * MIB, 32 * MIB),
            channel_bytes: 2 * MIB,
            adjust_granularity: 2 * MIB,
            device_wait_timeout_ms: 10_000.0,
            optimized_core_transfer: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DriverState {
    Loaded,
    Unloaded,
    SuspendedGpu,
}

/// First-fit allocator over the reserved extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CmaPool {
    extents: Vec<PhysRange>,
    allocations: BTreeMap<u64, (PhysRange, SandboxId)>,
}

impl CmaPool {
    pub fn new(mut extents: Vec<PhysRange>) -> Self {
        extents.sort();
        CmaPool {
            extents,
            allocations: BTreeMap::new(),
        }
    }

    pub fn extents(&self) -> &[PhysRange] {
        &self.extents
    }

    pub fn allocations(&self) -> impl Iterator<Item = (PhysRange, SandboxId)> + '_ {
        self.allocations.values().copied()
    }

    pub fn is_free(&self, r: PhysRange) -> bool {
        self.extents.iter().any(|e| e.contains_range(&r))
            && !self.allocations.values().any(|(a, _)| a.overlaps(&r))
    }

    /// Lowest free range of `bytes`; with `adjacent_to`, only the ranges
    /// directly below or above it are candidates.
    pub fn alloc(
        &mut self,
        bytes: u64,
        adjacent_to: Option<PhysRange>,
        owner: SandboxId,
    ) -> Result<PhysRange> {
        if bytes == 0 || !bytes.is_multiple_of(BLOCK_2M) {
            return Err(Error::Alignment {
                range: PhysRange::with_len(0, bytes),
                granule: BLOCK_2M,
            });
        }
        let found = match adjacent_to {
            Some(adj) => {
                let below = adj
                    .start
                    .checked_sub(bytes)
                    .map(|s| PhysRange::new(s, adj.start));
                let above = PhysRange::with_len(adj.end, bytes);
                let hit = below
                    .into_iter()
                    .chain(std::iter::once(above))
                    .find(|c| self.is_free(*c));
                hit.ok_or(Error::NoAdjacentSpace(adj))?
            }
            None => self.first_fit(bytes).ok_or(Error::OutOfMemory(bytes))?,
        };
        self.allocations.insert(found.start, (found, owner));
        Ok(found)
    }

    fn first_fit(&self, bytes: u64) -> Option<PhysRange> {
        for e in &self.extents {
            let mut cursor = e.start;
            for (a, _) in self.allocations.values() {
                if a.end <= e.start || a.start >= e.end {
                    continue;
                }
                if a.start >= cursor + bytes {
                    return Some(PhysRange::with_len(cursor, bytes));
                }
                cursor = cursor.max(a.end);
            }
            if cursor + bytes <= e.end {
                return Some(PhysRange::with_len(cursor, bytes));
            }
        }
        None
    }

    /// Releases `range`, splitting allocations that only partly overlap it.
    pub fn free(&mut self, range: PhysRange) {
        let hit: Vec<u64> = self
            .allocations
            .values()
            .filter(|(a, _)| a.overlaps(&range))
            .map(|(a, _)| a.start)
            .collect();
        for start in hit {
            let (a, owner) = self.allocations.remove(&start).expect("listed above");
            if a.start < range.start {
                let left = PhysRange::new(a.start, range.start);
                self.allocations.insert(left.start, (left, owner));
            }
            if range.end < a.end {
                let right = PhysRange::new(range.end, a.end);
                self.allocations.insert(right.start, (right, owner));
            }
        }
    }

    pub fn release_owner(&mut self, owner: SandboxId) {
        self.allocations.retain(|_, (_, o)| *o != owner);
    }
}

/// Fixed-slot pool of shared channels. A channel never moves or resizes
/// while its sandbox lives.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SharedPool {
    base: PhysRange,
    slot: u64,
    channels: BTreeMap<SandboxId, PhysRange>,
}

impl SharedPool {
    pub fn new(base: PhysRange, slot: u64) -> Self {
        SharedPool {
            base,
            slot,
            channels: BTreeMap::new(),
        }
    }

    pub fn base(&self) -> PhysRange {
        self.base
    }

    pub fn channel(&self, sid: SandboxId) -> Option<PhysRange> {
        self.channels.get(&sid).copied()
    }

    pub fn channels(&self) -> impl Iterator<Item = (SandboxId, PhysRange)> + '_ {
        self.channels.iter().map(|(&s, &r)| (s, r))
    }

    pub fn alloc(&mut self, sid: SandboxId) -> Result<PhysRange> {
        if self.channels.contains_key(&sid) {
            return Err(Error::BadState(format!("{sid} already has a channel")));
        }
        let slot = (0..self.base.len() / self.slot)
            .map(|i| PhysRange::with_len(self.base.start + i * self.slot, self.slot))
            .find(|c| !self.channels.values().any(|u| u.overlaps(c)))
            .ok_or(Error::OutOfMemory(self.slot))?;
        self.channels.insert(sid, slot);
        Ok(slot)
    }

    pub fn free(&mut self, sid: SandboxId) -> Option<PhysRange> {
        self.channels.remove(&sid)
    }
}

/// A sandbox waiting for a device; the deadline is wall-clock only and does
/// not take part in state digests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Waiter {
    pub sandbox: SandboxId,
    pub deadline: SimTime,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub frames: u64,
    pub skipped: u64,
    pub faults: u64,
}

#[derive(Debug, Clone)]
pub struct Ros {
    pub cma: CmaPool,
    pub shared: SharedPool,
    drivers: BTreeMap<(ContextId, DevId), DriverState>,
    /// Devices the rich OS is actively using, until the given time.
    pub in_use: BTreeMap<DevId, SimTime>,
    pub waiters: BTreeMap<DevId, VecDeque<Waiter>>,
    pub gpu_suspended_at: Option<SimTime>,
    /// Rendering stays paused until this time after a resume.
    pub gpu_resume_at: SimTime,
    pub render: RenderStats,
}

impl Ros {
    pub fn new(cfg: &RosConfig, machine: &Machine) -> Result<Self> {
        let usable = machine.config.usable_ram();
        let inside = |r: &PhysRange| usable.iter().any(|u| u.contains_range(r));
        for e in cfg
            .cma_extents
            .iter()
            .chain(std::iter::once(&cfg.shared_pool))
        {
            if e.is_empty() || !e.is_aligned(BLOCK_2M) || !inside(e) {
                return Err(Error::Config(format!(
                    "pool range {e} must be 2 MB aligned usable RAM"
                )));
            }
        }
        for (i, a) in cfg.cma_extents.iter().enumerate() {
            if a.overlaps(&cfg.shared_pool) || cfg.cma_extents[..i].iter().any(|b| b.overlaps(a)) {
                return Err(Error::Config(format!(
                    "pool range {a} overlaps another pool"
                )));
            }
        }
        if cfg.channel_bytes == 0
            || !cfg.channel_bytes.is_multiple_of(BLOCK_2M)
            || cfg.channel_bytes > cfg.shared_pool.len()
        {
            return Err(Error::Config(
                "channel size must be a 2 MB multiple within the shared pool".into(),
            ));
        }
        if cfg.adjust_granularity == 0 || !cfg.adjust_granularity.is_multiple_of(BLOCK_2M) {
            return Err(Error::Config(
                "adjust granularity must be a 2 MB multiple".into(),
            ));
        }
        let drivers = machine
            .config
            .peripherals
            .iter()
            .map(|p| ((ContextId::Ros, p.id), DriverState::Loaded))
            .collect();
        Ok(Ros {
            cma: CmaPool::new(cfg.cma_extents.clone()),
            shared: SharedPool::new(cfg.shared_pool, cfg.channel_bytes),
            drivers,
            in_use: BTreeMap::new(),
            waiters: BTreeMap::new(),
            gpu_suspended_at: None,
            gpu_resume_at: SimTime::ZERO,
            render: RenderStats::default(),
        })
    }

    pub fn driver_state(&self, ctx: ContextId, dev: DevId) -> DriverState {
        self.drivers
            .get(&(ctx, dev))
            .copied()
            .unwrap_or(DriverState::Unloaded)
    }

    pub(crate) fn set_driver_state(&mut self, ctx: ContextId, dev: DevId, s: DriverState) {
        if ctx != ContextId::Ros && s == DriverState::Unloaded {
            self.drivers.remove(&(ctx, dev));
        } else {
            self.drivers.insert((ctx, dev), s);
        }
    }

    pub(crate) fn hash_state<H: Hasher>(&self, h: &mut H) {
        self.cma.hash(h);
        self.shared.hash(h);
        self.drivers.hash(h);
        for (dev, q) in &self.waiters {
            dev.hash(h);
            for w in q {
                w.sandbox.hash(h);
            }
        }
    }
}

/// How the rich OS sets up a new sandbox.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateOptions {
    pub max_cores: usize,
    /// `None` uses the monitor's default ceiling.
    pub max_memory: Option<u64>,
    /// Preferred class of the boot core.
    pub core_class: Option<CoreClass>,
    /// Initial memory; `None` uses the monitor's base size.
    pub memory_bytes: Option<u64>,
}

impl Default for CreateOptions {
    fn default() -> Self {
        CreateOptions {
            max_cores: 1,
            max_memory: None,
            core_class: Some(CoreClass::Big),
            memory_bytes: None,
        }
    }
}

impl World {
    /// A core the rich OS can give away, preferring `class`.
    pub fn free_core(&self, class: Option<CoreClass>) -> Option<CoreId> {
        let free: Vec<_> = self
            .machine
            .cores
            .iter()
            .filter(|c| c.id != CoreId(0))
            .filter(|c| {
                self.monitor.ledger.core_owner.get(&c.id)
                    == Some(&CoreOwner::Context(ContextId::Ros))
            })
            .collect();
        class
            .and_then(|cl| free.iter().find(|c| c.class == cl))
            .or_else(|| free.first())
            .map(|c| c.id)
    }

    /// Allocates memory and a channel, stages the image and asks the
    /// monitor to launch. Allocations are rolled back on failure.
    pub fn create_sandbox(&mut self, app_id: &str, opts: &CreateOptions) -> Result<SandboxId> {
        let image = self
            .images
            .get(app_id)
            .cloned()
            .ok_or_else(|| Error::UnknownApp(app_id.to_string()))?;
        let running = self.monitor.records.len();
        let limit = self.launch_limit();
        if running + 1 > limit {
            self.record(
                Actor::Ros,
                "create_sandbox",
                json!({"app": app_id}),
                "too_many_sandboxes",
            );
            return Err(Error::TooManySandboxes { running, limit });
        }
        let core = self
            .free_core(opts.core_class)
            .ok_or_else(|| Error::ResourceBusy("no free core".into()))?;
        let bytes = opts.memory_bytes.unwrap_or(self.monitor.config.base_bytes);
        let quota = Quota {
            max_cores: opts.max_cores,
            max_memory: opts
                .max_memory
                .unwrap_or(self.monitor.config.mem_limit)
                .max(bytes),
        };
        let id = self.monitor.peek_next_id();
        let memory = self.ros.cma.alloc(bytes, None, id)?;
        let channel = match self.ros.shared.alloc(id) {
            Ok(c) => c,
            Err(e) => {
                self.ros.cma.free(memory);
                return Err(e);
            }
        };
        self.record(
            Actor::Ros,
            "create_sandbox",
            json!({"app": app_id, "core": core.0, "memory": memory.to_string(), "channel": channel.to_string()}),
            "staged",
        );
        let spec = LaunchSpec {
            app_id: app_id.to_string(),
            image,
            core,
            memory,
            channel,
            quota,
        };
        match self.lock_and_launch(spec) {
            Ok(sid) => {
                self.start_ticking(sid);
                Ok(sid)
            }
            Err(e) => {
                self.ros.cma.free(memory);
                self.ros.shared.free(id);
                self.record(
                    Actor::Ros,
                    "create_sandbox",
                    json!({"app": app_id, "error": e.to_string()}),
                    "rolled_back",
                );
                Err(e)
            }
        }
    }

    /// Copies data through the sandbox's shared channel and raises an IPI.
    /// Returns the completion time.
    pub fn send_data(&mut self, sid: SandboxId, bytes: u64, dir: Direction) -> Result<SimTime> {
        let state = self.sandboxes.get(&sid).map(|r| r.state);
        if state != Some(SandboxState::Running) {
            return Err(Error::BadState(format!("{sid} is not running")));
        }
        let actor = match dir {
            Direction::RosToSandbox => Actor::Ros,
            Direction::SandboxToRos => Actor::Sandbox(sid),
        };
        let copy = if bytes > 0 {
            self.charge(actor, CostKey::Copy(bytes))
        } else {
            SimTime::ZERO
        };
        let ipi = self.charge(actor, CostKey::Ipi(dir));
        let done = self.now() + copy + ipi;
        self.record(
            actor,
            "send_data",
            json!({"sandbox": sid.0, "bytes": bytes, "done_us": done.as_us_f64()}),
            "ok",
        );
        Ok(done)
    }

    /// Unloads the rich OS driver (or suspends the GPU) so the device can
    /// be switched.
    pub fn prepare_peripheral(&mut self, dev: DevId) -> Result<()> {
        let desc = self
            .machine
            .config
            .peripheral(dev)
            .ok_or(Error::UnknownDevice(dev))?
            .clone();
        if self.monitor.ledger.dev_owner.get(&dev) != Some(&ContextId::Ros) {
            return Err(Error::DeviceBusy(dev));
        }
        let gpu = desc.kind == PeripheralKind::Gpu;
        if !gpu && !desc.independent {
            self.record(
                Actor::Ros,
                "prepare_peripheral",
                json!({"dev": dev.0}),
                "unsupported",
            );
            return Err(Error::UnsupportedDevice(dev));
        }
        let now = self.now();
        if !gpu && self.ros.in_use.get(&dev).is_some_and(|&t| t > now) {
            return Err(Error::DeviceBusy(dev));
        }
        if self.ros.driver_state(ContextId::Ros, dev) != DriverState::Loaded {
            return Err(Error::DeviceBusy(dev));
        }
        if gpu {
            self.ros
                .set_driver_state(ContextId::Ros, dev, DriverState::SuspendedGpu);
            self.ros.gpu_suspended_at = Some(now);
            self.record(
                Actor::Ros,
                "prepare_peripheral",
                json!({"dev": dev.0}),
                "gpu_suspended",
            );
        } else {
            self.ros
                .set_driver_state(ContextId::Ros, dev, DriverState::Unloaded);
            self.record(
                Actor::Ros,
                "prepare_peripheral",
                json!({"dev": dev.0}),
                "driver_unloaded",
            );
        }
        Ok(())
    }

    /// Reloads the driver once the device is back in the rich OS.
    pub fn reclaim_peripheral(&mut self, dev: DevId) -> Result<()> {
        let now = self.now();
        self.reclaim_peripheral_at(dev, now)
    }

    /// As [`World::reclaim_peripheral`], with the device usable again only
    /// from `at` (the end of the switch-back latency).
    pub fn reclaim_peripheral_at(&mut self, dev: DevId, at: SimTime) -> Result<()> {
        if self.machine.config.peripheral(dev).is_none() {
            return Err(Error::UnknownDevice(dev));
        }
        if self.monitor.ledger.dev_owner.get(&dev) != Some(&ContextId::Ros) {
            return Err(Error::BadState(format!("{dev} is not back in the rich OS")));
        }
        match self.ros.driver_state(ContextId::Ros, dev) {
            DriverState::Loaded => {
                return Err(Error::BadState(format!("{dev} driver already loaded")));
            }
            DriverState::SuspendedGpu => {
                let since = self.ros.gpu_suspended_at.take().unwrap_or(at);
                let frozen = at.saturating_sub(since);
                self.stats.frozen_gui_ms.push(frozen.as_ms_f64());
                self.ros.gpu_resume_at = at;
                self.record(
                    Actor::Ros,
                    "reclaim_peripheral",
                    json!({"dev": dev.0, "frozen_ms": frozen.as_ms_f64()}),
                    "gpu_resumed",
                );
            }
            DriverState::Unloaded => {
                self.record(
                    Actor::Ros,
                    "reclaim_peripheral",
                    json!({"dev": dev.0}),
                    "driver_loaded",
                );
            }
        }
        self.ros
            .set_driver_state(ContextId::Ros, dev, DriverState::Loaded);
        Ok(())
    }

    /// The rich OS uses a device it holds for `duration`.
    pub fn ros_use_device(&mut self, dev: DevId, duration: SimTime) -> Result<()> {
        let desc = self
            .machine
            .config
            .peripheral(dev)
            .ok_or(Error::UnknownDevice(dev))?
            .clone();
        if self.monitor.ledger.dev_owner.get(&dev) != Some(&ContextId::Ros)
            || self.ros.driver_state(ContextId::Ros, dev) != DriverState::Loaded
        {
            return Err(Error::DeviceBusy(dev));
        }
        let hit = self
            .machine
            .s2_translate(CoreId(0), desc.mmio.start)
            .is_hit();
        if !hit {
            self.stats.device_faults += 1;
            return Err(Error::BadState(format!("{dev} not mapped in the rich OS")));
        }
        let until = self.now() + duration;
        let end = self.ros.in_use.entry(dev).or_insert(until);
        *end = (*end).max(until);
        let end = *end;
        self.engine
            .schedule_at(end, Actor::Ros, Action::DeviceIdle(dev));
        self.record(
            Actor::Ros,
            "use_device",
            json!({"dev": dev.0, "until_us": end.as_us_f64()}),
            "ok",
        );
        Ok(())
    }

    pub(crate) fn on_device_idle(&mut self, dev: DevId) {
        let now = self.now();
        if self.ros.in_use.get(&dev).is_some_and(|&t| t <= now) {
            self.ros.in_use.remove(&dev);
            self.serve_waiters(dev);
        }
    }

    pub(crate) fn on_render(&mut self) {
        let gpu = self
            .machine
            .config
            .peripherals
            .iter()
            .find(|p| p.kind == PeripheralKind::Gpu)
            .map(|p| (p.id, p.mmio.start));
        if let Some((dev, pa)) = gpu {
            let now = self.now();
            let ready = self.ros.driver_state(ContextId::Ros, dev) == DriverState::Loaded
                && now >= self.ros.gpu_resume_at;
            if ready {
                if self.machine.s2_translate(CoreId(0), pa).is_hit() {
                    self.ros.render.frames += 1;
                } else {
                    self.ros.render.faults += 1;
                    self.stats.device_faults += 1;
                }
            } else {
                self.ros.render.skipped += 1;
            }
        }
        let period = SimTime::from_ms_f64(self.config.costs.render_period_ms);
        self.engine.schedule(period, Actor::Ros, Action::Render);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(a: u64, b: u64) -> PhysRange {
        PhysRange::new(a * MIB, b * MIB)
    }

    /// Reference allocator: scan every 2 MB-aligned start in address order.
    fn reference_first_fit(
        extents: &[PhysRange],
        used: &[PhysRange],
        bytes: u64,
    ) -> Option<PhysRange> {
        let mut ex = extents.to_vec();
        ex.sort();
        for e in ex {
            let mut s = e.start;
            while s + bytes <= e.end {
                let c = PhysRange::with_len(s, bytes);
                if !used.iter().any(|u| u.overlaps(&c)) {
                    return Some(c);
                }
                s += BLOCK_2M;
            }
        }
        None
    }

    #[test]
    fn first_alloc_lands_at_extent_base() {
        let mut p = CmaPool::new(vec![PhysRange::with_len(GIB, GIB)]);
        assert_eq!(
            p.alloc(128 * MIB, None, SandboxId(1)).unwrap(),
            PhysRange::with_len(GIB, 128 * MIB)
        );
    }

    #[test]
    fn zero_and_unaligned_allocs_fail() {
        let mut p = CmaPool::new(vec![r(8, 28)]);
        assert!(matches!(
            p.alloc(0, None, SandboxId(1)),
            Err(Error::Alignment { .. })
        ));
        assert!(matches!(
            p.alloc(MIB, None, SandboxId(1)),
            Err(Error::Alignment { .. })
        ));
    }

    #[test]
    fn adjacent_alloc_prefers_lowest_free_neighbour() {
        let base = GIB;
        let mut p = CmaPool::new(vec![PhysRange::with_len(base, GIB)]);
        let sb = p.alloc(128 * MIB, None, SandboxId(1)).unwrap();
        let grown = p.alloc(16 * MIB, Some(sb), SandboxId(1)).unwrap();
        assert_eq!(grown, PhysRange::with_len(base + 128 * MIB, 16 * MIB));
        let mut q = CmaPool::new(vec![r(8, 28)]);
        q.alloc(4 * MIB, None, SandboxId(1)).unwrap();
        let b = q.alloc(4 * MIB, None, SandboxId(2)).unwrap();
        q.free(r(8, 12));
        assert_eq!(q.alloc(2 * MIB, Some(b), SandboxId(2)).unwrap(), r(10, 12));
        assert!(matches!(
            q.alloc(16 * MIB, Some(r(26, 28)), SandboxId(3)),
            Err(Error::NoAdjacentSpace(_))
        ));
    }

    #[test]
    fn out_of_memory_is_reported() {
        let mut p = CmaPool::new(vec![r(8, 12)]);
        p.alloc(4 * MIB, None, SandboxId(1)).unwrap();
        assert_eq!(
            p.alloc(2 * MIB, None, SandboxId(2)),
            Err(Error::OutOfMemory(2 * MIB))
        );
    }

    #[test]
    fn partial_free_splits_allocation() {
        let mut p = CmaPool::new(vec![r(8, 28)]);
        p.alloc(8 * MIB, None, SandboxId(1)).unwrap();
        p.free(r(12, 14));
        let got: Vec<_> = p.allocations().map(|(a, _)| a).collect();
        assert_eq!(got, vec![r(8, 12), r(14, 16)]);
        assert_eq!(p.alloc(2 * MIB, None, SandboxId(2)).unwrap(), r(12, 14));
    }

    #[test]
    fn channels_are_fixed_slots() {
        let mut s = SharedPool::new(r(28, 32), 2 * MIB);
        assert_eq!(s.alloc(SandboxId(1)).unwrap(), r(28, 30));
        assert_eq!(s.alloc(SandboxId(2)).unwrap(), r(30, 32));
        assert_eq!(s.alloc(SandboxId(3)), Err(Error::OutOfMemory(2 * MIB)));
        s.free(SandboxId(1));
        assert_eq!(s.alloc(SandboxId(3)).unwrap(), r(28, 30));
        assert_eq!(s.channel(SandboxId(2)), Some(r(30, 32)));
    }

    mod prop {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn first_fit_matches_reference(ops in proptest::collection::vec((1u64..5, any::<bool>()), 1..40)) {
                let extents = vec![r(8, 28), r(40, 50)];
                let mut pool = CmaPool::new(extents.clone());
                let mut live: Vec<PhysRange> = Vec::new();
                for (i, (blocks, free)) in ops.into_iter().enumerate() {
                    if free && !live.is_empty() {
                        let victim = live.remove(i % live.len());
                        pool.free(victim);
                        continue;
                    }
                    let bytes = blocks * BLOCK_2M;
                    let want = reference_first_fit(&extents, &live, bytes);
                    let got = pool.alloc(bytes, None, SandboxId(1)).ok();
                    prop_assert_eq!(got, want);
                    if let Some(g) = got {
                        live.push(g);
                    }
                }
                let mut listed: Vec<_> = pool.allocations().map(|(a, _)| a).collect();
                listed.sort();
                for w in listed.windows(2) {
                    prop_assert!(w[0].end <= w[1].start);
                }
            }
        }
    }
}
