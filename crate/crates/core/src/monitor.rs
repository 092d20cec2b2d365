//! The enforcement actor: resource ledger, legality verdicts, stage-2 table
//! edits, sandbox launch and teardown, core and peripheral hand-over, and
//! TLB/cache sanitization.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{Actor, CostKey, Side, SimTime};
use crate::error::{Error, Result};
use crate::hw::{CoreState, Machine};
use crate::ros::DriverState;
use crate::secure_world::{digest64, EncryptedImage};
use crate::sos::{Quota, SandboxRuntime};
use crate::stage2::{Attr, Stage2TableSet};
use crate::types::{ContextId, CoreId, DevId, PhysRange, SandboxId, BLOCK_2M, MIB};
use crate::world::{IsolationMode, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    /// Minimum sandbox memory; detach never shrinks below it.
    pub base_bytes: u64,
    /// Default per-sandbox memory ceiling.
    pub mem_limit: u64,
    pub tzasc_regions: usize,
    pub tzasc_regions_per_sandbox: usize,
    pub tzasc_reserved_regions: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            base_bytes: 128 * MIB,
            mem_limit: 512 * MIB,
            tzasc_regions: 8,
            tzasc_regions_per_sandbox: 2,
            tzasc_reserved_regions: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CoreOwner {
    Context(ContextId),
    Off,
    BusyWait,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RamGrant {
    pub range: PhysRange,
    pub owner: SandboxId,
}

/// The monitor's view of who owns what. RAM not covered by a grant or a
/// shared channel belongs to the rich OS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ResourceLedger {
    pub core_owner: BTreeMap<CoreId, CoreOwner>,
    /// Sorted by (start, owner); adjacent grants of one owner are merged.
    pub ram_owner: Vec<RamGrant>,
    pub dev_owner: BTreeMap<DevId, ContextId>,
    pub shared_channels: BTreeMap<SandboxId, PhysRange>,
}

impl ResourceLedger {
    fn new(machine: &Machine) -> Self {
        ResourceLedger {
            core_owner: machine
                .cores
                .iter()
                .map(|c| (c.id, CoreOwner::Context(ContextId::Ros)))
                .collect(),
            ram_owner: Vec::new(),
            dev_owner: machine
                .config
                .peripherals
                .iter()
                .map(|p| (p.id, ContextId::Ros))
                .collect(),
            shared_channels: BTreeMap::new(),
        }
    }

    pub fn grants_of(&self, sid: SandboxId) -> impl Iterator<Item = PhysRange> + '_ {
        self.ram_owner
            .iter()
            .filter(move |g| g.owner == sid)
            .map(|g| g.range)
    }

    /// The sandbox's RAM interval, if it holds exactly one.
    pub fn interval_of(&self, sid: SandboxId) -> Option<PhysRange> {
        let mut it = self.grants_of(sid);
        let first = it.next()?;
        if it.next().is_some() {
            return None;
        }
        Some(first)
    }

    pub fn ram_bytes_of(&self, sid: SandboxId) -> u64 {
        self.grants_of(sid).map(|r| r.len()).sum()
    }

    /// Sandboxes holding RAM grants that intersect `range`.
    pub fn grant_owners_in(&self, range: PhysRange) -> BTreeSet<SandboxId> {
        self.ram_owner
            .iter()
            .filter(|g| g.range.overlaps(&range))
            .map(|g| g.owner)
            .collect()
    }

    pub fn channel_owners_in(&self, range: PhysRange) -> BTreeSet<SandboxId> {
        self.shared_channels
            .iter()
            .filter(|(_, c)| c.overlaps(&range))
            .map(|(&s, _)| s)
            .collect()
    }

    /// Every context allowed to touch `pa` according to the ledger.
    pub fn ram_accessors(&self, pa: u64) -> BTreeSet<ContextId> {
        let probe = PhysRange::with_len(pa, 1);
        let owners = self.grant_owners_in(probe);
        if !owners.is_empty() {
            return owners.into_iter().map(ContextId::Sandbox).collect();
        }
        let mut out: BTreeSet<ContextId> = self
            .channel_owners_in(probe)
            .into_iter()
            .map(ContextId::Sandbox)
            .collect();
        out.insert(ContextId::Ros);
        out
    }

    fn grant(&mut self, range: PhysRange, owner: SandboxId) {
        let mut merged = range;
        self.ram_owner.retain(|g| {
            if g.owner == owner && (g.range.adjoins(&merged) || g.range.overlaps(&merged)) {
                merged =
                    PhysRange::new(merged.start.min(g.range.start), merged.end.max(g.range.end));
                false
            } else {
                true
            }
        });
        // a second pass catches a grant that now touches both neighbours
        let again = self
            .ram_owner
            .iter()
            .any(|g| g.owner == owner && (g.range.adjoins(&merged) || g.range.overlaps(&merged)));
        if again {
            return self.grant(merged, owner);
        }
        let at = self
            .ram_owner
            .partition_point(|g| (g.range.start, g.owner) < (merged.start, owner));
        self.ram_owner.insert(
            at,
            RamGrant {
                range: merged,
                owner,
            },
        );
    }

    fn revoke(&mut self, range: PhysRange, owner: SandboxId) {
        let mut kept = Vec::with_capacity(self.ram_owner.len() + 1);
        for g in self.ram_owner.drain(..) {
            if g.owner != owner || !g.range.overlaps(&range) {
                kept.push(g);
                continue;
            }
            if g.range.start < range.start {
                kept.push(RamGrant {
                    range: PhysRange::new(g.range.start, range.start),
                    owner,
                });
            }
            if range.end < g.range.end {
                kept.push(RamGrant {
                    range: PhysRange::new(range.end, g.range.end),
                    owner,
                });
            }
        }
        kept.sort_by_key(|g| (g.range.start, g.owner));
        self.ram_owner = kept;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SandboxRecord {
    pub id: SandboxId,
    pub app_id: String,
    /// Digest of the image exactly as staged.
    pub image_digest: u64,
    pub cores: BTreeSet<CoreId>,
    pub boot_core: CoreId,
    pub max_cores: usize,
    pub mem_limit: u64,
    pub devices: BTreeSet<DevId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustOp {
    Attach,
    Detach,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    Overlap,
    NotContiguous,
    QuotaExceeded,
    NotFree,
    BadAlignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdjustVerdict {
    Approved,
    Rejected(RejectReason),
}

impl AdjustVerdict {
    pub fn is_approved(self) -> bool {
        self == AdjustVerdict::Approved
    }
}

/// What the rich OS asks the monitor to launch.
#[derive(Debug, Clone, PartialEq)]
pub struct LaunchSpec {
    pub app_id: String,
    pub image: EncryptedImage,
    pub core: CoreId,
    pub memory: PhysRange,
    pub channel: PhysRange,
    pub quota: Quota,
}

#[derive(Debug, Clone)]
pub struct Monitor {
    pub config: MonitorConfig,
    pub ledger: ResourceLedger,
    pub records: BTreeMap<SandboxId, SandboxRecord>,
    /// Successful secure-boot verifications: sandbox -> staged image digest.
    pub verified: BTreeMap<SandboxId, u64>,
    approvals: BTreeSet<(SandboxId, PhysRange, AdjustOp)>,
    next_id: u32,
    generation: u64,
}

impl Monitor {
    pub fn new(machine: &Machine) -> Self {
        Self::with_config(machine, MonitorConfig::default())
    }

    pub fn with_config(machine: &Machine, config: MonitorConfig) -> Self {
        Monitor {
            config,
            ledger: ResourceLedger::new(machine),
            records: BTreeMap::new(),
            verified: BTreeMap::new(),
            approvals: BTreeSet::new(),
            next_id: 1,
            generation: 0,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    fn touch(&mut self) {
        self.generation += 1;
    }

    pub fn peek_next_id(&self) -> SandboxId {
        SandboxId(self.next_id)
    }

    pub(crate) fn hash_state<H: Hasher>(&self, h: &mut H) {
        self.ledger.hash(h);
        self.records.hash(h);
        self.verified.hash(h);
        self.approvals.hash(h);
        self.next_id.hash(h);
    }

    /// Test-only backdoor for constructing corrupt ledgers.
    #[doc(hidden)]
    pub fn ledger_mut(&mut self) -> &mut ResourceLedger {
        self.touch();
        &mut self.ledger
    }

    /// The legality checks proper, without side effects.
    pub fn assess(
        &self,
        usable: &[PhysRange],
        sid: SandboxId,
        region: PhysRange,
        op: AdjustOp,
    ) -> Result<AdjustVerdict> {
        use AdjustVerdict::Rejected;
        let rec = self.records.get(&sid).ok_or(Error::UnknownSandbox(sid))?;
        if region.is_empty() || !region.is_aligned(BLOCK_2M) {
            return Ok(Rejected(RejectReason::BadAlignment));
        }
        let interval = self.ledger.interval_of(sid);
        match op {
            AdjustOp::Attach => {
                if !self.ledger.grant_owners_in(region).is_empty()
                    || !self.ledger.channel_owners_in(region).is_empty()
                {
                    return Ok(Rejected(RejectReason::Overlap));
                }
                if !usable.iter().any(|u| u.contains_range(&region)) {
                    return Ok(Rejected(RejectReason::NotFree));
                }
                let Some(iv) = interval else {
                    return Ok(Rejected(RejectReason::NotContiguous));
                };
                if !region.adjoins(&iv) {
                    return Ok(Rejected(RejectReason::NotContiguous));
                }
                if iv.len() + region.len() > rec.mem_limit {
                    return Ok(Rejected(RejectReason::QuotaExceeded));
                }
            }
            AdjustOp::Detach => {
                let Some(iv) = interval else {
                    return Ok(Rejected(RejectReason::NotContiguous));
                };
                if !iv.contains_range(&region) {
                    return Ok(Rejected(RejectReason::NotFree));
                }
                if region.start != iv.start && region.end != iv.end {
                    return Ok(Rejected(RejectReason::NotContiguous));
                }
                if iv.len() - region.len() < self.config.base_bytes {
                    return Ok(Rejected(RejectReason::QuotaExceeded));
                }
            }
        }
        Ok(AdjustVerdict::Approved)
    }
}

fn side_of(ctx: ContextId) -> Side {
    match ctx {
        ContextId::Ros => Side::Ros,
        ContextId::Sandbox(_) => Side::Sandbox,
    }
}

impl World {
    /// Most sandboxes that may run at once under the current isolation mode.
    pub fn launch_limit(&self) -> usize {
        let by_cores = self.machine.cores.len() - 1;
        match self.config.mode {
            IsolationMode::Leap => by_cores,
            IsolationMode::Tzasc => {
                let m = &self.monitor.config;
                let free = m.tzasc_regions.saturating_sub(m.tzasc_reserved_regions);
                by_cores.min(free / m.tzasc_regions_per_sandbox.max(1))
            }
        }
    }

    /// Unmaps `range` from the rich OS. With legality checks on this is
    /// strict; without them only the blocks the rich OS actually holds are
    /// taken, and those are returned.
    fn ros_take(&mut self, range: PhysRange) -> Result<Vec<PhysRange>> {
        let strict = self.config.defenses.legality_check;
        let ros = self
            .machine
            .tables_mut(ContextId::Ros)
            .expect("rich OS tables exist");
        if strict {
            ros.unmap(range)?;
            return Ok(vec![range]);
        }
        let mut taken = Vec::new();
        for base in range.chunks(BLOCK_2M) {
            let block = PhysRange::with_len(base, BLOCK_2M);
            if ros.lookup(base).is_some_and(|e| e.range() == block) {
                ros.unmap(block)?;
                taken.push(block);
            }
        }
        Ok(taken)
    }

    fn ros_give(&mut self, ranges: &[PhysRange]) -> Result<()> {
        let strict = self.config.defenses.legality_check;
        let ros = self
            .machine
            .tables_mut(ContextId::Ros)
            .expect("rich OS tables exist");
        for &r in ranges {
            if strict {
                ros.map(r, Attr::Normal)?;
            } else {
                for base in r.chunks(BLOCK_2M) {
                    if ros.lookup(base).is_none() {
                        ros.map(PhysRange::with_len(base, BLOCK_2M), Attr::Normal)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn sandbox_tables(&mut self, sid: SandboxId) -> Result<&mut Stage2TableSet> {
        self.machine
            .tables_mut(ContextId::Sandbox(sid))
            .ok_or(Error::UnknownSandbox(sid))
    }

    fn usable_contains(&self, r: PhysRange) -> bool {
        self.machine
            .config
            .usable_ram()
            .iter()
            .any(|u| u.contains_range(&r))
    }

    fn ram_is_free(&self, r: PhysRange) -> bool {
        self.usable_contains(r)
            && self.monitor.ledger.grant_owners_in(r).is_empty()
            && self.monitor.ledger.channel_owners_in(r).is_empty()
    }

    /// Locks resources, verifies the staged image and boots a sandbox.
    pub fn lock_and_launch(&mut self, spec: LaunchSpec) -> Result<SandboxId> {
        let running = self.monitor.records.len();
        let limit = self.launch_limit();
        if running + 1 > limit {
            self.record(
                Actor::Monitor,
                "lock_and_launch",
                json!({"app": spec.app_id}),
                "too_many_sandboxes",
            );
            return Err(Error::TooManySandboxes { running, limit });
        }
        for r in [spec.memory, spec.channel] {
            if r.is_empty() || !r.is_aligned(BLOCK_2M) {
                return Err(Error::Alignment {
                    range: r,
                    granule: BLOCK_2M,
                });
            }
        }
        let core_class = self.machine.core(spec.core)?.class;
        if spec.core == CoreId(0) {
            return Err(Error::ResourceBusy(format!(
                "{} is the rich OS boot core",
                spec.core
            )));
        }
        if spec.quota.max_cores == 0 {
            return Err(Error::Config("max_cores must be at least 1".into()));
        }
        if self.config.defenses.legality_check {
            let owner = self.monitor.ledger.core_owner.get(&spec.core).copied();
            if owner != Some(CoreOwner::Context(ContextId::Ros)) {
                self.record(
                    Actor::Monitor,
                    "lock_and_launch",
                    json!({"core": spec.core.0}),
                    "core_busy",
                );
                return Err(Error::ResourceBusy(format!("{} is not free", spec.core)));
            }
            if !self.ram_is_free(spec.memory)
                || !self.ram_is_free(spec.channel)
                || spec.memory.overlaps(&spec.channel)
            {
                self.record(
                    Actor::Monitor,
                    "lock_and_launch",
                    json!({"memory": spec.memory.to_string()}),
                    "memory_busy",
                );
                return Err(Error::ResourceBusy(format!(
                    "{} or {} is not free",
                    spec.memory, spec.channel
                )));
            }
            if spec.memory.len() > spec.quota.max_memory {
                return Err(Error::QuotaExceeded(ContextId::Sandbox(
                    self.monitor.peek_next_id(),
                )));
            }
        }

        // the image region leaves the rich OS before it is checked
        let taken = self.ros_take(spec.memory)?;
        self.record(
            Actor::Monitor,
            "isolate_image",
            json!({"region": spec.memory.to_string()}),
            "ok",
        );
        let staged = digest64(&spec.image.payload);
        if self.config.defenses.verify {
            if let Err(e) = self.secure.verify_and_decrypt(&spec.image) {
                self.ros_give(&taken)?;
                self.record(
                    Actor::SecureWorld,
                    "verify_image",
                    json!({"app": spec.app_id}),
                    "integrity_error",
                );
                return Err(e);
            }
            self.record(
                Actor::SecureWorld,
                "verify_image",
                json!({"app": spec.app_id, "digest": format!("{staged:016x}")}),
                "ok",
            );
        } else {
            self.record(
                Actor::SecureWorld,
                "verify_image",
                json!({"app": spec.app_id}),
                "skipped",
            );
        }

        let id = self.monitor.peek_next_id();
        self.monitor.next_id += 1;
        self.monitor.touch();
        let ctx = ContextId::Sandbox(id);
        self.sanitize(spec.memory, ctx)?;
        let mut set = Stage2TableSet::new(ctx);
        set.map(spec.memory, Attr::Normal)?;
        set.map(spec.channel, Attr::SharedChannel)?;
        self.machine.install_tables(set);
        let ch_taken = self.ros_take(spec.channel)?;
        if ch_taken.len() as u64 * BLOCK_2M == spec.channel.len()
            || self.config.defenses.legality_check
        {
            self.machine
                .tables_mut(ContextId::Ros)
                .expect("rich OS tables exist")
                .map(spec.channel, Attr::SharedChannel)?;
        }

        // hotplug the core out of the rich OS and into the new context
        let prev = self.monitor.ledger.core_owner.get(&spec.core).copied();
        if let Some(CoreOwner::Context(ContextId::Sandbox(old))) = prev {
            self.machine.invalidate_cache_owner(ContextId::Sandbox(old));
        }
        {
            let core = self.machine.core_mut(spec.core)?;
            core.state = CoreState::RunningSandbox(id);
            core.active_tables = Some(ctx);
        }
        self.monitor
            .ledger
            .core_owner
            .insert(spec.core, CoreOwner::Context(ctx));
        self.monitor.ledger.grant(spec.memory, id);
        self.monitor.ledger.shared_channels.insert(id, spec.channel);
        self.monitor.records.insert(
            id,
            SandboxRecord {
                id,
                app_id: spec.app_id.clone(),
                image_digest: staged,
                cores: BTreeSet::from([spec.core]),
                boot_core: spec.core,
                max_cores: spec.quota.max_cores,
                mem_limit: spec.quota.max_memory,
                devices: BTreeSet::new(),
            },
        );
        if self.config.defenses.verify {
            self.monitor.verified.insert(id, staged);
        }
        let boot = self.charge(Actor::Monitor, CostKey::Boot);
        let now = self.now();
        let rt = SandboxRuntime::new(
            id,
            spec.quota,
            spec.core,
            core_class,
            now,
            now + boot,
            &self.config.sos,
        );
        self.sandboxes.insert(id, rt);
        self.record(
            Actor::Monitor,
            "lock_and_launch",
            json!({"sandbox": id.0, "core": spec.core.0, "memory": spec.memory.to_string(), "channel": spec.channel.to_string()}),
            "ok",
        );
        self.note_concurrency();
        Ok(id)
    }

    /// Computes the verdict for a proposed memory change and, if approved,
    /// remembers the approval for the following attach/detach.
    pub fn verify_region_legality(
        &mut self,
        sid: SandboxId,
        region: PhysRange,
        op: AdjustOp,
    ) -> Result<AdjustVerdict> {
        let verdict = if self.config.defenses.legality_check {
            let usable = self.machine.config.usable_ram();
            self.monitor.assess(&usable, sid, region, op)?
        } else {
            if !self.monitor.records.contains_key(&sid) {
                return Err(Error::UnknownSandbox(sid));
            }
            AdjustVerdict::Approved
        };
        if verdict.is_approved() {
            self.monitor.approvals.insert((sid, region, op));
            self.monitor.touch();
        }
        let v = match verdict {
            AdjustVerdict::Approved => "approved".to_string(),
            AdjustVerdict::Rejected(r) => format!("rejected:{r:?}"),
        };
        self.record(
            Actor::Monitor,
            "verify_region",
            json!({"sandbox": sid.0, "region": region.to_string(), "op": op}),
            &v,
        );
        Ok(verdict)
    }

    fn take_approval(&mut self, sid: SandboxId, region: PhysRange, op: AdjustOp) -> Result<()> {
        if !self.monitor.approvals.remove(&(sid, region, op)) {
            return Err(Error::Verdict(sid));
        }
        self.monitor.touch();
        Ok(())
    }

    fn mem_blocks(&self, region: PhysRange) -> u64 {
        region.len().div_ceil(self.config.costs.mem_block_bytes)
    }

    pub fn attach_memory(&mut self, sid: SandboxId, region: PhysRange) -> Result<SimTime> {
        self.take_approval(sid, region, AdjustOp::Attach)?;
        let ctx = ContextId::Sandbox(sid);
        self.ros_take(region)?;
        self.sanitize(region, ctx)?;
        self.sandbox_tables(sid)?.map(region, Attr::Normal)?;
        self.monitor.ledger.grant(region, sid);
        self.monitor.touch();
        let mut cost = SimTime::ZERO;
        for _ in 0..self.mem_blocks(region) {
            cost = cost + self.charge(Actor::Monitor, CostKey::MemIncrease);
        }
        self.record(
            Actor::Monitor,
            "attach_memory",
            json!({"sandbox": sid.0, "region": region.to_string()}),
            "ok",
        );
        Ok(cost)
    }

    pub fn detach_memory(&mut self, sid: SandboxId, region: PhysRange) -> Result<SimTime> {
        self.take_approval(sid, region, AdjustOp::Detach)?;
        self.sandbox_tables(sid)?.unmap(region)?;
        self.sanitize(region, ContextId::Ros)?;
        self.ros_give(&[region])?;
        self.monitor.ledger.revoke(region, sid);
        self.monitor.touch();
        let mut cost = SimTime::ZERO;
        for _ in 0..self.mem_blocks(region) {
            cost = cost + self.charge(Actor::Monitor, CostKey::MemDecrease);
        }
        self.record(
            Actor::Monitor,
            "detach_memory",
            json!({"sandbox": sid.0, "region": region.to_string()}),
            "ok",
        );
        Ok(cost)
    }

    /// Hands a core from one context to another through hotplug, or through
    /// a busy-wait park when `optimized`.
    pub fn transfer_core(
        &mut self,
        core: CoreId,
        from: ContextId,
        to: ContextId,
        optimized: bool,
    ) -> Result<SimTime> {
        let class = self.machine.core(core)?.class;
        if from == to {
            return Err(Error::BadState(format!("{core} already belongs to {to}")));
        }
        if core == CoreId(0) {
            return Err(Error::LastCore {
                core,
                owner: ContextId::Ros,
            });
        }
        if let ContextId::Sandbox(s) = from {
            let rec = self
                .monitor
                .records
                .get(&s)
                .ok_or(Error::UnknownSandbox(s))?;
            if rec.boot_core == core || rec.cores.len() <= 1 {
                return Err(Error::LastCore { core, owner: from });
            }
        }
        if let ContextId::Sandbox(s) = to {
            if !self.monitor.records.contains_key(&s) {
                return Err(Error::UnknownSandbox(s));
            }
        }
        if self.config.defenses.legality_check {
            if self.monitor.ledger.core_owner.get(&core) != Some(&CoreOwner::Context(from)) {
                return Err(Error::NotOwner {
                    actor: from,
                    what: core.to_string(),
                });
            }
            if let ContextId::Sandbox(s) = to {
                let rec = &self.monitor.records[&s];
                if rec.cores.len() + 1 > rec.max_cores {
                    return Err(Error::QuotaExceeded(to));
                }
            }
        }
        let mut cost = SimTime::ZERO;
        if from != ContextId::Ros {
            cost = cost + self.charge(Actor::Monitor, CostKey::CoreDecrease { class, optimized });
        }
        if to != ContextId::Ros {
            cost = cost + self.charge(Actor::Monitor, CostKey::CoreIncrease { class, optimized });
        }
        let parked = if optimized {
            CoreOwner::BusyWait
        } else {
            CoreOwner::Off
        };
        self.record(
            Actor::Monitor,
            "core_park",
            json!({"core": core.0, "state": format!("{parked:?}")}),
            "ok",
        );
        if from != ContextId::Ros {
            self.machine.invalidate_cache_owner(from);
        }
        {
            let c = self.machine.core_mut(core)?;
            c.state = match to {
                ContextId::Ros => CoreState::RunningRos,
                ContextId::Sandbox(s) => CoreState::RunningSandbox(s),
            };
            c.active_tables = Some(to);
        }
        self.monitor
            .ledger
            .core_owner
            .insert(core, CoreOwner::Context(to));
        if let ContextId::Sandbox(s) = from {
            if let Some(r) = self.monitor.records.get_mut(&s) {
                r.cores.remove(&core);
            }
        }
        if let ContextId::Sandbox(s) = to {
            if let Some(r) = self.monitor.records.get_mut(&s) {
                r.cores.insert(core);
            }
        }
        self.monitor.touch();
        self.record(
            Actor::Monitor,
            "transfer_core",
            json!({"core": core.0, "from": from.to_string(), "to": to.to_string(), "optimized": optimized, "cost_ms": cost.as_ms_f64()}),
            "ok",
        );
        Ok(cost)
    }

    /// Moves a device's MMIO pages from one context's tables to another's.
    pub fn switch_peripheral(
        &mut self,
        dev: DevId,
        from: ContextId,
        to: ContextId,
    ) -> Result<SimTime> {
        let desc = self
            .machine
            .config
            .peripheral(dev)
            .ok_or(Error::UnknownDevice(dev))?
            .clone();
        if self.monitor.ledger.dev_owner.get(&dev) != Some(&from) {
            return Err(Error::NotOwner {
                actor: from,
                what: dev.to_string(),
            });
        }
        if from == to {
            return Err(Error::BadState(format!("{dev} already belongs to {to}")));
        }
        if let ContextId::Sandbox(s) = to {
            if !self.monitor.records.contains_key(&s) {
                return Err(Error::UnknownSandbox(s));
            }
        }
        match self.ros.driver_state(from, dev) {
            DriverState::Unloaded | DriverState::SuspendedGpu => {}
            DriverState::Loaded => {
                self.record(
                    Actor::Monitor,
                    "switch_peripheral",
                    json!({"dev": dev.0}),
                    "device_busy",
                );
                return Err(Error::DeviceBusy(dev));
            }
        }
        self.machine
            .tables_mut(from)
            .ok_or_else(|| Error::BadState(format!("{from} has no tables")))?
            .unmap(desc.mmio)?;
        self.machine
            .tables_mut(to)
            .ok_or_else(|| Error::BadState(format!("{to} has no tables")))?
            .map(desc.mmio, Attr::Device)?;
        if self.config.defenses.sanitize {
            self.machine.tlb_flush_pages(desc.mmio)?;
        }
        self.monitor.ledger.dev_owner.insert(dev, to);
        if let ContextId::Sandbox(s) = from {
            if let Some(r) = self.monitor.records.get_mut(&s) {
                r.devices.remove(&dev);
            }
        }
        if let ContextId::Sandbox(s) = to {
            if let Some(r) = self.monitor.records.get_mut(&s) {
                r.devices.insert(dev);
            }
        }
        self.monitor.touch();
        let unmap = self.charge(
            Actor::Monitor,
            CostKey::PeripheralUnmap {
                kind: desc.kind,
                side: side_of(from),
            },
        );
        let map = self.charge(
            Actor::Monitor,
            CostKey::PeripheralMap {
                kind: desc.kind,
                side: side_of(to),
            },
        );
        self.record(
            Actor::Monitor,
            "switch_peripheral",
            json!({"dev": dev.0, "from": from.to_string(), "to": to.to_string()}),
            "ok",
        );
        Ok(unmap + map)
    }

    /// Flushes TLB entries over `region` on every core and drops cache lines
    /// in it not filled by `incoming`. Returns (tlb entries, cache lines).
    pub fn sanitize(&mut self, region: PhysRange, incoming: ContextId) -> Result<(usize, usize)> {
        if region.is_empty() || !region.is_aligned(BLOCK_2M) {
            return Err(Error::Alignment {
                range: region,
                granule: BLOCK_2M,
            });
        }
        if !self.config.defenses.sanitize {
            self.record(
                Actor::Monitor,
                "sanitize",
                json!({"region": region.to_string()}),
                "skipped",
            );
            return Ok((0, 0));
        }
        let tlb = self.machine.tlb_flush_range(region)?;
        let lines = self.machine.invalidate_cache_in(region, |o| o == incoming);
        self.record(
            Actor::Monitor,
            "sanitize",
            json!({"region": region.to_string(), "tlb": tlb, "lines": lines}),
            "ok",
        );
        Ok((tlb, lines))
    }

    /// Returns every resource of a terminating sandbox to the rich OS.
    pub fn teardown(&mut self, sid: SandboxId) -> Result<SimTime> {
        let rt = self.sandboxes.get(&sid).ok_or(Error::UnknownSandbox(sid))?;
        if rt.state != crate::sos::SandboxState::Terminating {
            return Err(Error::BadState(format!(
                "{sid} is {:?}, not terminating",
                rt.state
            )));
        }
        let rec = self
            .monitor
            .records
            .get(&sid)
            .cloned()
            .ok_or(Error::UnknownSandbox(sid))?;
        let ctx = ContextId::Sandbox(sid);
        let mut cost = SimTime::ZERO;
        for &dev in &rec.devices {
            self.ros.set_driver_state(ctx, dev, DriverState::Unloaded);
            cost = cost + self.switch_peripheral(dev, ctx, ContextId::Ros)?;
            self.reclaim_peripheral(dev)?;
        }
        self.machine.invalidate_cache_owner(ctx);
        for &core in &rec.cores {
            let c = self.machine.core_mut(core)?;
            if c.state == CoreState::RunningSandbox(sid) {
                c.state = CoreState::RunningRos;
                c.active_tables = Some(ContextId::Ros);
            }
            if self.monitor.ledger.core_owner.get(&core) == Some(&CoreOwner::Context(ctx)) {
                self.monitor
                    .ledger
                    .core_owner
                    .insert(core, CoreOwner::Context(ContextId::Ros));
            }
        }
        let grants: Vec<PhysRange> = self.monitor.ledger.grants_of(sid).collect();
        for g in grants {
            self.sandbox_tables(sid)?.unmap(g)?;
            self.sanitize(g, ContextId::Ros)?;
            self.ros_give(&[g])?;
            self.monitor.ledger.revoke(g, sid);
        }
        if let Some(ch) = self.monitor.ledger.shared_channels.remove(&sid) {
            self.sandbox_tables(sid)?.unmap(ch)?;
            self.sanitize(ch, ContextId::Ros)?;
            let ros = self
                .machine
                .tables_mut(ContextId::Ros)
                .expect("rich OS tables exist");
            if ros
                .lookup(ch.start)
                .is_some_and(|e| e.attr == Attr::SharedChannel)
            {
                ros.unmap(ch)?;
            }
            self.ros_give(&[ch])?;
        }
        if self.config.defenses.sanitize {
            self.machine.tlb_flush_context(ctx);
        }
        self.machine.remove_tables(ctx);
        self.monitor.records.remove(&sid);
        self.monitor.verified.remove(&sid);
        self.monitor.approvals.retain(|(s, _, _)| *s != sid);
        self.monitor.touch();
        cost = cost + self.charge(Actor::Monitor, CostKey::Shutdown);
        self.record(Actor::Monitor, "teardown", json!({"sandbox": sid.0}), "ok");
        Ok(cost)
    }

    /// DMA issued by a device on behalf of its owner. With the SMMU model on,
    /// the target must be accessible to the owner per the ledger.
    pub fn dma_access(&mut self, dev: DevId, range: PhysRange) -> Result<bool> {
        let desc = self
            .machine
            .config
            .peripheral(dev)
            .ok_or(Error::UnknownDevice(dev))?;
        if !desc.dma_capable {
            return Err(Error::UnsupportedDevice(dev));
        }
        let owner = self.monitor.ledger.dev_owner[&dev];
        let allowed = if self.config.defenses.smmu {
            let line = self.machine.config.cache_line_bytes;
            let mut ok = true;
            let mut pa = range.start;
            while pa < range.end {
                let in_ram = pa < self.machine.config.ram_bytes
                    && self.machine.classify(pa) == crate::hw::AddrClass::Ram;
                if !in_ram || !self.monitor.ledger.ram_accessors(pa).contains(&owner) {
                    ok = false;
                    break;
                }
                pa += line;
            }
            ok
        } else {
            true
        };
        self.record(
            Actor::Monitor,
            "smmu_check",
            json!({"dev": dev.0, "range": range.to_string(), "owner": owner.to_string()}),
            if allowed { "allowed" } else { "blocked" },
        );
        Ok(allowed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(a: u64, b: u64) -> PhysRange {
        PhysRange::new(a * MIB, b * MIB)
    }

    #[test]
    fn grants_merge_and_split() {
        let m = Machine::new(crate::hw::MachineConfig::small()).unwrap();
        let mut l = ResourceLedger::new(&m);
        let s = SandboxId(1);
        l.grant(r(8, 12), s);
        l.grant(r(14, 16), s);
        l.grant(r(12, 14), s);
        assert_eq!(l.interval_of(s), Some(r(8, 16)));
        l.revoke(r(10, 12), s);
        assert_eq!(
            l.grants_of(s).collect::<Vec<_>>(),
            vec![r(8, 10), r(12, 16)]
        );
        assert_eq!(l.interval_of(s), None);
        l.grant(r(10, 12), s);
        assert_eq!(
            l.ram_owner,
            vec![RamGrant {
                range: r(8, 16),
                owner: s
            }]
        );
    }

    #[test]
    fn accessors_follow_grants_and_channels() {
        let m = Machine::new(crate::hw::MachineConfig::small()).unwrap();
        let mut l = ResourceLedger::new(&m);
        l.grant(r(8, 12), SandboxId(1));
        l.shared_channels.insert(SandboxId(1), r(28, 30));
        assert_eq!(
            l.ram_accessors(9 * MIB),
            BTreeSet::from([ContextId::Sandbox(SandboxId(1))])
        );
        assert_eq!(
            l.ram_accessors(29 * MIB),
            BTreeSet::from([ContextId::Ros, ContextId::Sandbox(SandboxId(1))])
        );
        assert_eq!(l.ram_accessors(2 * MIB), BTreeSet::from([ContextId::Ros]));
    }
}
