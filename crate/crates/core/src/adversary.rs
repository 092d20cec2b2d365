//! Global invariant checker and the attack catalogue. Attacks drive the
//! system through the same operations an honest actor uses, plus raw probes
//! that a compromised rich OS is free to issue.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::Actor;
use crate::error::Error;
use crate::hw::{CoreState, PeripheralKind};
use crate::monitor::{AdjustOp, CoreOwner, LaunchSpec};
use crate::ros::CreateOptions;
use crate::sos::Quota;
use crate::stage2::{Attr, Translation};
use crate::types::{ContextId, CoreId, DevId, PhysRange, SandboxId, BLOCK_2M};
use crate::world::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InvariantId {
    #[serde(rename = "EXCL-MEM")]
    ExclMem,
    #[serde(rename = "EXCL-DEV")]
    ExclDev,
    #[serde(rename = "EXCL-CORE")]
    ExclCore,
    #[serde(rename = "CONTIG")]
    Contig,
    #[serde(rename = "BOOT-GATE")]
    BootGate,
    #[serde(rename = "SANITY")]
    Sanity,
    #[serde(rename = "CAP")]
    Cap,
}

impl InvariantId {
    pub const ALL: [InvariantId; 7] = [
        InvariantId::ExclMem,
        InvariantId::ExclDev,
        InvariantId::ExclCore,
        InvariantId::Contig,
        InvariantId::BootGate,
        InvariantId::Sanity,
        InvariantId::Cap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InvariantId::ExclMem => "EXCL-MEM",
            InvariantId::ExclDev => "EXCL-DEV",
            InvariantId::ExclCore => "EXCL-CORE",
            InvariantId::Contig => "CONTIG",
            InvariantId::BootGate => "BOOT-GATE",
            InvariantId::Sanity => "SANITY",
            InvariantId::Cap => "CAP",
        }
    }
}

impl fmt::Display for InvariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub invariant: InvariantId,
    pub detail: String,
    /// Digest of the state the predicate failed on.
    pub state_digest: u64,
    /// The event after which the check ran.
    pub event: Option<String>,
}

impl std::fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.invariant.name(), self.detail)?;
        if let Some(e) = &self.event {
            write!(f, " (after {e})")?;
        }
        Ok(())
    }
}

struct Checker {
    found: Vec<(InvariantId, String)>,
}

impl Checker {
    fn fail(&mut self, inv: InvariantId, detail: String) {
        self.found.push((inv, detail));
    }
}

/// Evaluates every invariant by direct inspection of `world`.
pub fn check_invariants(world: &World) -> Vec<ViolationReport> {
    let mut c = Checker { found: Vec::new() };
    excl_mem(world, &mut c);
    excl_dev(world, &mut c);
    excl_core(world, &mut c);
    contig(world, &mut c);
    boot_gate(world, &mut c);
    sanity(world, &mut c);
    cap(world, &mut c);
    c.report(world)
}

/// Only the TLB and cache half of the invariant set.
pub fn check_sanity(world: &World) -> Vec<ViolationReport> {
    let mut c = Checker { found: Vec::new() };
    sanity(world, &mut c);
    c.report(world)
}

impl Checker {
    fn report(self, world: &World) -> Vec<ViolationReport> {
        let c = self;
        if c.found.is_empty() {
            return Vec::new();
        }
        let digest = world.state_digest();
        c.found
            .into_iter()
            .map(|(invariant, detail)| ViolationReport {
                invariant,
                detail,
                state_digest: digest,
                event: None,
            })
            .collect()
    }
}

fn excl_mem(w: &World, c: &mut Checker) {
    let tables = &w.machine.tables;
    let ros = tables.get(&ContextId::Ros);
    // each sandbox's RAM coalesced into runs of one attribute; sharing then
    // shows up as overlapping runs
    let mut runs: Vec<(PhysRange, SandboxId, Attr)> = Vec::new();
    for (ctx, set) in tables {
        let ContextId::Sandbox(sid) = *ctx else {
            continue;
        };
        let first = runs.len();
        for e in set.entries().filter(|e| e.attr != Attr::Device) {
            let r = PhysRange::with_len(e.pa_block, e.granularity.bytes());
            if let Some((last, _, attr)) = runs[first..].last_mut() {
                if *attr == e.attr && last.end == r.start {
                    last.end = r.end;
                    continue;
                }
            }
            runs.push((r, sid, e.attr));
        }
    }
    for &(range, sid, attr) in &runs {
        let Some(ros) = ros else { break };
        for m in ros.entries_in(range) {
            let shared = attr == Attr::SharedChannel && m.attr == Attr::SharedChannel;
            if !shared {
                c.fail(
                    InvariantId::ExclMem,
                    format!(
                        "{:#x} mapped by {sid} and rich OS",
                        m.ipa_block.max(range.start)
                    ),
                );
                break;
            }
        }
        if attr == Attr::SharedChannel {
            // every granule of a channel must also be a channel in the rich OS
            let mut at = range.start;
            for m in ros.entries_in(range) {
                if m.ipa_block > at || m.attr != Attr::SharedChannel {
                    break;
                }
                at = m.range().end;
            }
            if at < range.end {
                c.fail(
                    InvariantId::ExclMem,
                    format!("channel {at:#x} of {sid} not shared with rich OS"),
                );
            }
        }
    }
    runs.sort_unstable_by_key(|r| r.0.start);
    let mut reach: Option<(u64, SandboxId)> = None;
    for &(range, sid, _) in &runs {
        if let Some((end, prev)) = reach {
            if range.start < end {
                c.fail(
                    InvariantId::ExclMem,
                    format!("{:#x} mapped by {prev} and {sid}", range.start),
                );
            }
        }
        if reach.is_none_or(|(e, _)| range.end > e) {
            reach = Some((range.end, sid));
        }
    }
    for pair in w.monitor.ledger.ram_owner.windows(2) {
        if pair[0].range.overlaps(&pair[1].range) {
            c.fail(
                InvariantId::ExclMem,
                format!(
                    "ledger grants {} ({}) and {} ({}) overlap",
                    pair[0].range, pair[0].owner, pair[1].range, pair[1].owner
                ),
            );
        }
    }
}

fn excl_dev(w: &World, c: &mut Checker) {
    for p in &w.machine.config.peripherals {
        let holders: Vec<ContextId> = w
            .machine
            .tables
            .iter()
            .filter(|(_, t)| t.entries_in(p.mmio).next().is_some())
            .map(|(&ctx, _)| ctx)
            .collect();
        let owner = w.monitor.ledger.dev_owner.get(&p.id).copied();
        let ok = match (holders.as_slice(), owner) {
            ([h], Some(o)) => *h == o,
            _ => false,
        };
        if !ok {
            c.fail(
                InvariantId::ExclDev,
                format!("{} mapped by {holders:?}, ledger owner {owner:?}", p.id),
            );
        }
    }
}

fn excl_core(w: &World, c: &mut Checker) {
    let mut claimed: BTreeMap<CoreId, SandboxId> = BTreeMap::new();
    for (sid, rec) in &w.monitor.records {
        for &core in &rec.cores {
            if let Some(prev) = claimed.insert(core, *sid) {
                c.fail(
                    InvariantId::ExclCore,
                    format!("{core} held by {prev} and {sid}"),
                );
            }
        }
    }
    for core in &w.machine.cores {
        let owner = w.monitor.ledger.core_owner.get(&core.id).copied();
        if let CoreState::RunningSandbox(s) = core.state {
            let ctx = ContextId::Sandbox(s);
            if core.active_tables != Some(ctx) {
                c.fail(
                    InvariantId::ExclCore,
                    format!("{} runs {s} on {:?}", core.id, core.active_tables),
                );
            }
            if owner != Some(CoreOwner::Context(ctx)) {
                c.fail(
                    InvariantId::ExclCore,
                    format!("{} runs {s}, ledger says {owner:?}", core.id),
                );
            }
            if claimed.get(&core.id) != Some(&s) {
                c.fail(
                    InvariantId::ExclCore,
                    format!("{} runs {s} outside its record", core.id),
                );
            }
        }
        if let Some(CoreOwner::Context(ContextId::Sandbox(s))) = owner {
            if core.state != CoreState::RunningSandbox(s) {
                c.fail(
                    InvariantId::ExclCore,
                    format!("{} owned by {s} but {:?}", core.id, core.state),
                );
            }
        }
    }
}

fn contig(w: &World, c: &mut Checker) {
    for (ctx, set) in &w.machine.tables {
        let ContextId::Sandbox(sid) = *ctx else {
            continue;
        };
        let mut prev: Option<PhysRange> = None;
        for e in set.entries().filter(|e| e.attr == Attr::Normal) {
            let r = PhysRange::with_len(e.pa_block, e.granularity.bytes());
            if let Some(p) = prev {
                if p.end != r.start {
                    c.fail(
                        InvariantId::Contig,
                        format!("{sid} memory has a gap at {:#x}", p.end),
                    );
                    break;
                }
            }
            prev = Some(r);
        }
    }
}

fn boot_gate(w: &World, c: &mut Checker) {
    for (sid, rec) in &w.monitor.records {
        if w.monitor.verified.get(sid) != Some(&rec.image_digest) {
            c.fail(
                InvariantId::BootGate,
                format!("{sid} runs an unverified image"),
            );
        }
    }
}

fn sanity(w: &World, c: &mut Checker) {
    for e in w.machine.tlb_entries() {
        let backed = w
            .machine
            .tables
            .get(&e.context)
            .and_then(|t| t.lookup(e.ipa_block))
            .is_some_and(|m| {
                m.pa_block <= e.pa_block && e.pa_block < m.pa_block + m.granularity.bytes()
            });
        if !backed {
            c.fail(
                InvariantId::Sanity,
                format!(
                    "stale TLB entry {:#x} for {} on {}",
                    e.ipa_block, e.context, e.core
                ),
            );
        }
    }
    for line in w.machine.cache.lines() {
        let mapped = w
            .machine
            .tables
            .get(&line.fill_owner)
            .and_then(|t| t.lookup(line.pa_line))
            .is_some();
        if !mapped {
            c.fail(
                InvariantId::Sanity,
                format!(
                    "cache line {:#x} owned by {} outside its memory",
                    line.pa_line, line.fill_owner
                ),
            );
        }
    }
}

fn cap(w: &World, c: &mut Checker) {
    let limit = w.machine.cores.len().saturating_sub(1);
    let running = w.monitor.records.len();
    if running > limit {
        c.fail(
            InvariantId::Cap,
            format!("{running} sandboxes on {} cores", w.machine.cores.len()),
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    MaliciousImageSwap,
    OverlappingMemoryConfig,
    DoubleCoreAlloc,
    IoEavesdrop,
    CacheDirectAttack,
    DmaBypass,
    StaleTlbRead,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::MaliciousImageSwap,
        AttackKind::OverlappingMemoryConfig,
        AttackKind::DoubleCoreAlloc,
        AttackKind::IoEavesdrop,
        AttackKind::CacheDirectAttack,
        AttackKind::DmaBypass,
        AttackKind::StaleTlbRead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::MaliciousImageSwap => "malicious_image_swap",
            AttackKind::OverlappingMemoryConfig => "overlapping_memory_config",
            AttackKind::DoubleCoreAlloc => "double_core_alloc",
            AttackKind::IoEavesdrop => "io_eavesdrop",
            AttackKind::CacheDirectAttack => "cache_direct_attack",
            AttackKind::DmaBypass => "dma_bypass",
            AttackKind::StaleTlbRead => "stale_tlb_read",
        }
    }

    /// The defense expected to stop this attack.
    pub fn defense(self) -> &'static str {
        match self {
            AttackKind::MaliciousImageSwap => "integrity",
            AttackKind::OverlappingMemoryConfig | AttackKind::DoubleCoreAlloc => "legality check",
            AttackKind::IoEavesdrop | AttackKind::StaleTlbRead => "stage-2",
            AttackKind::CacheDirectAttack => "sanitize",
            AttackKind::DmaBypass => "SMMU",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown attack `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub kind: AttackKind,
    pub blocked: bool,
    /// The check that stopped the attack, or "none".
    pub mechanism: String,
    pub leaked_bytes: u64,
    pub violations: Vec<ViolationReport>,
    pub detail: String,
}

/// A compromised rich OS reads `ipa` on its boot core. Returns the bytes it
/// learned that it has no right to: memory it does not own, or a cache line
/// left behind by a context that no longer owns the frame. A legitimate read
/// fills the line as the rich OS.
pub fn ros_probe(world: &mut World, ipa: u64) -> u64 {
    let Translation::Hit(pa) = world.machine.s2_translate(CoreId(0), ipa) else {
        world.record(
            Actor::Adversary,
            "ros_probe",
            json!({"ipa": format!("{ipa:#x}")}),
            "stage2_fault",
        );
        return 0;
    };
    let line = world.machine.config.cache_line_bytes;
    let leaked = if world.machine.config.ram_range().contains(pa) {
        let acc = world.monitor.ledger.ram_accessors(pa);
        let stale_line = world
            .machine
            .cache_probe(pa)
            .is_some_and(|o| o != ContextId::Ros && !acc.contains(&o));
        if !acc.contains(&ContextId::Ros) || stale_line {
            line
        } else {
            world.machine.cache_fill(ContextId::Ros, pa);
            0
        }
    } else {
        match world.machine.classify(pa) {
            crate::hw::AddrClass::Mmio(dev)
                if world.monitor.ledger.dev_owner.get(&dev) != Some(&ContextId::Ros) =>
            {
                crate::types::PAGE_4K
            }
            _ => 0,
        }
    };
    let verdict = if leaked > 0 { "leaked" } else { "ok" };
    world.record(
        Actor::Adversary,
        "ros_probe",
        json!({"ipa": format!("{ipa:#x}"), "leaked": leaked}),
        verdict,
    );
    leaked
}

/// The sandbox writes the line at `ipa` through its own translation.
pub fn sandbox_write(world: &mut World, sid: SandboxId, ipa: u64) -> bool {
    let Some(core) = world.monitor.records.get(&sid).map(|r| r.boot_core) else {
        return false;
    };
    match world.machine.s2_translate(core, ipa) {
        Translation::Hit(pa) => {
            world.machine.cache_fill(ContextId::Sandbox(sid), pa);
            true
        }
        Translation::Fault => false,
    }
}

const ATTACK_APP: &str = "adversary.victim";

fn ensure_app(world: &mut World, app: &str) -> crate::error::Result<()> {
    if !world.images.contains_key(app) {
        world.install_app(app, format!("{app} image").as_bytes())?;
    }
    Ok(())
}

fn victim(world: &mut World) -> crate::error::Result<SandboxId> {
    ensure_app(world, ATTACK_APP)?;
    world.create_sandbox(
        ATTACK_APP,
        &CreateOptions {
            max_cores: 2,
            ..CreateOptions::default()
        },
    )
}

/// What an attack step observed.
struct Observed {
    leaked: u64,
    stopped: bool,
    detail: String,
}

/// Runs one attack against `world` and reports whether it was blocked.
pub fn run_attack(world: &mut World, kind: AttackKind) -> AttackOutcome {
    world.record(
        Actor::Adversary,
        "attack",
        json!({"kind": kind.name()}),
        "start",
    );
    let obs = match kind {
        AttackKind::MaliciousImageSwap => image_swap(world),
        AttackKind::OverlappingMemoryConfig => overlapping_memory(world),
        AttackKind::DoubleCoreAlloc => double_core(world),
        AttackKind::IoEavesdrop => io_eavesdrop(world),
        AttackKind::CacheDirectAttack => cache_direct(world),
        AttackKind::DmaBypass => dma_bypass(world),
        AttackKind::StaleTlbRead => stale_tlb(world),
    };
    let (obs, violations) = match obs {
        Ok(o) => {
            let v = check_invariants(world);
            (o, v)
        }
        Err(e) => (
            Observed {
                leaked: 0,
                stopped: true,
                detail: format!("setup failed: {e}"),
            },
            Vec::new(),
        ),
    };
    let blocked = obs.leaked == 0 && violations.is_empty();
    let mechanism = if blocked && obs.stopped {
        kind.defense().to_string()
    } else if blocked {
        "no effect".to_string()
    } else {
        "none".to_string()
    };
    let outcome = AttackOutcome {
        kind,
        blocked,
        mechanism,
        leaked_bytes: obs.leaked,
        violations,
        detail: obs.detail,
    };
    world.record(
        Actor::Adversary,
        "attack",
        json!({"kind": kind.name(), "mechanism": outcome.mechanism, "leaked_bytes": outcome.leaked_bytes, "violations": outcome.violations.len()}),
        if blocked { "blocked" } else { "succeeded" },
    );
    outcome
}

fn image_swap(world: &mut World) -> crate::error::Result<Observed> {
    let app = "adversary.swapped";
    ensure_app(world, app)?;
    world.tamper_image(app);
    let len = world.images[app].payload.len() as u64;
    Ok(match world.create_sandbox(app, &CreateOptions::default()) {
        Err(Error::Integrity(m)) => Observed {
            leaked: 0,
            stopped: true,
            detail: m,
        },
        Err(e) => return Err(e),
        Ok(sid) => Observed {
            leaked: len,
            stopped: false,
            detail: format!("tampered image running as {sid}"),
        },
    })
}

fn overlapping_memory(world: &mut World) -> crate::error::Result<Observed> {
    let a = victim(world)?;
    let b = victim(world)?;
    let target = world
        .monitor
        .ledger
        .interval_of(b)
        .ok_or_else(|| Error::BadState("victim memory split".into()))?;
    let region = PhysRange::with_len(target.start, BLOCK_2M);
    let verdict = world.verify_region_legality(a, region, AdjustOp::Attach)?;
    if !verdict.is_approved() {
        return Ok(Observed {
            leaked: 0,
            stopped: true,
            detail: format!("{verdict:?}"),
        });
    }
    world.attach_memory(a, region)?;
    sandbox_write(world, b, region.start);
    let readable = sandbox_write(world, a, region.start);
    Ok(Observed {
        leaked: if readable { region.len() } else { 0 },
        stopped: false,
        detail: format!("{b} block {region} attached to {a}"),
    })
}

fn double_core(world: &mut World) -> crate::error::Result<Observed> {
    let a = victim(world)?;
    ensure_app(world, ATTACK_APP)?;
    let core = world.monitor.records[&a].boot_core;
    let next = world.monitor.peek_next_id();
    let base = world.monitor.config.base_bytes;
    let memory = world.ros.cma.alloc(base, None, next)?;
    let channel = world.ros.shared.alloc(next)?;
    let spec = LaunchSpec {
        app_id: ATTACK_APP.to_string(),
        image: world.images[ATTACK_APP].clone(),
        core,
        memory,
        channel,
        quota: Quota {
            max_cores: 1,
            max_memory: base,
        },
    };
    Ok(match world.lock_and_launch(spec) {
        Err(Error::ResourceBusy(m)) => {
            world.ros.cma.free(memory);
            world.ros.shared.free(next);
            Observed {
                leaked: 0,
                stopped: true,
                detail: m,
            }
        }
        Err(e) => return Err(e),
        Ok(b) => Observed {
            leaked: 0,
            stopped: false,
            detail: format!("{b} launched on {a}'s {core}"),
        },
    })
}

fn find_device(
    world: &World,
    want: impl Fn(&crate::hw::PeripheralDesc) -> bool,
) -> Option<(DevId, PhysRange)> {
    world
        .machine
        .config
        .peripherals
        .iter()
        .filter(|p| world.monitor.ledger.dev_owner.get(&p.id) == Some(&ContextId::Ros))
        .find(|p| want(p))
        .map(|p| (p.id, p.mmio))
}

fn io_eavesdrop(world: &mut World) -> crate::error::Result<Observed> {
    let (dev, mmio) = find_device(world, |p| p.kind == PeripheralKind::Wifi)
        .or_else(|| find_device(world, |p| p.independent && p.kind != PeripheralKind::Gpu))
        .ok_or_else(|| Error::BadState("no switchable device".into()))?;
    let a = victim(world)?;
    // the rich OS has been using the device, so its translation is cached
    ros_probe(world, mmio.start);
    world.request_peripheral(a, dev)?;
    let leaked = ros_probe(world, mmio.start);
    Ok(Observed {
        leaked,
        stopped: leaked == 0,
        detail: format!("rich OS read of {dev} registers while held by {a}"),
    })
}

fn cache_direct(world: &mut World) -> crate::error::Result<Observed> {
    let a = victim(world)?;
    let gran = world.config.ros.adjust_granularity;
    let iv = world
        .monitor
        .ledger
        .interval_of(a)
        .ok_or_else(|| Error::BadState("victim memory split".into()))?;
    let next = world.ros.cma.clone().alloc(gran, Some(iv), a)?;
    let lines: Vec<u64> = next.chunks(BLOCK_2M).collect();

    // phase 1: rich OS warms the region, it moves to the sandbox, the
    // sandbox writes, the rich OS reads back
    for &pa in &lines {
        ros_probe(world, pa);
    }
    world.sos_attach(a, gran)?;
    for &pa in &lines {
        sandbox_write(world, a, pa);
    }
    let mut leaked: u64 = lines.iter().map(|&pa| ros_probe(world, pa)).sum();

    // phase 2: the sandbox writes its newest block and gives it back
    let top = *world
        .sandboxes
        .get(&a)
        .and_then(|r| r.mem_blocks.last())
        .ok_or_else(|| Error::BadState("no attached block".into()))?;
    let top_lines: Vec<u64> = top.chunks(BLOCK_2M).collect();
    for &pa in &top_lines {
        sandbox_write(world, a, pa);
    }
    world.sos_detach_top(a)?;
    leaked += top_lines
        .iter()
        .map(|&pa| ros_probe(world, pa))
        .sum::<u64>();
    Ok(Observed {
        leaked,
        stopped: leaked == 0,
        detail: format!(
            "probed {} lines around {next}",
            lines.len() + top_lines.len()
        ),
    })
}

fn dma_bypass(world: &mut World) -> crate::error::Result<Observed> {
    let a = victim(world)?;
    let (dev, _) = find_device(world, |p| p.dma_capable)
        .ok_or_else(|| Error::BadState("no DMA-capable device in the rich OS".into()))?;
    let iv = world
        .monitor
        .ledger
        .interval_of(a)
        .ok_or_else(|| Error::BadState("victim memory split".into()))?;
    let target = PhysRange::with_len(iv.start, crate::types::PAGE_4K);
    let allowed = world.dma_access(dev, target)?;
    Ok(Observed {
        leaked: if allowed { target.len() } else { 0 },
        stopped: !allowed,
        detail: format!("{dev} DMA into {a} at {target}"),
    })
}

fn stale_tlb(world: &mut World) -> crate::error::Result<Observed> {
    ensure_app(world, ATTACK_APP)?;
    let base = world.monitor.config.base_bytes;
    let next = world.monitor.peek_next_id();
    let region = world.ros.cma.clone().alloc(base, None, next)?;
    ros_probe(world, region.start);
    let a = victim(world)?;
    sandbox_write(world, a, region.start);
    let leaked = ros_probe(world, region.start);
    Ok(Observed {
        leaked,
        stopped: leaked == 0,
        detail: format!("rich OS translation of {region} cached before {a} launched"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;

    fn world() -> World {
        let mut cfg = WorldConfig::platform();
        cfg.autonomous = false;
        World::new(cfg).unwrap()
    }

    #[test]
    fn fresh_world_is_clean() {
        assert!(check_invariants(&world()).is_empty());
    }

    #[test]
    fn corrupted_ledger_is_excl_mem() {
        let mut w = world();
        let a = victim(&mut w).unwrap();
        let b = victim(&mut w).unwrap();
        let r = w.monitor.ledger.interval_of(a).unwrap();
        w.monitor
            .ledger_mut()
            .ram_owner
            .push(crate::monitor::RamGrant {
                range: PhysRange::with_len(r.start, BLOCK_2M),
                owner: b,
            });
        w.monitor.ledger_mut().ram_owner.sort();
        let v = check_invariants(&w);
        assert!(
            v.iter().any(|v| v.invariant == InvariantId::ExclMem),
            "{v:?}"
        );
    }

    #[test]
    fn stale_tlb_entry_is_sanity() {
        let mut w = world();
        let a = victim(&mut w).unwrap();
        let r = w.monitor.ledger.interval_of(a).unwrap();
        w.machine.tlb_insert(
            CoreId(0),
            crate::hw::TlbEntry {
                core: CoreId(0),
                context: ContextId::Ros,
                ipa_block: r.start,
                pa_block: r.start,
                granularity: crate::stage2::Granularity::Block2M,
            },
        );
        let v = check_invariants(&w);
        assert_eq!(
            v.iter().map(|v| v.invariant).collect::<Vec<_>>(),
            vec![InvariantId::Sanity]
        );
    }

    #[test]
    fn names_round_trip() {
        for k in AttackKind::ALL {
            assert_eq!(k.name().parse::<AttackKind>().unwrap(), k);
        }
    }
}
