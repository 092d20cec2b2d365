//! Bounded exhaustive exploration of the small configuration.
//!
//! States are deduplicated by [`World::state_digest`], which ignores clocks,
//! so the search runs over logical protocol states.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adversary::{check_invariants, ros_probe, ViolationReport};
use crate::engine::{Actor, TraceRecord};
use crate::error::{Error, Result};
use crate::monitor::{AdjustOp, CoreOwner, LaunchSpec};
use crate::ros::CreateOptions;
use crate::scenario::ScenarioFile;
use crate::sos::Quota;
use crate::types::{ContextId, DevId, PhysRange, SandboxId, BLOCK_2M, PAGE_4K};
use crate::world::{Defenses, World, WorldConfig};

pub const HONEST_APP: &str = "explore.app";
pub const TAMPERED_APP: &str = "explore.tampered";

/// One step of an explored schedule. `k` indexes the live sandboxes in id
/// order at the time the step runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ExploreOp {
    Create,
    Attach {
        k: usize,
    },
    Detach {
        k: usize,
    },
    AddCore {
        k: usize,
    },
    RemoveCore {
        k: usize,
    },
    Request {
        k: usize,
    },
    Release {
        k: usize,
    },
    Terminate {
        k: usize,
    },
    /// The sandbox writes a line in each of its blocks.
    Touch {
        k: usize,
    },
    /// The rich OS reads every frame and device page it can reach, warming
    /// its TLB and the cache.
    RosTouch,
    /// Launch of an image the rich OS corrupted.
    CreateTampered,
    /// The rich OS asks the monitor to give `victim`'s first frame to `k`.
    MaliciousAttach {
        k: usize,
        victim: usize,
    },
    /// The rich OS launches a new sandbox on `k`'s boot core.
    DoubleLaunch {
        k: usize,
    },
}

impl ExploreOp {
    pub fn name(self) -> &'static str {
        match self {
            ExploreOp::Create => "create",
            ExploreOp::Attach { .. } => "attach",
            ExploreOp::Detach { .. } => "detach",
            ExploreOp::AddCore { .. } => "add_core",
            ExploreOp::RemoveCore { .. } => "remove_core",
            ExploreOp::Request { .. } => "request",
            ExploreOp::Release { .. } => "release",
            ExploreOp::Terminate { .. } => "terminate",
            ExploreOp::Touch { .. } => "touch",
            ExploreOp::RosTouch => "ros_touch",
            ExploreOp::CreateTampered => "create_tampered",
            ExploreOp::MaliciousAttach { .. } => "malicious_attach",
            ExploreOp::DoubleLaunch { .. } => "double_launch",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alphabet {
    /// Protocol operations only.
    Honest,
    /// Adds a compromised rich OS: tampered images, forged requests and raw
    /// probes of every frame, device page and DMA target.
    #[default]
    Adversarial,
}

impl Alphabet {
    /// Every operation applicable with `live` sandboxes.
    pub fn ops(self, live: usize) -> Vec<ExploreOp> {
        let mut ops = vec![ExploreOp::Create, ExploreOp::RosTouch];
        for k in 0..live {
            ops.extend([
                ExploreOp::Attach { k },
                ExploreOp::Detach { k },
                ExploreOp::AddCore { k },
                ExploreOp::RemoveCore { k },
                ExploreOp::Request { k },
                ExploreOp::Release { k },
                ExploreOp::Terminate { k },
                ExploreOp::Touch { k },
            ]);
        }
        if self == Alphabet::Adversarial {
            ops.push(ExploreOp::CreateTampered);
            for k in 0..live {
                ops.push(ExploreOp::DoubleLaunch { k });
                for victim in (0..live).filter(|&v| v != k) {
                    ops.push(ExploreOp::MaliciousAttach { k, victim });
                }
            }
        }
        ops
    }

    pub fn probes(self) -> bool {
        self == Alphabet::Adversarial
    }
}

#[derive(Debug, Clone)]
pub struct ExploreConfig {
    pub world: WorldConfig,
    pub alphabet: Alphabet,
    pub depth: usize,
    /// Maximum number of distinct states.
    pub budget: usize,
    /// Scenario the machine and defenses were taken from; `None` is the
    /// small platform.
    pub origin: Option<ScenarioFile>,
}

impl ExploreConfig {
    pub fn small(defenses: Defenses, depth: usize) -> Self {
        ExploreConfig {
            world: WorldConfig::small().with_defenses(defenses),
            alphabet: Alphabet::Adversarial,
            depth,
            budget: 2_000_000,
            origin: None,
        }
    }

    /// Explores the platform, costs and defenses of a scenario. Its apps and
    /// timeline are not used.
    pub fn from_scenario(s: &ScenarioFile, depth: usize) -> Self {
        let mut world = s.world_config();
        world.trace = false;
        ExploreConfig {
            world,
            alphabet: Alphabet::Adversarial,
            depth,
            budget: 2_000_000,
            origin: Some(s.clone()),
        }
    }
}

/// Something bad observed in a state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    Violation(ViolationReport),
    /// A raw probe by the rich OS or one of its DMA masters learned bytes
    /// it has no right to.
    Leak {
        probe: String,
        addr: u64,
        bytes: u64,
    },
}

impl Finding {
    /// Grouping key for keeping a few counterexamples per kind.
    pub fn kind(&self) -> String {
        match self {
            Finding::Violation(v) => v.invariant.name().to_string(),
            Finding::Leak { probe, .. } => format!("leak:{probe}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub defenses: Defenses,
    pub ops: Vec<ExploreOp>,
    pub findings: Vec<Finding>,
    pub state_digest: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExploreReport {
    pub states_visited: usize,
    pub transitions: usize,
    /// Deepest level that produced a new state.
    pub max_depth_reached: usize,
    pub violating_states: usize,
    pub leaking_states: usize,
    pub counterexamples: Vec<Counterexample>,
}

impl ExploreReport {
    pub fn clean(&self) -> bool {
        self.violating_states == 0 && self.leaking_states == 0
    }
}

/// The starting state: both apps installed, nothing running.
pub fn initial_world(cfg: &WorldConfig) -> Result<World> {
    let mut cfg = cfg.clone();
    cfg.autonomous = false;
    cfg.check_invariants = false;
    let mut w = World::new(cfg)?;
    w.install_app(HONEST_APP, b"explored sandbox image")?;
    w.install_app(TAMPERED_APP, b"explored sandbox image, tampered")?;
    w.tamper_image(TAMPERED_APP);
    Ok(w)
}

/// Depth-first search over every schedule of at most `depth` steps.
///
/// A state is expanded again only when it is reached by a shorter path, so
/// the recorded counterexamples are shortest ones.
pub fn explore(cfg: &ExploreConfig) -> Result<ExploreReport> {
    let root = initial_world(&cfg.world)?;
    let mut s = Search {
        cfg,
        report: ExploreReport::default(),
        seen: HashMap::new(),
        bad: HashMap::new(),
        best: BTreeMap::new(),
        path: Vec::new(),
    };
    s.seen.insert(root.state_digest(), 0);
    if !s.visit(&root) {
        s.dfs(&root)?;
    }
    let mut report = s.report;
    let mut cxs: Vec<Counterexample> = s.best.into_values().collect();
    cxs.sort_by(|a, b| (a.ops.len(), &a.ops).cmp(&(b.ops.len(), &b.ops)));
    cxs.dedup_by(|a, b| a.ops == b.ops);
    report.counterexamples = cxs;
    Ok(report)
}

struct Search<'a> {
    cfg: &'a ExploreConfig,
    report: ExploreReport,
    /// Shallowest depth each state was reached at.
    seen: HashMap<u64, usize>,
    bad: HashMap<u64, Vec<Finding>>,
    /// Shortest counterexample per finding kind.
    best: BTreeMap<String, Counterexample>,
    path: Vec<ExploreOp>,
}

impl Search<'_> {
    fn dfs(&mut self, world: &World) -> Result<()> {
        if self.path.len() >= self.cfg.depth {
            return Ok(());
        }
        let live = world.live_sandbox_ids().len();
        for op in self.cfg.alphabet.ops(live) {
            let mut next = world.clone();
            // failed steps still count: a refused request may leave traces
            let _ = apply_op(&mut next, op);
            self.report.transitions += 1;
            let digest = next.state_digest();
            let depth = self.path.len() + 1;
            let fresh = match self.seen.get(&digest) {
                Some(&d) if d <= depth => continue,
                Some(_) => false,
                None => true,
            };
            self.seen.insert(digest, depth);
            if self.seen.len() > self.cfg.budget {
                return Err(Error::BudgetExceeded {
                    cap: self.cfg.budget,
                    visited: self.report.states_visited,
                    violating: self.report.violating_states + self.report.leaking_states,
                });
            }
            self.path.push(op);
            self.report.max_depth_reached = self.report.max_depth_reached.max(depth);
            let broken = if fresh {
                self.visit(&next)
            } else if let Some(f) = self.bad.get(&digest).cloned() {
                self.keep(digest, f);
                true
            } else {
                false
            };
            // a broken state is reported, not explored further
            if !broken {
                self.dfs(&next)?;
            }
            self.path.pop();
        }
        Ok(())
    }

    fn visit(&mut self, world: &World) -> bool {
        self.report.states_visited += 1;
        let findings = observe(world, self.cfg.alphabet.probes());
        if findings.is_empty() {
            return false;
        }
        if findings.iter().any(|f| matches!(f, Finding::Violation(_))) {
            self.report.violating_states += 1;
        } else {
            self.report.leaking_states += 1;
        }
        let digest = world.state_digest();
        self.bad.insert(digest, findings.clone());
        self.keep(digest, findings);
        true
    }

    fn keep(&mut self, digest: u64, findings: Vec<Finding>) {
        for f in &findings {
            let shorter = self
                .best
                .get(&f.kind())
                .is_none_or(|c| c.ops.len() > self.path.len());
            if shorter {
                self.best.insert(
                    f.kind(),
                    Counterexample {
                        defenses: self.cfg.world.defenses,
                        ops: self.path.clone(),
                        findings: findings.clone(),
                        state_digest: digest,
                    },
                );
            }
        }
    }
}

/// Invariant violations plus, with `probes`, everything a raw read or DMA
/// by the rich OS could learn. Probes run on a copy.
pub fn observe(world: &World, probes: bool) -> Vec<Finding> {
    let mut out: Vec<Finding> = check_invariants(world)
        .into_iter()
        .map(Finding::Violation)
        .collect();
    if !probes {
        return out;
    }
    let mut w = world.clone();
    let ram = w.machine.config.ram_range();
    for pa in ram.chunks(BLOCK_2M) {
        let bytes = ros_probe(&mut w, pa);
        if bytes > 0 {
            out.push(Finding::Leak {
                probe: "ros_read".into(),
                addr: pa,
                bytes,
            });
        }
    }
    let devices: Vec<(DevId, PhysRange, bool)> = w
        .machine
        .config
        .peripherals
        .iter()
        .map(|p| (p.id, p.mmio, p.dma_capable))
        .collect();
    for &(_, mmio, _) in &devices {
        let bytes = ros_probe(&mut w, mmio.start);
        if bytes > 0 {
            out.push(Finding::Leak {
                probe: "ros_mmio".into(),
                addr: mmio.start,
                bytes,
            });
        }
    }
    for &(dev, _, dma) in &devices {
        if !dma || w.monitor.ledger.dev_owner.get(&dev) != Some(&ContextId::Ros) {
            continue;
        }
        for pa in ram.chunks(BLOCK_2M) {
            let target = PhysRange::with_len(pa, PAGE_4K);
            let entitled = w.monitor.ledger.ram_accessors(pa).contains(&ContextId::Ros);
            if !entitled && w.dma_access(dev, target).unwrap_or(false) {
                out.push(Finding::Leak {
                    probe: "dma".into(),
                    addr: pa,
                    bytes: target.len(),
                });
            }
        }
    }
    out
}

fn nth_live(world: &World, k: usize) -> Result<SandboxId> {
    world
        .live_sandbox_ids()
        .get(k)
        .copied()
        .ok_or_else(|| Error::BadState(format!("no live sandbox #{k}")))
}

/// Applies one step through the same entry points the scenario runner and
/// the attack catalogue use.
pub fn apply_op(world: &mut World, op: ExploreOp) -> Result<()> {
    world.record(Actor::Adversary, "explore_step", json!(op), "apply");
    let dev = DevId(0);
    let gran = world.config.ros.adjust_granularity;
    match op {
        ExploreOp::Create => {
            world.create_sandbox(HONEST_APP, &quota_two())?;
        }
        ExploreOp::CreateTampered => {
            world.create_sandbox(TAMPERED_APP, &quota_two())?;
        }
        ExploreOp::Attach { k } => {
            let sid = nth_live(world, k)?;
            world.sos_attach(sid, gran)?;
        }
        ExploreOp::Detach { k } => {
            let sid = nth_live(world, k)?;
            world.sos_detach_top(sid)?;
        }
        ExploreOp::AddCore { k } => {
            let sid = nth_live(world, k)?;
            world.sos_increase_core(sid)?;
        }
        ExploreOp::RemoveCore { k } => {
            let sid = nth_live(world, k)?;
            world.sos_release_any_core(sid)?;
        }
        ExploreOp::Request { k } => {
            let sid = nth_live(world, k)?;
            world.request_peripheral(sid, dev)?;
        }
        ExploreOp::Release { k } => {
            let sid = nth_live(world, k)?;
            world.release_peripheral(sid, dev)?;
        }
        ExploreOp::Terminate { k } => {
            let sid = nth_live(world, k)?;
            world.terminate(sid)?;
        }
        ExploreOp::Touch { k } => {
            let sid = nth_live(world, k)?;
            world.sandbox_touch(sid, usize::MAX)?;
        }
        ExploreOp::RosTouch => {
            let ram = world.machine.config.ram_range();
            let pages: Vec<u64> = ram
                .chunks(BLOCK_2M)
                .filter(|&pa| {
                    world
                        .monitor
                        .ledger
                        .ram_accessors(pa)
                        .contains(&ContextId::Ros)
                })
                .chain(
                    world
                        .machine
                        .config
                        .peripherals
                        .iter()
                        .filter(|p| {
                            world.monitor.ledger.dev_owner.get(&p.id) == Some(&ContextId::Ros)
                        })
                        .map(|p| p.mmio.start),
                )
                .collect();
            for pa in pages {
                ros_probe(world, pa);
            }
        }
        ExploreOp::MaliciousAttach { k, victim } => {
            let sid = nth_live(world, k)?;
            let target = nth_live(world, victim)?;
            let iv = world
                .monitor
                .ledger
                .interval_of(target)
                .ok_or_else(|| Error::BadState(format!("{target} memory split")))?;
            let region = PhysRange::with_len(iv.start, gran);
            if world
                .verify_region_legality(sid, region, AdjustOp::Attach)?
                .is_approved()
            {
                world.attach_memory(sid, region)?;
            }
        }
        ExploreOp::DoubleLaunch { k } => {
            let sid = nth_live(world, k)?;
            double_launch(world, sid)?;
        }
    }
    Ok(())
}

fn quota_two() -> CreateOptions {
    CreateOptions {
        max_cores: 2,
        core_class: None,
        ..CreateOptions::default()
    }
}

fn double_launch(world: &mut World, sid: SandboxId) -> Result<()> {
    let core = world
        .monitor
        .records
        .get(&sid)
        .map(|r| r.boot_core)
        .ok_or(Error::UnknownSandbox(sid))?;
    debug_assert_ne!(
        world.monitor.ledger.core_owner.get(&core),
        Some(&CoreOwner::Context(ContextId::Ros))
    );
    let next = world.monitor.peek_next_id();
    let base = world.monitor.config.base_bytes;
    let memory = world.ros.cma.alloc(base, None, next)?;
    let channel = match world.ros.shared.alloc(next) {
        Ok(c) => c,
        Err(e) => {
            world.ros.cma.free(memory);
            return Err(e);
        }
    };
    let spec = LaunchSpec {
        app_id: HONEST_APP.to_string(),
        image: world.images[HONEST_APP].clone(),
        core,
        memory,
        channel,
        quota: Quota {
            max_cores: 1,
            max_memory: base,
        },
    };
    if let Err(e) = world.lock_and_launch(spec) {
        world.ros.cma.free(memory);
        world.ros.shared.free(next);
        return Err(e);
    }
    Ok(())
}

/// Re-runs a schedule from the initial state with tracing on. Returns the
/// final world and what it exhibits.
pub fn replay(cfg: &ExploreConfig, ops: &[ExploreOp]) -> Result<(World, Vec<Finding>)> {
    let mut wcfg = cfg.world.clone();
    wcfg.trace = true;
    let probes = cfg.alphabet.probes();
    let mut w = initial_world(&wcfg)?;
    w.record(
        Actor::System,
        "counterexample",
        json!({
            "defenses": wcfg.defenses,
            "alphabet": cfg.alphabet,
            "ops": ops,
            "scenario": cfg.origin,
        }),
        "replay",
    );
    for &op in ops {
        if let Err(e) = apply_op(&mut w, op) {
            w.record(
                Actor::System,
                "explore_step",
                json!({"op": op.name(), "error": e.to_string()}),
                "error",
            );
        }
    }
    let findings = observe(&w, probes);
    for f in &findings {
        w.record(Actor::System, "finding", json!(f), "violated");
    }
    let digest = w.state_digest();
    w.record(
        Actor::System,
        "end",
        json!({"state_digest": format!("{digest:016x}"), "findings": findings.len()}),
        "ok",
    );
    Ok((w, findings))
}

/// Rebuilds the configuration and schedule recorded in the header of a
/// counterexample trace.
pub fn counterexample_from_trace(
    records: &[TraceRecord],
) -> Result<(ExploreConfig, Vec<ExploreOp>)> {
    let head = records
        .iter()
        .find(|r| r.op == "counterexample")
        .ok_or_else(|| Error::Parse("trace has no counterexample header".into()))?;
    let field = |k: &str| head.args.get(k).cloned().unwrap_or_default();
    let bad = |e: serde_json::Error| Error::Parse(format!("counterexample header: {e}"));
    let defenses: Defenses = serde_json::from_value(field("defenses")).map_err(bad)?;
    let ops: Vec<ExploreOp> = serde_json::from_value(field("ops")).map_err(bad)?;
    let alphabet: Alphabet = serde_json::from_value(field("alphabet")).map_err(bad)?;
    let origin: Option<ScenarioFile> = serde_json::from_value(field("scenario")).map_err(bad)?;
    let mut cfg = match &origin {
        Some(s) => ExploreConfig::from_scenario(s, ops.len()),
        None => ExploreConfig::small(defenses, ops.len()),
    };
    cfg.world.defenses = defenses;
    cfg.alphabet = alphabet;
    Ok((cfg, ops))
}
