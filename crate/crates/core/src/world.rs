//! The simulated system: machine, monitor, secure world, rich OS and sandbox
//! runtimes, driven by one event engine.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adversary::{check_invariants, check_sanity, AttackOutcome, ViolationReport};
use crate::engine::{Actor, CostKey, CostTable, Engine, SimTime, Trace};
use crate::error::Result;
use crate::hw::{Machine, MachineConfig};
use crate::monitor::{Monitor, MonitorConfig};
use crate::ros::{Ros, RosConfig};
use crate::scenario::Directive;
use crate::secure_world::{EncryptedImage, FnvHasher, SecureStore};
use crate::sos::{SandboxRuntime, SosConfig};
use crate::types::{DevId, SandboxId, MIB};

/// Defense switches. All on in a faithful system; tests turn one off at a
/// time to prove the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Defenses {
    pub verify: bool,
    pub sanitize: bool,
    pub legality_check: bool,
    pub smmu: bool,
}

impl Default for Defenses {
    fn default() -> Self {
        Defenses {
            verify: true,
            sanitize: true,
            legality_check: true,
            smmu: true,
        }
    }
}

impl Defenses {
    pub fn with_mutations(mutations: &[Mutation]) -> Self {
        let mut d = Defenses::default();
        for m in mutations {
            d.apply(*m);
        }
        d
    }

    pub fn apply(&mut self, m: Mutation) {
        match m {
            Mutation::NoVerify => self.verify = false,
            Mutation::NoSanitize => self.sanitize = false,
            Mutation::NoLegalityCheck => self.legality_check = false,
            Mutation::NoSmmu => self.smmu = false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    NoVerify,
    NoSanitize,
    NoLegalityCheck,
    NoSmmu,
}

impl Mutation {
    pub const ALL: [Mutation; 4] = [
        Mutation::NoVerify,
        Mutation::NoSanitize,
        Mutation::NoLegalityCheck,
        Mutation::NoSmmu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::NoVerify => "no_verify",
            Mutation::NoSanitize => "no_sanitize",
            Mutation::NoLegalityCheck => "no_legality_check",
            Mutation::NoSmmu => "no_smmu",
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mutation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Mutation::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mutation `{s}`"))
    }
}

/// Which mechanism isolates sandbox memory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IsolationMode {
    /// Per-context stage-2 tables.
    #[default]
    Leap,
    /// Address-space-controller regions (8 regions, 2 per sandbox, 1 for
    /// the secure world).
    Tzasc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub machine: MachineConfig,
    pub monitor: MonitorConfig,
    pub ros: RosConfig,
    pub sos: SosConfig,
    pub costs: CostTable,
    pub defenses: Defenses,
    pub mode: IsolationMode,
    /// Record a structured trace.
    pub trace: bool,
    /// Schedule periodic sandbox ticks and other autonomous events. Off for
    /// model checking, where only explicit operations move the state.
    pub autonomous: bool,
    /// Schedule rich-OS GUI rendering frames.
    pub render: bool,
    pub check_invariants: bool,
    pub seed: u64,
}

impl WorldConfig {
    /// The eight-core, 4 GB platform.
    pub fn platform() -> Self {
        WorldConfig {
            machine: MachineConfig::default(),
            monitor: MonitorConfig::default(),
            ros: RosConfig::default(),
            sos: SosConfig::default(),
            costs: CostTable::default(),
            defenses: Defenses::default(),
            mode: IsolationMode::Leap,
            trace: true,
            autonomous: true,
            render: false,
            check_invariants: true,
            seed: 0,
        }
    }

    /// Three cores, sixteen 2 MB frames, one peripheral; no clock-driven
    /// behavior and no trace.
    pub fn small() -> Self {
        WorldConfig {
            machine: MachineConfig::small(),
            monitor: MonitorConfig {
                base_bytes: 4 * MIB,
                mem_limit: 8 * MIB,
                ..MonitorConfig::default()
            },
            ros: RosConfig::small(),
            sos: SosConfig::default(),
            costs: CostTable::default(),
            defenses: Defenses::default(),
            mode: IsolationMode::Leap,
            trace: false,
            autonomous: false,
            render: false,
            check_invariants: false,
            seed: 0,
        }
    }

    pub fn with_defenses(mut self, d: Defenses) -> Self {
        self.defenses = d;
        self
    }
}

/// Everything the event engine can dispatch.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Directive(Box<Directive>),
    Tick(SandboxId),
    PhaseEnd(SandboxId),
    WaitTimeout { dev: DevId, sandbox: SandboxId },
    DeviceIdle(DevId),
    Render,
}

/// Running tallies that feed the metrics report.
#[derive(Debug, Clone, Default)]
pub struct Stats {
    pub core_increase_ms: Vec<f64>,
    pub core_decrease_ms: Vec<f64>,
    pub mem_attach_ms: Vec<f64>,
    pub mem_detach_ms: Vec<f64>,
    pub peripheral_switch_ms: Vec<f64>,
    pub frozen_gui_ms: Vec<f64>,
    pub max_concurrent: usize,
    pub device_faults: usize,
    pub violations: Vec<ViolationReport>,
    pub attacks: Vec<AttackOutcome>,
    pub events_dispatched: usize,
    pub directive_errors: usize,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub machine: Machine,
    pub monitor: Monitor,
    pub secure: SecureStore,
    pub ros: Ros,
    pub sandboxes: BTreeMap<SandboxId, SandboxRuntime>,
    pub engine: Engine<Action>,
    pub trace: Trace,
    pub stats: Stats,
    /// Encrypted images as installed in the rich OS, by app id.
    pub images: BTreeMap<String, EncryptedImage>,
    /// Driver modules the rich OS hands to sandboxes, by device.
    pub driver_blobs: BTreeMap<DevId, Vec<u8>>,
    /// Scenario handle -> sandbox id.
    pub handles: BTreeMap<String, SandboxId>,
    pub rng: ChaCha8Rng,
    checked_generation: (u64, u64),
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        let machine = Machine::new(config.machine.clone())?;
        config
            .costs
            .validate()
            .map_err(crate::error::Error::Config)?;
        let ros = Ros::new(&config.ros, &machine)?;
        let monitor = Monitor::with_config(&machine, config.monitor.clone());
        let mut secure = SecureStore::new(config.seed ^ 0x7ea5_5ec7_0b0f_f1ce);
        let mut driver_blobs = BTreeMap::new();
        for p in &config.machine.peripherals {
            let blob = format!("{}.ko", p.name).into_bytes();
            secure.register_driver(p.id, &blob);
            driver_blobs.insert(p.id, blob);
        }
        let mut world = World {
            trace: Trace::new(config.trace),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            machine,
            monitor,
            secure,
            ros,
            sandboxes: BTreeMap::new(),
            engine: Engine::new(),
            stats: Stats::default(),
            images: BTreeMap::new(),
            driver_blobs,
            handles: BTreeMap::new(),
            checked_generation: (u64::MAX, u64::MAX),
            config,
        };
        if world.config.render && world.config.autonomous {
            let period = SimTime::from_ms_f64(world.config.costs.render_period_ms);
            world.engine.schedule(period, Actor::Ros, Action::Render);
        }
        Ok(world)
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    /// Registers an app with the secure world and installs its encrypted
    /// image in the rich OS (the creation stage).
    pub fn install_app(&mut self, app_id: &str, payload: &[u8]) -> Result<()> {
        self.secure.register_image(app_id, payload)?;
        let img = self.secure.encrypt(app_id, payload)?;
        self.images.insert(app_id.to_string(), img);
        self.record(
            Actor::SecureWorld,
            "register_image",
            json!({"app": app_id, "bytes": payload.len()}),
            "ok",
        );
        Ok(())
    }

    /// Corrupts one byte of the installed image, as a compromised rich OS would.
    pub fn tamper_image(&mut self, app_id: &str) {
        if let Some(img) = self.images.get_mut(app_id) {
            if let Some(b) = img.payload.first_mut() {
                *b ^= 0x5a;
            } else {
                img.payload.push(0x5a);
            }
        }
    }

    pub fn tamper_driver(&mut self, dev: DevId) {
        if let Some(b) = self.driver_blobs.get_mut(&dev) {
            b.extend_from_slice(b"+implant");
        }
    }

    pub(crate) fn record(
        &mut self,
        actor: Actor,
        op: &str,
        args: serde_json::Value,
        verdict: &str,
    ) {
        let now = self.now();
        self.trace.push(now, actor, op, args, verdict);
    }

    /// Looks up a latency and writes a cost record naming it.
    pub(crate) fn charge(&mut self, actor: Actor, key: CostKey) -> SimTime {
        let d = self.config.costs.get(key);
        if self.trace.enabled() {
            let mut args = json!({"name": key.to_string(), "duration_us": d.as_us_f64()});
            if let CostKey::Copy(bytes) = key {
                args["bytes"] = json!(bytes);
            }
            self.record(actor, "cost", args, "charged");
        }
        d
    }

    pub fn running_sandboxes(&self) -> usize {
        self.monitor.records.len()
    }

    pub fn live_sandbox_ids(&self) -> Vec<SandboxId> {
        self.monitor.records.keys().copied().collect()
    }

    pub(crate) fn note_concurrency(&mut self) {
        let n = self.running_sandboxes();
        self.stats.max_concurrent = self.stats.max_concurrent.max(n);
    }

    pub fn schedule_directive(&mut self, at: SimTime, d: Directive) {
        self.engine
            .schedule_at(at, Actor::System, Action::Directive(Box::new(d)));
    }

    /// Dispatches all events up to `t_end`. With invariant checking on,
    /// every event that changed the machine is followed by a full check.
    pub fn run_until(&mut self, t_end: SimTime) -> usize {
        let mut n = 0;
        while let Some(ev) = self.engine.pop_due(t_end) {
            self.dispatch(&ev.action);
            n += 1;
            self.stats.events_dispatched += 1;
            self.after_event(&ev.action);
        }
        self.engine.advance_to(t_end);
        n
    }

    fn after_event(&mut self, action: &Action) {
        if !self.config.check_invariants {
            return;
        }
        let gen = (
            self.machine.generation() ^ self.monitor.generation().rotate_left(32),
            self.machine.cache_generation(),
        );
        if gen == self.checked_generation {
            return;
        }
        // cache and TLB traffic alone can only break SANITY
        let found = if gen.0 == self.checked_generation.0 {
            check_sanity(self)
        } else {
            check_invariants(self)
        };
        self.checked_generation = gen;
        if found.is_empty() {
            return;
        }
        let label = action_label(action);
        for mut v in found {
            v.event = Some(label.clone());
            self.record(
                Actor::System,
                "violation",
                json!({"invariant": v.invariant.name(), "detail": v.detail}),
                "violated",
            );
            self.stats.violations.push(v);
        }
    }

    fn dispatch(&mut self, action: &Action) {
        match *action {
            Action::Directive(ref d) => {
                if let Err(e) = self.apply_directive(d) {
                    self.stats.directive_errors += 1;
                    self.record(
                        Actor::System,
                        "directive_error",
                        json!({"directive": d.op_name(), "error": e.to_string()}),
                        "error",
                    );
                }
            }
            Action::Tick(id) => self.on_tick(id),
            Action::PhaseEnd(id) => self.on_phase_end(id),
            Action::WaitTimeout { dev, sandbox } => self.on_wait_timeout(dev, sandbox),
            Action::DeviceIdle(dev) => self.on_device_idle(dev),
            Action::Render => self.on_render(),
        }
    }

    /// Canonical digest of the logical protocol state. Clock values, trace,
    /// statistics and workload progress are excluded.
    pub fn state_digest(&self) -> u64 {
        let mut h = FnvHasher::default();
        self.machine.cores.hash(&mut h);
        self.machine.tlbs.hash(&mut h);
        self.machine.cache.hash(&mut h);
        self.machine.tables.hash(&mut h);
        self.monitor.hash_state(&mut h);
        self.ros.hash_state(&mut h);
        for (id, rt) in &self.sandboxes {
            id.hash(&mut h);
            rt.hash_state(&mut h);
        }
        h.finish()
    }

    /// Sandboxes that hold resources, in id order.
    pub fn live_set(&self) -> BTreeSet<SandboxId> {
        self.monitor.records.keys().copied().collect()
    }
}

fn action_label(a: &Action) -> String {
    match a {
        Action::Directive(d) => format!("directive:{}", d.op_name()),
        Action::Tick(id) => format!("tick:{id}"),
        Action::PhaseEnd(id) => format!("phase_end:{id}"),
        Action::WaitTimeout { dev, sandbox } => format!("wait_timeout:{dev}:{sandbox}"),
        Action::DeviceIdle(dev) => format!("device_idle:{dev}"),
        Action::Render => "render".to_string(),
    }
}
