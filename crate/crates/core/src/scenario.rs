//! Scenario files: a versioned TOML document naming the platform, the apps
//! and a time-sorted list of directives. Also the seeded generator of honest
//! random scenarios.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adversary::{run_attack, AttackKind};
use crate::engine::{Actor, CostTable, Direction, SimTime};
use crate::error::{Error, Result};
use crate::hw::{CoreClass, MachineConfig};
use crate::ros::CreateOptions;
use crate::sos::Workload;
use crate::types::{DevId, SandboxId, MIB};
use crate::world::{Defenses, IsolationMode, Mutation, World, WorldConfig};

pub const SCENARIO_FORMAT: &str = "leap-scenario/1";

fn one() -> usize {
    1
}
fn default_lines() -> usize {
    16
}
fn default_true() -> bool {
    true
}

/// One timeline operation. Sandboxes are named by scenario handles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Directive {
    CreateSandbox {
        handle: String,
        app: String,
        #[serde(default = "one")]
        max_cores: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_memory_mb: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        core_class: Option<CoreClass>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        memory_mb: Option<u64>,
    },
    Workload {
        sandbox: String,
        workload: Workload,
    },
    SendData {
        sandbox: String,
        bytes: u64,
        #[serde(default = "default_true")]
        to_sandbox: bool,
    },
    RequestPeripheral {
        sandbox: String,
        device: u32,
    },
    ReleasePeripheral {
        sandbox: String,
        device: u32,
    },
    AttachMemory {
        sandbox: String,
        mb: u64,
    },
    DetachMemory {
        sandbox: String,
    },
    AddCore {
        sandbox: String,
    },
    RemoveCore {
        sandbox: String,
    },
    Terminate {
        sandbox: String,
    },
    RosUseDevice {
        device: u32,
        duration_ms: f64,
    },
    TouchMemory {
        sandbox: String,
        #[serde(default = "default_lines")]
        lines: usize,
    },
    Attack {
        kind: AttackKind,
    },
}

impl Directive {
    pub fn op_name(&self) -> &'static str {
        match self {
            Directive::CreateSandbox { .. } => "create_sandbox",
            Directive::Workload { .. } => "workload",
            Directive::SendData { .. } => "send_data",
            Directive::RequestPeripheral { .. } => "request_peripheral",
            Directive::ReleasePeripheral { .. } => "release_peripheral",
            Directive::AttachMemory { .. } => "attach_memory",
            Directive::DetachMemory { .. } => "detach_memory",
            Directive::AddCore { .. } => "add_core",
            Directive::RemoveCore { .. } => "remove_core",
            Directive::Terminate { .. } => "terminate",
            Directive::RosUseDevice { .. } => "ros_use_device",
            Directive::TouchMemory { .. } => "touch_memory",
            Directive::Attack { .. } => "attack",
        }
    }

    fn sandbox(&self) -> Option<&str> {
        match self {
            Directive::Workload { sandbox, .. }
            | Directive::SendData { sandbox, .. }
            | Directive::RequestPeripheral { sandbox, .. }
            | Directive::ReleasePeripheral { sandbox, .. }
            | Directive::AttachMemory { sandbox, .. }
            | Directive::DetachMemory { sandbox }
            | Directive::AddCore { sandbox }
            | Directive::RemoveCore { sandbox }
            | Directive::Terminate { sandbox }
            | Directive::TouchMemory { sandbox, .. } => Some(sandbox),
            _ => None,
        }
    }

    fn device(&self) -> Option<u32> {
        match self {
            Directive::RequestPeripheral { device, .. }
            | Directive::ReleasePeripheral { device, .. }
            | Directive::RosUseDevice { device, .. } => Some(*device),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedDirective {
    pub at_ms: f64,
    #[serde(flatten)]
    pub directive: Directive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppSpec {
    pub id: String,
    /// Image contents; defaults to a string derived from the id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
    /// The rich OS corrupts the installed image.
    #[serde(default)]
    pub tampered: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    #[default]
    Default,
    Small,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub format: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: IsolationMode,
    /// Run until this time; defaults to one second after the last directive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_ms: Option<f64>,
    #[serde(default)]
    pub mutate: Vec<Mutation>,
    #[serde(default)]
    pub render: bool,
    #[serde(default)]
    pub platform: Platform,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machine: Option<MachineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<CostTable>,
    #[serde(default)]
    pub apps: Vec<AppSpec>,
    #[serde(default)]
    pub timeline: Vec<TimedDirective>,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        ScenarioFile {
            format: SCENARIO_FORMAT.to_string(),
            seed: 0,
            mode: IsolationMode::Leap,
            horizon_ms: None,
            mutate: Vec::new(),
            render: false,
            platform: Platform::Default,
            machine: None,
            costs: None,
            apps: Vec::new(),
            timeline: Vec::new(),
        }
    }
}

impl ScenarioFile {
    /// Parses and validates. Parse errors carry the line and column.
    pub fn parse(text: &str) -> Result<Self> {
        let s: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn horizon(&self) -> SimTime {
        let last = self.timeline.iter().map(|d| d.at_ms).fold(0.0, f64::max);
        SimTime::from_ms_f64(self.horizon_ms.unwrap_or(last + 1000.0))
    }

    pub fn machine_config(&self) -> MachineConfig {
        self.machine
            .clone()
            .unwrap_or_else(|| self.base_config().machine)
    }

    fn base_config(&self) -> WorldConfig {
        match self.platform {
            Platform::Default => WorldConfig::platform(),
            Platform::Small => WorldConfig::small(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.format != SCENARIO_FORMAT {
            return bad(format!(
                "format must be `{SCENARIO_FORMAT}`, got `{}`",
                self.format
            ));
        }
        let machine = self.machine_config();
        machine
            .validate()
            .map_err(|e| Error::Validation(e.to_string()))?;
        if let Some(c) = &self.costs {
            c.validate().map_err(Error::Validation)?;
        }
        let mut apps = BTreeSet::new();
        for a in &self.apps {
            if !apps.insert(a.id.as_str()) {
                return bad(format!("app `{}` declared twice", a.id));
            }
        }
        let mut handles = BTreeSet::new();
        let mut prev = 0.0;
        for (i, td) in self.timeline.iter().enumerate() {
            let at = td.at_ms;
            if !at.is_finite() || at < 0.0 {
                return bad(format!("timeline[{i}]: bad time {at}"));
            }
            if at < prev {
                return bad(format!("timeline[{i}]: directives are not time-sorted"));
            }
            prev = at;
            let d = &td.directive;
            if let Directive::CreateSandbox {
                handle,
                app,
                max_cores,
                ..
            } = d
            {
                if !apps.contains(app.as_str()) {
                    return bad(format!("timeline[{i}]: unknown app `{app}`"));
                }
                if !handles.insert(handle.as_str()) {
                    return bad(format!("timeline[{i}]: handle `{handle}` reused"));
                }
                if *max_cores == 0 {
                    return bad(format!("timeline[{i}]: max_cores must be at least 1"));
                }
            }
            if let Some(h) = d.sandbox() {
                if !handles.contains(h) {
                    return bad(format!("timeline[{i}]: unknown sandbox handle `{h}`"));
                }
            }
            if let Some(dev) = d.device() {
                if machine.peripheral(DevId(dev)).is_none() {
                    return bad(format!("timeline[{i}]: unknown device {dev}"));
                }
            }
            if let Directive::RosUseDevice { duration_ms, .. } = d {
                if !duration_ms.is_finite() || *duration_ms < 0.0 {
                    return bad(format!("timeline[{i}]: bad duration"));
                }
            }
        }
        if let Some(h) = self.horizon_ms {
            if !h.is_finite() || h < prev {
                return bad(format!("horizon {h} ms precedes the last directive"));
            }
        }
        Ok(())
    }

    /// The world configuration this scenario runs with.
    pub fn world_config(&self) -> WorldConfig {
        let mut cfg = self.base_config();
        if let Some(m) = &self.machine {
            cfg.machine = m.clone();
        }
        if let Some(c) = &self.costs {
            cfg.costs = c.clone();
        }
        cfg.mode = self.mode;
        cfg.defenses = Defenses::with_mutations(&self.mutate);
        cfg.seed = self.seed;
        cfg.render = self.render;
        cfg.trace = true;
        cfg.autonomous = true;
        cfg.check_invariants = true;
        cfg
    }

    /// Builds the world, installs apps and schedules the timeline. The first
    /// trace record carries the scenario itself so a trace can be replayed.
    pub fn build(&self) -> Result<World> {
        self.build_with(self.world_config())
    }

    pub fn build_with(&self, cfg: WorldConfig) -> Result<World> {
        let mut world = World::new(cfg)?;
        let header = serde_json::to_value(self).map_err(|e| Error::Parse(e.to_string()))?;
        world.record(
            Actor::System,
            "scenario",
            json!({"scenario": header}),
            "loaded",
        );
        for a in &self.apps {
            let payload = a.payload.clone().unwrap_or_else(|| format!("app:{}", a.id));
            world.install_app(&a.id, payload.as_bytes())?;
            if a.tampered {
                world.tamper_image(&a.id);
            }
        }
        for td in &self.timeline {
            world.schedule_directive(SimTime::from_ms_f64(td.at_ms), td.directive.clone());
        }
        Ok(world)
    }

    /// Runs to the horizon and closes the trace with the final state digest.
    pub fn run(&self) -> Result<World> {
        self.run_with(self.world_config())
    }

    /// Runs to the horizon under an explicit configuration, e.g. with the
    /// trace switched off for large sweeps.
    pub fn run_with(&self, cfg: WorldConfig) -> Result<World> {
        let mut world = self.build_with(cfg)?;
        world.run_until(self.horizon());
        world.finish();
        Ok(world)
    }
}

impl World {
    fn handle(&self, h: &str) -> Result<SandboxId> {
        self.handles
            .get(h)
            .copied()
            .ok_or_else(|| Error::Validation(format!("handle `{h}` does not name a sandbox")))
    }

    /// Writes the closing trace record.
    pub fn finish(&mut self) {
        let digest = self.state_digest();
        self.record(
            Actor::System,
            "end",
            json!({"state_digest": format!("{digest:016x}"), "violations": self.stats.violations.len()}),
            "ok",
        );
    }

    /// Carries out one timeline directive.
    pub fn apply_directive(&mut self, d: &Directive) -> Result<()> {
        match d {
            Directive::CreateSandbox {
                handle,
                app,
                max_cores,
                max_memory_mb,
                core_class,
                memory_mb,
            } => {
                if self.handles.contains_key(handle) {
                    return Err(Error::Validation(format!("handle `{handle}` reused")));
                }
                let opts = CreateOptions {
                    max_cores: *max_cores,
                    max_memory: max_memory_mb.map(|m| m * MIB),
                    core_class: core_class.or(Some(CoreClass::Big)),
                    memory_bytes: memory_mb.map(|m| m * MIB),
                };
                let sid = self.create_sandbox(app, &opts)?;
                self.handles.insert(handle.clone(), sid);
            }
            Directive::Workload { sandbox, workload } => {
                let sid = self.handle(sandbox)?;
                self.assign_workload(sid, workload.clone())?;
            }
            Directive::SendData {
                sandbox,
                bytes,
                to_sandbox,
            } => {
                let sid = self.handle(sandbox)?;
                let dir = if *to_sandbox {
                    Direction::RosToSandbox
                } else {
                    Direction::SandboxToRos
                };
                self.send_data(sid, *bytes, dir)?;
            }
            Directive::RequestPeripheral { sandbox, device } => {
                let sid = self.handle(sandbox)?;
                self.request_peripheral(sid, DevId(*device))?;
            }
            Directive::ReleasePeripheral { sandbox, device } => {
                let sid = self.handle(sandbox)?;
                self.release_peripheral(sid, DevId(*device))?;
            }
            Directive::AttachMemory { sandbox, mb } => {
                let sid = self.handle(sandbox)?;
                self.sos_attach(sid, mb * MIB)?;
            }
            Directive::DetachMemory { sandbox } => {
                let sid = self.handle(sandbox)?;
                self.sos_detach_top(sid)?;
            }
            Directive::AddCore { sandbox } => {
                let sid = self.handle(sandbox)?;
                self.sos_increase_core(sid)?;
            }
            Directive::RemoveCore { sandbox } => {
                let sid = self.handle(sandbox)?;
                self.sos_release_any_core(sid)?;
            }
            Directive::Terminate { sandbox } => {
                let sid = self.handle(sandbox)?;
                self.terminate(sid)?;
            }
            Directive::RosUseDevice {
                device,
                duration_ms,
            } => {
                self.ros_use_device(DevId(*device), SimTime::from_ms_f64(*duration_ms))?;
            }
            Directive::TouchMemory { sandbox, lines } => {
                let sid = self.handle(sandbox)?;
                self.sandbox_touch(sid, *lines)?;
            }
            Directive::Attack { kind } => {
                // attacks run against a copy so they cannot disturb the timeline
                let mut shadow = self.clone();
                let mark = shadow.trace.records().len();
                let outcome = run_attack(&mut shadow, *kind);
                self.trace.extend(&shadow.trace.records()[mark..]);
                self.stats.attacks.push(outcome);
            }
        }
        Ok(())
    }
}

/// A seeded honest scenario on the default platform with `events`
/// directives: random creation, workloads, transfers, peripherals, memory and
/// core adjustments, and termination.
pub fn random_scenario(seed: u64, events: usize) -> ScenarioFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let apps: Vec<AppSpec> = (0..3)
        .map(|i| AppSpec {
            id: format!("app{i}"),
            payload: None,
            tampered: false,
        })
        .collect();
    let mut created = 0;
    let mut live: Vec<String> = Vec::new();
    let mut timeline = Vec::with_capacity(events);
    let mut t = 0.0;
    for _ in 0..events {
        t += f64::from(rng.gen_range(0u32..400));
        let pick = |rng: &mut ChaCha8Rng, hs: &[String]| hs[rng.gen_range(0..hs.len())].clone();
        let roll = rng.gen_range(0..100);
        let d = if live.is_empty() || (roll < 15 && live.len() < 7) {
            let handle = format!("s{created}");
            created += 1;
            live.push(handle.clone());
            Directive::CreateSandbox {
                handle,
                app: format!("app{}", rng.gen_range(0..3)),
                max_cores: rng.gen_range(1..=3),
                max_memory_mb: None,
                core_class: Some(if rng.gen_bool(0.7) {
                    CoreClass::Big
                } else {
                    CoreClass::Little
                }),
                memory_mb: None,
            }
        } else {
            let h = pick(&mut rng, &live);
            match roll {
                15..=27 => Directive::Workload {
                    sandbox: h,
                    workload: if rng.gen_bool(0.7) {
                        Workload::InferenceBatch {
                            images: rng.gen_range(1..6),
                            units_per_image: 1500.0,
                            parallelizable: rng.gen_bool(0.8),
                            gpu_speedup: 3.57,
                        }
                    } else {
                        Workload::CipherQuery {
                            file_bytes: (0..rng.gen_range(1..4))
                                .map(|_| rng.gen_range(1..6) * 10 * MIB)
                                .collect(),
                            cache_base: 10 * MIB,
                            queries: rng.gen_range(1..4),
                            flexible: rng.gen_bool(0.5),
                            scan_units_per_mb: 3.4,
                            miss_units_per_mb: 9.4,
                        }
                    },
                },
                28..=35 => Directive::SendData {
                    sandbox: h,
                    bytes: rng.gen_range(0..(8 * MIB)),
                    to_sandbox: rng.gen_bool(0.5),
                },
                36..=44 => Directive::RequestPeripheral {
                    sandbox: h,
                    device: rng.gen_range(0..4),
                },
                45..=52 => Directive::ReleasePeripheral {
                    sandbox: h,
                    device: rng.gen_range(0..4),
                },
                53..=60 => Directive::AttachMemory {
                    sandbox: h,
                    mb: 16 * rng.gen_range(1..3),
                },
                61..=66 => Directive::DetachMemory { sandbox: h },
                67..=73 => Directive::AddCore { sandbox: h },
                74..=79 => Directive::RemoveCore { sandbox: h },
                80..=86 => {
                    live.retain(|l| *l != h);
                    Directive::Terminate { sandbox: h }
                }
                87..=92 => Directive::RosUseDevice {
                    device: rng.gen_range(0..4),
                    duration_ms: f64::from(rng.gen_range(1u32..800)),
                },
                _ => Directive::TouchMemory {
                    sandbox: h,
                    lines: rng.gen_range(1..32),
                },
            }
        };
        timeline.push(TimedDirective {
            at_ms: t,
            directive: d,
        });
    }
    ScenarioFile {
        seed,
        horizon_ms: Some(t + 2000.0),
        apps,
        timeline,
        ..ScenarioFile::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
format = "leap-scenario/1"
seed = 7

[[apps]]
id = "wallet"

[[timeline]]
at_ms = 0
op = "create_sandbox"
handle = "a"
app = "wallet"

[[timeline]]
at_ms = 1000
op = "terminate"
sandbox = "a"
"#;

    #[test]
    fn minimal_scenario_parses_and_runs() {
        let s = ScenarioFile::parse(MINIMAL).unwrap();
        assert_eq!(s.timeline.len(), 2);
        let w = s.run().unwrap();
        assert!(w.stats.violations.is_empty());
        assert_eq!(w.stats.directive_errors, 0);
        assert_eq!(w.now(), SimTime::from_ms(2000));
    }

    #[test]
    fn unknown_device_is_a_validation_error() {
        let text = MINIMAL.replace(
            "op = \"terminate\"\nsandbox = \"a\"",
            "op = \"request_peripheral\"\nsandbox = \"a\"\ndevice = 9",
        );
        assert!(matches!(
            ScenarioFile::parse(&text),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn parse_error_mentions_line() {
        let err = ScenarioFile::parse("format = \"leap-scenario/1\"\nseed = [\n").unwrap_err();
        let Error::Parse(msg) = err else {
            panic!("{err:?}")
        };
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn unsorted_timeline_rejected() {
        let mut s = ScenarioFile::parse(MINIMAL).unwrap();
        s.timeline.swap(0, 1);
        assert!(s.validate().is_err());
    }

    #[test]
    fn random_scenarios_validate_and_round_trip() {
        for seed in 0..20 {
            let s = random_scenario(seed, 50);
            s.validate().unwrap();
            let back = ScenarioFile::parse(&s.to_toml().unwrap()).unwrap();
            assert_eq!(back, s);
        }
    }
}
