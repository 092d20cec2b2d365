//! Deterministic discrete-event model of a TrustZone normal-world sandbox
//! architecture: per-context stage-2 tables, an enforcement monitor, a rich
//! OS that manages resources and sandboxes that run synthetic workloads.

pub mod adversary;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod explore;
pub mod hw;
pub mod metrics;
pub mod monitor;
pub mod replay;
pub mod ros;
pub mod scenario;
pub mod secure_world;
pub mod sos;
pub mod stage2;
pub mod types;
pub mod world;

pub use adversary::{
    check_invariants, check_sanity, run_attack, AttackKind, AttackOutcome, InvariantId,
    ViolationReport,
};
pub use engine::{Actor, CostKey, CostTable, Direction, Engine, SimTime, Trace, TraceRecord};
pub use error::{Error, Result};
pub use experiments::{Suite, SuiteReport};
pub use explore::{
    explore, Alphabet, Counterexample, ExploreConfig, ExploreOp, ExploreReport, Finding,
};
pub use hw::{CoreClass, Machine, MachineConfig, PeripheralKind};
pub use metrics::MetricsReport;
pub use monitor::{AdjustOp, AdjustVerdict, Monitor, MonitorConfig, RejectReason};
pub use replay::{replay_trace, Replayed, TraceKind};
pub use ros::{CreateOptions, Ros, RosConfig};
pub use scenario::{random_scenario, Directive, ScenarioFile, TimedDirective};
pub use sos::{Quota, SandboxState, SosConfig, Workload};
pub use stage2::{Attr, Stage2TableSet, Translation};
pub use types::{ContextId, CoreId, DevId, PhysRange, SandboxId, BLOCK_2M, GIB, KIB, MIB, PAGE_4K};
pub use world::{Defenses, IsolationMode, Mutation, World, WorldConfig};
