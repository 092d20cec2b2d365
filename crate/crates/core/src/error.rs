use thiserror::Error;

use crate::types::{ContextId, CoreId, DevId, PhysRange, SandboxId};

/// Every failure the simulator reports through `Result`.
///
/// Stage-2 faults and attack outcomes are values, not errors.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("invalid machine configuration: {0}")]
    Config(String),

    #[error("range {range} is not aligned to {granule:#x}")]
    Alignment { range: PhysRange, granule: u64 },

    #[error("block {block:#x} is already mapped")]
    DoubleMap { block: u64 },

    #[error("block {block:#x} is not mapped")]
    NotMapped { block: u64 },

    #[error("integrity verification failed for app `{0}`")]
    Integrity(String),

    #[error("app `{0}` is not registered")]
    UnknownApp(String),

    #[error("app `{0}` is already registered")]
    DuplicateApp(String),

    #[error("unknown sandbox {0}")]
    UnknownSandbox(SandboxId),

    #[error("unknown device {0}")]
    UnknownDevice(DevId),

    #[error("unknown core {0}")]
    UnknownCore(CoreId),

    #[error("resource busy: {0}")]
    ResourceBusy(String),

    #[error("too many sandboxes: {running} running, limit {limit}")]
    TooManySandboxes { running: usize, limit: usize },

    #[error("quota exceeded for {0}")]
    QuotaExceeded(ContextId),

    #[error("{core} is the last core of {owner}")]
    LastCore { core: CoreId, owner: ContextId },

    #[error("{actor} does not own {what}")]
    NotOwner { actor: ContextId, what: String },

    #[error("device {0} is busy")]
    DeviceBusy(DevId),

    #[error("device {0} cannot be switched (shared driver)")]
    UnsupportedDevice(DevId),

    #[error("bad state: {0}")]
    BadState(String),

    #[error("memory adjustment for {0} was not approved")]
    Verdict(SandboxId),

    #[error("out of contiguous memory ({0} bytes requested)")]
    OutOfMemory(u64),

    #[error("no free space adjacent to {0}")]
    NoAdjacentSpace(PhysRange),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid scenario: {0}")]
    Validation(String),

    #[error("unknown bench suite `{0}`")]
    UnknownSuite(String),

    #[error(
        "exploration budget of {cap} states exceeded after {visited} states ({violating} bad)"
    )]
    BudgetExceeded {
        cap: usize,
        visited: usize,
        violating: usize,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
