//! Per-sandbox runtime: synthetic workloads, usage sampling, the CPU and
//! memory adjustment policies, peripheral requests and termination.

use std::collections::{BTreeMap, VecDeque};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{Actor, CostKey, Direction, SimTime};
use crate::error::{Error, Result};
use crate::hw::{CoreClass, PeripheralKind};
use crate::monitor::AdjustOp;
use crate::ros::{DriverState, Waiter};
use crate::types::{align_up, ContextId, CoreId, DevId, PhysRange, SandboxId, MIB};
use crate::world::{Action, World};

const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SosConfig {
    /// Work units per ms on a big core.
    pub big_rate: f64,
    pub little_rate: f64,
    pub sample_ms: f64,
    pub increase_threshold: f64,
    pub increase_window_ms: f64,
    pub release_threshold: f64,
    pub release_window_ms: f64,
    pub hysteresis_ms: f64,
    pub max_samples: usize,
}

impl Default for SosConfig {
    fn default() -> Self {
        SosConfig {
            big_rate: 1.0,
            little_rate: 0.35,
            sample_ms: 100.0,
            increase_threshold: 0.99,
            increase_window_ms: 2000.0,
            release_threshold: 0.40,
            release_window_ms: 5000.0,
            hysteresis_ms: 1000.0,
            max_samples: 128,
        }
    }
}

impl SosConfig {
    pub fn rate(&self, class: CoreClass) -> f64 {
        match class {
            CoreClass::Big => self.big_rate,
            CoreClass::Little => self.little_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SandboxState {
    Created,
    Verifying,
    Booting,
    Running,
    Terminating,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Quota {
    pub max_cores: usize,
    pub max_memory: u64,
}

fn default_units_per_image() -> f64 {
    1500.0
}
fn default_true() -> bool {
    true
}
fn default_gpu_speedup() -> f64 {
    3.57
}
fn default_scan() -> f64 {
    3.4
}
fn default_miss() -> f64 {
    9.4
}
fn default_queries() -> u32 {
    10
}
fn default_cache_base() -> u64 {
    10 * MIB
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    #[default]
    Idle,
    /// Image classification: a fixed amount of work per image.
    InferenceBatch {
        images: u32,
        #[serde(default = "default_units_per_image")]
        units_per_image: f64,
        #[serde(default = "default_true")]
        parallelizable: bool,
        #[serde(default = "default_gpu_speedup")]
        gpu_speedup: f64,
    },
    /// Queries over encrypted files with an in-memory plaintext cache.
    /// Each file is one phase; a query scans the file and pays extra for
    /// the part that does not fit in the cache.
    CipherQuery {
        file_bytes: Vec<u64>,
        #[serde(default = "default_cache_base")]
        cache_base: u64,
        #[serde(default = "default_queries")]
        queries: u32,
        #[serde(default = "default_true")]
        flexible: bool,
        #[serde(default = "default_scan")]
        scan_units_per_mb: f64,
        #[serde(default = "default_miss")]
        miss_units_per_mb: f64,
    },
}

impl Workload {
    pub fn phase_count(&self) -> usize {
        match self {
            Workload::Idle => 0,
            Workload::InferenceBatch { images, .. } => usize::from(*images > 0),
            Workload::CipherQuery { file_bytes, .. } => file_bytes.len(),
        }
    }

    /// Work units of `phase` given the cache capacity at its start.
    pub fn phase_work(&self, phase: usize, capacity: u64) -> f64 {
        match self {
            Workload::Idle => 0.0,
            Workload::InferenceBatch {
                images,
                units_per_image,
                ..
            } => f64::from(*images) * units_per_image,
            Workload::CipherQuery {
                file_bytes,
                queries,
                scan_units_per_mb,
                miss_units_per_mb,
                ..
            } => {
                let s = file_bytes[phase];
                let mb = |b: u64| b as f64 / MIB as f64;
                f64::from(*queries)
                    * (mb(s) * scan_units_per_mb
                        + mb(s.saturating_sub(capacity)) * miss_units_per_mb)
            }
        }
    }

    fn parallel(&self) -> bool {
        matches!(
            self,
            Workload::InferenceBatch {
                parallelizable: true,
                ..
            }
        )
    }

    fn gpu_factor(&self) -> f64 {
        match self {
            Workload::InferenceBatch { gpu_speedup, .. } => *gpu_speedup,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoreSlot {
    pub class: CoreClass,
    pub ready_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeviceSlot {
    pub ready_at: SimTime,
    pub gpu: bool,
}

/// Usage over one sampling interval.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageSample {
    pub start: SimTime,
    pub end: SimTime,
    pub per_core: BTreeMap<CoreId, f64>,
    /// Busy time over available time across all cores; `None` when no core
    /// was available.
    pub aggregate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdjustRequest {
    IncreaseCore,
    ReleaseCore(CoreId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemRequest {
    Attach(u64),
    Detach(PhysRange),
}

/// Time integrals behind the utilization metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UtilAccum {
    pub mem_used: f64,
    pub mem_alloc: f64,
    pub core_busy_ns: u64,
    pub core_alloc_ns: u64,
}

#[derive(Debug, Clone)]
pub struct SandboxRuntime {
    pub id: SandboxId,
    pub state: SandboxState,
    pub quota: Quota,
    pub boot_core: CoreId,
    pub workload: Workload,
    pub phase: usize,
    pub phase_remaining: f64,
    /// Bytes the current phase works on.
    pub phase_bytes: u64,
    pub phase_done_at: Option<SimTime>,
    pub work_done: f64,
    pub created_at: SimTime,
    pub ready_at: SimTime,
    pub workload_started_at: Option<SimTime>,
    pub completed_at: Option<SimTime>,
    pub cores: BTreeMap<CoreId, CoreSlot>,
    pub devices: BTreeMap<DevId, DeviceSlot>,
    /// No progress before this time (memory being attached).
    pub stall_until: SimTime,
    pub last_step: SimTime,
    pub samples: VecDeque<UsageSample>,
    pub window_start: SimTime,
    pub cooldown_until: SimTime,
    pub sample_start: SimTime,
    busy_acc: BTreeMap<CoreId, u64>,
    avail_acc: BTreeMap<CoreId, u64>,
    pub cache_base: u64,
    /// Dynamically attached blocks; the last one is always at an end of the
    /// sandbox's interval.
    pub mem_blocks: Vec<PhysRange>,
    pub mem_pressure: bool,
    pub util: UtilAccum,
    pub ticking: bool,
    pub phase_end_at: Option<SimTime>,
}

impl SandboxRuntime {
    pub fn new(
        id: SandboxId,
        quota: Quota,
        boot_core: CoreId,
        class: CoreClass,
        now: SimTime,
        ready_at: SimTime,
        _cfg: &SosConfig,
    ) -> Self {
        SandboxRuntime {
            id,
            state: SandboxState::Running,
            quota,
            boot_core,
            workload: Workload::Idle,
            phase: 0,
            phase_remaining: 0.0,
            phase_bytes: 0,
            phase_done_at: None,
            work_done: 0.0,
            created_at: now,
            ready_at,
            workload_started_at: None,
            completed_at: None,
            cores: BTreeMap::from([(boot_core, CoreSlot { class, ready_at })]),
            devices: BTreeMap::new(),
            stall_until: SimTime::ZERO,
            last_step: now,
            samples: VecDeque::new(),
            window_start: ready_at,
            cooldown_until: ready_at,
            sample_start: ready_at,
            busy_acc: BTreeMap::new(),
            avail_acc: BTreeMap::new(),
            cache_base: 0,
            mem_blocks: Vec::new(),
            mem_pressure: false,
            util: UtilAccum::default(),
            ticking: false,
            phase_end_at: None,
        }
    }

    pub(crate) fn hash_state<H: Hasher>(&self, h: &mut H) {
        self.state.hash(h);
        self.quota.hash(h);
        self.boot_core.hash(h);
        self.cores.keys().for_each(|c| c.hash(h));
        self.devices.keys().for_each(|d| d.hash(h));
        self.mem_blocks.hash(h);
    }

    /// Cache memory available to the workload.
    pub fn capacity(&self) -> u64 {
        self.cache_base + self.mem_blocks.iter().map(|b| b.len()).sum::<u64>()
    }

    pub fn active(&self) -> bool {
        self.workload_started_at.is_some() && self.completed_at.is_none()
    }

    /// Work rate at `t` and the cores doing the work.
    pub fn rate_at(&self, t: SimTime, cfg: &SosConfig) -> (f64, Vec<CoreId>) {
        if self.state != SandboxState::Running
            || self.phase_remaining <= 0.0
            || t < self.stall_until
            || t < self.ready_at
        {
            return (0.0, Vec::new());
        }
        let ready: Vec<(CoreId, CoreClass)> = self
            .cores
            .iter()
            .filter(|(_, s)| s.ready_at <= t)
            .map(|(&c, s)| (c, s.class))
            .collect();
        let (mut rate, busy) = if self.workload.parallel() {
            (
                ready.iter().map(|&(_, cl)| cfg.rate(cl)).sum::<f64>(),
                ready.iter().map(|&(c, _)| c).collect::<Vec<_>>(),
            )
        } else {
            match ready.iter().find(|&&(c, _)| c == self.boot_core) {
                Some(&(c, cl)) => (cfg.rate(cl), vec![c]),
                None => (0.0, Vec::new()),
            }
        };
        if self.devices.values().any(|d| d.gpu && d.ready_at <= t) {
            rate *= self.workload.gpu_factor();
        }
        (rate, busy)
    }

    fn next_breakpoint_after(&self, t: SimTime) -> Option<SimTime> {
        self.cores
            .values()
            .map(|s| s.ready_at)
            .chain(self.devices.values().map(|d| d.ready_at))
            .chain([self.stall_until, self.ready_at])
            .filter(|&b| b > t)
            .min()
    }

    /// Advances the workload model to `t`. A phase that finishes leaves the
    /// rest of the span idle and records its completion time.
    pub fn advance_to(&mut self, t: SimTime, cfg: &SosConfig) -> f64 {
        let mut done = 0.0;
        while self.last_step < t {
            let a = self.last_step;
            let b = self.next_breakpoint_after(a).map_or(t, |n| n.min(t));
            let dur = b - a;
            for (&c, s) in &self.cores {
                if s.ready_at <= a && a >= self.sample_start {
                    *self.avail_acc.entry(c).or_default() += dur.as_ns();
                }
                if s.ready_at <= a {
                    self.util.core_alloc_ns += dur.as_ns();
                }
            }
            let (rate, busy) = self.rate_at(a, cfg);
            let mut busy_ns = 0;
            if rate > 0.0 {
                let possible = rate * dur.as_ms_f64();
                if possible >= self.phase_remaining - EPS {
                    let need = SimTime((self.phase_remaining / rate * 1e6).ceil() as u64).min(dur);
                    busy_ns = need.as_ns();
                    done += self.phase_remaining;
                    self.phase_remaining = 0.0;
                    self.phase_done_at = Some(a + need);
                } else {
                    busy_ns = dur.as_ns();
                    done += possible;
                    self.phase_remaining -= possible;
                }
            }
            for c in busy {
                if a >= self.sample_start {
                    *self.busy_acc.entry(c).or_default() += busy_ns;
                }
                self.util.core_busy_ns += busy_ns;
            }
            if self.active() && matches!(self.workload, Workload::CipherQuery { .. }) {
                let cap = self.capacity() as f64;
                let used = (self.phase_bytes as f64).min(cap);
                self.util.mem_used += used * dur.as_ns() as f64;
                self.util.mem_alloc += cap * dur.as_ns() as f64;
            }
            self.last_step = b;
        }
        self.work_done += done;
        done
    }

    /// Advances by `dt` from the last step and returns the work consumed.
    pub fn step_workload(&mut self, dt: SimTime, cfg: &SosConfig) -> Result<f64> {
        if self.state != SandboxState::Running {
            return Err(Error::BadState(format!("{} is {:?}", self.id, self.state)));
        }
        let t = self.last_step + dt;
        Ok(self.advance_to(t, cfg))
    }

    /// When the current phase will finish if nothing changes.
    pub fn predict_phase_end(&self, cfg: &SosConfig) -> Option<SimTime> {
        if self.state != SandboxState::Running || self.phase_remaining <= 0.0 {
            return None;
        }
        let mut t = self.last_step;
        let mut rem = self.phase_remaining;
        loop {
            let (rate, _) = self.rate_at(t, cfg);
            let finish = |t: SimTime, rem: f64| t + SimTime((rem / rate * 1e6).ceil() as u64);
            match self.next_breakpoint_after(t) {
                Some(b) => {
                    let cap = rate * (b - t).as_ms_f64();
                    if rate > 0.0 && cap >= rem - EPS {
                        return Some(finish(t, rem));
                    }
                    rem -= cap;
                    t = b;
                }
                None => return (rate > 0.0).then(|| finish(t, rem)),
            }
        }
    }

    /// Closes the sampling interval ending at `now`.
    pub fn close_sample(&mut self, now: SimTime, cfg: &SosConfig) {
        if now <= self.sample_start {
            return;
        }
        let mut per_core = BTreeMap::new();
        let (mut busy, mut avail) = (0u64, 0u64);
        for (&c, &a) in &self.avail_acc {
            if a == 0 {
                continue;
            }
            let b = self.busy_acc.get(&c).copied().unwrap_or(0);
            per_core.insert(c, b as f64 / a as f64);
            busy += b;
            avail += a;
        }
        let aggregate = (avail > 0).then(|| busy as f64 / avail as f64);
        self.samples.push_back(UsageSample {
            start: self.sample_start,
            end: now,
            per_core,
            aggregate,
        });
        while self.samples.len() > cfg.max_samples {
            self.samples.pop_front();
        }
        self.busy_acc.clear();
        self.avail_acc.clear();
        self.sample_start = now;
    }

    /// Mean usage over `[now - window, now]`, or `None` if samples do not
    /// cover the whole window since the last adjustment.
    pub fn window_average(
        &self,
        now: SimTime,
        window: SimTime,
        core: Option<CoreId>,
    ) -> Option<f64> {
        if now < window {
            return None;
        }
        let from = now - window;
        if from < self.window_start {
            return None;
        }
        let (mut covered, mut acc) = (0u64, 0.0);
        for s in self.samples.iter().rev() {
            if s.end > now {
                continue;
            }
            if s.start < from {
                break;
            }
            let u = match core {
                None => s.aggregate?,
                Some(c) => *s.per_core.get(&c)?,
            };
            let len = (s.end - s.start).as_ns();
            covered += len;
            acc += u * len as f64;
        }
        (covered >= window.as_ns() && covered > 0).then(|| acc / covered as f64)
    }

    /// The CPU adjustment policy.
    pub fn monitor_cpu(&self, now: SimTime, cfg: &SosConfig) -> Option<AdjustRequest> {
        if self.state != SandboxState::Running || now < self.cooldown_until {
            return None;
        }
        let inc = SimTime::from_ms_f64(cfg.increase_window_ms);
        if self.cores.len() < self.quota.max_cores {
            if let Some(avg) = self.window_average(now, inc, None) {
                if avg > cfg.increase_threshold {
                    return Some(AdjustRequest::IncreaseCore);
                }
            }
        }
        let rel = SimTime::from_ms_f64(cfg.release_window_ms);
        for &c in self.cores.keys().rev() {
            if c == self.boot_core {
                continue;
            }
            if let Some(avg) = self.window_average(now, rel, Some(c)) {
                if avg < cfg.release_threshold {
                    return Some(AdjustRequest::ReleaseCore(c));
                }
            }
        }
        None
    }

    /// The memory adjustment hook: grow when the request does not fit,
    /// return the newest block once the rest suffices.
    pub fn monitor_memory(&self, requested: u64, granularity: u64) -> Option<MemRequest> {
        let cap = self.capacity();
        if cap < requested {
            return Some(MemRequest::Attach(align_up(requested - cap, granularity)));
        }
        let last = self.mem_blocks.last()?;
        (cap - last.len() >= requested).then_some(MemRequest::Detach(*last))
    }

    fn wants_ticks(&self) -> bool {
        self.state == SandboxState::Running && (self.active() || self.cores.len() > 1)
    }
}

impl World {
    fn runtime(&self, sid: SandboxId) -> Result<&SandboxRuntime> {
        self.sandboxes.get(&sid).ok_or(Error::UnknownSandbox(sid))
    }

    fn runtime_mut(&mut self, sid: SandboxId) -> Result<&mut SandboxRuntime> {
        self.sandboxes
            .get_mut(&sid)
            .ok_or(Error::UnknownSandbox(sid))
    }

    fn require_running(&self, sid: SandboxId) -> Result<()> {
        match self.runtime(sid)?.state {
            SandboxState::Running => Ok(()),
            s => Err(Error::BadState(format!("{sid} is {s:?}"))),
        }
    }

    /// Starts the periodic sampling tick if the runtime needs it.
    pub(crate) fn start_ticking(&mut self, sid: SandboxId) {
        if !self.config.autonomous {
            return;
        }
        let now = self.now();
        let period = SimTime::from_ms_f64(self.config.sos.sample_ms);
        let Some(rt) = self.sandboxes.get_mut(&sid) else {
            return;
        };
        if rt.ticking || !rt.wants_ticks() {
            return;
        }
        rt.ticking = true;
        let first = if now < rt.ready_at {
            rt.sample_start = rt.ready_at;
            rt.ready_at + period
        } else {
            rt.sample_start = now;
            now + period
        };
        rt.busy_acc.clear();
        rt.avail_acc.clear();
        self.engine
            .schedule_at(first, Actor::Sandbox(sid), Action::Tick(sid));
    }

    /// Brings a runtime's workload model up to now and handles any phase
    /// that finished on the way.
    pub(crate) fn sync(&mut self, sid: SandboxId) {
        let now = self.now();
        let cfg = self.config.sos.clone();
        let Some(rt) = self.sandboxes.get_mut(&sid) else {
            return;
        };
        rt.advance_to(now, &cfg);
        let mut guard = 0;
        while let Some(at) = self.sandboxes.get(&sid).and_then(|r| r.phase_done_at) {
            guard += 1;
            if guard > 10_000 {
                break;
            }
            self.finish_phase(sid, at);
        }
    }

    fn reschedule_phase_end(&mut self, sid: SandboxId) {
        if !self.config.autonomous {
            return;
        }
        let cfg = &self.config.sos;
        let Some(rt) = self.sandboxes.get_mut(&sid) else {
            return;
        };
        let next = rt.predict_phase_end(cfg);
        if let Some(at) = next.filter(|_| next != rt.phase_end_at) {
            rt.phase_end_at = next;
            self.engine
                .schedule_at(at, Actor::Sandbox(sid), Action::PhaseEnd(sid));
        }
    }

    pub(crate) fn on_phase_end(&mut self, sid: SandboxId) {
        let now = self.now();
        if let Some(rt) = self.sandboxes.get_mut(&sid) {
            if rt.phase_end_at == Some(now) {
                rt.phase_end_at = None;
            }
        }
        self.sync(sid);
        self.reschedule_phase_end(sid);
    }

    pub(crate) fn on_tick(&mut self, sid: SandboxId) {
        self.sync(sid);
        let now = self.now();
        let cfg = self.config.sos.clone();
        let Some(rt) = self.sandboxes.get_mut(&sid) else {
            return;
        };
        rt.close_sample(now, &cfg);
        if !rt.wants_ticks() {
            rt.ticking = false;
            return;
        }
        let req = rt.monitor_cpu(now, &cfg);
        let period = SimTime::from_ms_f64(cfg.sample_ms);
        self.engine
            .schedule(period, Actor::Sandbox(sid), Action::Tick(sid));
        match req {
            Some(AdjustRequest::IncreaseCore) => {
                let _ = self.sos_increase_core(sid);
            }
            Some(AdjustRequest::ReleaseCore(c)) => {
                let _ = self.sos_release_core(sid, c);
            }
            None => {}
        }
    }

    fn after_adjustment(&mut self, sid: SandboxId, done_at: SimTime) {
        let hyst = SimTime::from_ms_f64(self.config.sos.hysteresis_ms);
        if let Some(rt) = self.sandboxes.get_mut(&sid) {
            rt.window_start = rt.window_start.max(done_at);
            rt.cooldown_until = rt.cooldown_until.max(done_at + hyst);
        }
    }

    /// Asks the rich OS for one more core.
    pub fn sos_increase_core(&mut self, sid: SandboxId) -> Result<SimTime> {
        self.require_running(sid)?;
        self.sync(sid);
        let now = self.now();
        self.charge(Actor::Sandbox(sid), CostKey::Ipi(Direction::SandboxToRos));
        let rt = self.runtime(sid)?;
        if rt.cores.len() >= rt.quota.max_cores {
            return Err(Error::QuotaExceeded(ContextId::Sandbox(sid)));
        }
        let prefer = rt.cores.get(&rt.boot_core).map(|s| s.class);
        let Some(core) = self.free_core(prefer) else {
            self.record(
                Actor::Ros,
                "grant_core",
                json!({"sandbox": sid.0}),
                "no_free_core",
            );
            self.after_adjustment(sid, now);
            return Err(Error::ResourceBusy("no free core".into()));
        };
        let opt = self.config.ros.optimized_core_transfer;
        let cost = self.transfer_core(core, ContextId::Ros, ContextId::Sandbox(sid), opt)?;
        let class = self.machine.core(core)?.class;
        let rt = self.runtime_mut(sid)?;
        rt.cores.insert(
            core,
            CoreSlot {
                class,
                ready_at: now + cost,
            },
        );
        self.stats.core_increase_ms.push(cost.as_ms_f64());
        self.after_adjustment(sid, now + cost);
        self.start_ticking(sid);
        self.reschedule_phase_end(sid);
        Ok(cost)
    }

    /// Gives a surplus core back to the rich OS.
    pub fn sos_release_core(&mut self, sid: SandboxId, core: CoreId) -> Result<SimTime> {
        self.require_running(sid)?;
        self.sync(sid);
        let now = self.now();
        if !self.runtime(sid)?.cores.contains_key(&core) {
            return Err(Error::NotOwner {
                actor: ContextId::Sandbox(sid),
                what: core.to_string(),
            });
        }
        self.charge(Actor::Sandbox(sid), CostKey::Ipi(Direction::SandboxToRos));
        let opt = self.config.ros.optimized_core_transfer;
        let cost = self.transfer_core(core, ContextId::Sandbox(sid), ContextId::Ros, opt)?;
        self.runtime_mut(sid)?.cores.remove(&core);
        self.stats.core_decrease_ms.push(cost.as_ms_f64());
        self.after_adjustment(sid, now + cost);
        self.reschedule_phase_end(sid);
        Ok(cost)
    }

    /// Releases the highest-numbered surplus core.
    pub fn sos_release_any_core(&mut self, sid: SandboxId) -> Result<SimTime> {
        let rt = self.runtime(sid)?;
        let core = rt
            .cores
            .keys()
            .rev()
            .find(|&&c| c != rt.boot_core)
            .copied()
            .ok_or(Error::LastCore {
                core: rt.boot_core,
                owner: ContextId::Sandbox(sid),
            })?;
        self.sos_release_core(sid, core)
    }

    /// Grows the sandbox by `bytes` next to its current interval. The
    /// workload stalls for the attach latency.
    pub fn sos_attach(&mut self, sid: SandboxId, bytes: u64) -> Result<SimTime> {
        self.require_running(sid)?;
        self.sync(sid);
        self.charge(Actor::Sandbox(sid), CostKey::Ipi(Direction::SandboxToRos));
        let interval = self
            .monitor
            .ledger
            .interval_of(sid)
            .ok_or_else(|| Error::BadState(format!("{sid} memory is not one interval")))?;
        let region = match self.ros.cma.alloc(bytes, Some(interval), sid) {
            Ok(r) => r,
            Err(e) => {
                self.runtime_mut(sid)?.mem_pressure = true;
                self.record(
                    Actor::Ros,
                    "alloc_contiguous",
                    json!({"sandbox": sid.0, "bytes": bytes}),
                    "failed",
                );
                return Err(e);
            }
        };
        let verdict = self.verify_region_legality(sid, region, AdjustOp::Attach)?;
        if !verdict.is_approved() {
            self.ros.cma.free(region);
            return Err(Error::Verdict(sid));
        }
        let cost = match self.attach_memory(sid, region) {
            Ok(c) => c,
            Err(e) => {
                self.ros.cma.free(region);
                return Err(e);
            }
        };
        let gran = self.config.ros.adjust_granularity;
        let now = self.now();
        let rt = self.runtime_mut(sid)?;
        let mut blocks: Vec<PhysRange> = region
            .chunks(gran)
            .map(|s| PhysRange::new(s, (s + gran).min(region.end)))
            .collect();
        if region.end == interval.start {
            blocks.reverse();
        }
        rt.mem_blocks.extend(blocks);
        rt.stall_until = rt.stall_until.max(now) + cost;
        rt.mem_pressure = false;
        self.stats.mem_attach_ms.push(cost.as_ms_f64());
        self.reschedule_phase_end(sid);
        Ok(cost)
    }

    /// Returns the most recently attached block.
    pub fn sos_detach_top(&mut self, sid: SandboxId) -> Result<SimTime> {
        self.require_running(sid)?;
        self.sync(sid);
        let block = *self
            .runtime(sid)?
            .mem_blocks
            .last()
            .ok_or_else(|| Error::BadState(format!("{sid} has no attached block")))?;
        self.charge(Actor::Sandbox(sid), CostKey::Ipi(Direction::SandboxToRos));
        let verdict = self.verify_region_legality(sid, block, AdjustOp::Detach)?;
        if !verdict.is_approved() {
            return Err(Error::Verdict(sid));
        }
        let cost = self.detach_memory(sid, block)?;
        self.ros.cma.free(block);
        self.runtime_mut(sid)?.mem_blocks.pop();
        self.stats.mem_detach_ms.push(cost.as_ms_f64());
        Ok(cost)
    }

    /// Runs the memory hook until the capacity matches `requested`.
    pub fn sos_adjust_memory(&mut self, sid: SandboxId, requested: u64) {
        let gran = self.config.ros.adjust_granularity;
        for _ in 0..1024 {
            let Ok(rt) = self.runtime(sid) else { return };
            let outcome = match rt.monitor_memory(requested, gran) {
                Some(MemRequest::Attach(bytes)) => self.sos_attach(sid, bytes),
                Some(MemRequest::Detach(_)) => self.sos_detach_top(sid),
                None => return,
            };
            if outcome.is_err() {
                return;
            }
        }
    }

    /// Gives the sandbox a new workload, replacing any current one.
    pub fn assign_workload(&mut self, sid: SandboxId, w: Workload) -> Result<()> {
        self.require_running(sid)?;
        self.sync(sid);
        let now = self.now();
        let rt = self.runtime_mut(sid)?;
        if let Workload::CipherQuery { cache_base, .. } = &w {
            rt.cache_base = *cache_base;
        }
        rt.workload = w;
        rt.phase = 0;
        rt.phase_remaining = 0.0;
        rt.phase_done_at = None;
        rt.workload_started_at = Some(now);
        rt.completed_at = None;
        self.record(
            Actor::Sandbox(sid),
            "assign_workload",
            json!({"sandbox": sid.0}),
            "ok",
        );
        self.start_phase(sid);
        self.start_ticking(sid);
        self.reschedule_phase_end(sid);
        Ok(())
    }

    fn start_phase(&mut self, sid: SandboxId) {
        let now = self.now();
        for _ in 0..10_000 {
            let Some(rt) = self.sandboxes.get(&sid) else {
                return;
            };
            if rt.phase >= rt.workload.phase_count() {
                self.complete_workload(sid, now);
                return;
            }
            let (bytes, flexible) = match &rt.workload {
                Workload::CipherQuery {
                    file_bytes,
                    flexible,
                    ..
                } => (file_bytes[rt.phase], *flexible),
                _ => (0, false),
            };
            if flexible {
                self.sos_adjust_memory(sid, bytes);
            }
            let Some(rt) = self.sandboxes.get_mut(&sid) else {
                return;
            };
            let work = rt.workload.phase_work(rt.phase, rt.capacity());
            rt.phase_bytes = bytes;
            if work > 0.0 {
                rt.phase_remaining = work;
                return;
            }
            rt.phase += 1;
        }
    }

    fn finish_phase(&mut self, sid: SandboxId, at: SimTime) {
        let Some(rt) = self.sandboxes.get_mut(&sid) else {
            return;
        };
        rt.phase_done_at = None;
        rt.phase += 1;
        if rt.phase >= rt.workload.phase_count() {
            self.complete_workload(sid, at);
        } else {
            self.start_phase(sid);
        }
    }

    fn complete_workload(&mut self, sid: SandboxId, at: SimTime) {
        let Some(rt) = self.sandboxes.get_mut(&sid) else {
            return;
        };
        if rt.completed_at.is_some() || rt.workload_started_at.is_none() {
            return;
        }
        rt.completed_at = Some(at);
        rt.phase_remaining = 0.0;
        let flexible = matches!(rt.workload, Workload::CipherQuery { flexible: true, .. });
        let started = rt.workload_started_at.unwrap_or(at);
        self.trace.push(
            at,
            Actor::Sandbox(sid),
            "workload_complete",
            json!({"sandbox": sid.0, "elapsed_ms": at.saturating_sub(started).as_ms_f64()}),
            "ok",
        );
        if flexible {
            self.sos_adjust_memory(sid, 0);
        }
    }

    /// The sandbox writes to the first line of each of its blocks.
    pub fn sandbox_touch(&mut self, sid: SandboxId, max_lines: usize) -> Result<usize> {
        self.require_running(sid)?;
        let core = self.runtime(sid)?.boot_core;
        let ctx = ContextId::Sandbox(sid);
        let grants: Vec<PhysRange> = self.monitor.ledger.grants_of(sid).collect();
        let mut n = 0;
        'outer: for g in grants {
            for base in g.chunks(crate::types::BLOCK_2M) {
                if n >= max_lines {
                    break 'outer;
                }
                if let crate::stage2::Translation::Hit(pa) = self.machine.s2_translate(core, base) {
                    self.machine.cache_fill(ctx, pa);
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    /// Requests exclusive use of a device; queues behind the current holder
    /// when busy.
    pub fn request_peripheral(&mut self, sid: SandboxId, dev: DevId) -> Result<SimTime> {
        self.require_running(sid)?;
        if self.machine.config.peripheral(dev).is_none() {
            return Err(Error::UnknownDevice(dev));
        }
        if self.runtime(sid)?.devices.contains_key(&dev) {
            return Err(Error::BadState(format!("{sid} already holds {dev}")));
        }
        self.sync(sid);
        self.charge(Actor::Sandbox(sid), CostKey::Ipi(Direction::SandboxToRos));
        let now = self.now();
        let queued_ahead = self
            .ros
            .waiters
            .get(&dev)
            .is_some_and(|q| q.iter().any(|w| w.sandbox != sid));
        let busy = self.monitor.ledger.dev_owner.get(&dev) != Some(&ContextId::Ros)
            || self.ros.in_use.get(&dev).is_some_and(|&t| t > now)
            || queued_ahead;
        if busy {
            let q = self.ros.waiters.entry(dev).or_default();
            if !q.iter().any(|w| w.sandbox == sid) {
                let deadline = now + SimTime::from_ms_f64(self.config.ros.device_wait_timeout_ms);
                q.push_back(Waiter {
                    sandbox: sid,
                    deadline,
                });
                self.engine.schedule_at(
                    deadline,
                    Actor::Ros,
                    Action::WaitTimeout { dev, sandbox: sid },
                );
            }
            self.record(
                Actor::Ros,
                "request_peripheral",
                json!({"sandbox": sid.0, "dev": dev.0}),
                "queued",
            );
            return Err(Error::DeviceBusy(dev));
        }
        self.grant_peripheral(sid, dev)
    }

    fn grant_peripheral(&mut self, sid: SandboxId, dev: DevId) -> Result<SimTime> {
        let desc = self
            .machine
            .config
            .peripheral(dev)
            .ok_or(Error::UnknownDevice(dev))?
            .clone();
        let ctx = ContextId::Sandbox(sid);
        self.prepare_peripheral(dev)?;
        let cost = match self.switch_peripheral(dev, ContextId::Ros, ctx) {
            Ok(c) => c,
            Err(e) => {
                self.reclaim_peripheral(dev)?;
                return Err(e);
            }
        };
        let blob = self.driver_blobs.get(&dev).cloned().unwrap_or_default();
        if self.config.defenses.verify {
            if let Err(e) = self.secure.verify_driver(dev, &blob) {
                self.record(
                    Actor::Sandbox(sid),
                    "install_driver",
                    json!({"dev": dev.0}),
                    "integrity_error",
                );
                let back = self.switch_peripheral(dev, ctx, ContextId::Ros)?;
                let at = self.now() + cost + back;
                self.reclaim_peripheral_at(dev, at)?;
                return Err(e);
            }
        }
        self.ros.set_driver_state(ctx, dev, DriverState::Loaded);
        let now = self.now();
        let rt = self.runtime_mut(sid)?;
        rt.devices.insert(
            dev,
            DeviceSlot {
                ready_at: now + cost,
                gpu: desc.kind == PeripheralKind::Gpu,
            },
        );
        if let Some(q) = self.ros.waiters.get_mut(&dev) {
            q.retain(|w| w.sandbox != sid);
        }
        self.stats.peripheral_switch_ms.push(cost.as_ms_f64());
        self.record(
            Actor::Sandbox(sid),
            "install_driver",
            json!({"dev": dev.0, "ready_us": (now + cost).as_us_f64()}),
            "ok",
        );
        self.reschedule_phase_end(sid);
        Ok(cost)
    }

    /// Unloads the driver and hands the device back to the rich OS.
    pub fn release_peripheral(&mut self, sid: SandboxId, dev: DevId) -> Result<SimTime> {
        let state = self.runtime(sid)?.state;
        if !matches!(state, SandboxState::Running | SandboxState::Terminating) {
            return Err(Error::BadState(format!("{sid} is {state:?}")));
        }
        let Some(slot) = self.runtime(sid)?.devices.get(&dev).copied() else {
            return Err(Error::NotOwner {
                actor: ContextId::Sandbox(sid),
                what: dev.to_string(),
            });
        };
        self.sync(sid);
        let ctx = ContextId::Sandbox(sid);
        self.ros.set_driver_state(ctx, dev, DriverState::Unloaded);
        self.charge(Actor::Sandbox(sid), CostKey::Ipi(Direction::SandboxToRos));
        let cost = match self.switch_peripheral(dev, ctx, ContextId::Ros) {
            Ok(c) => c,
            Err(e) => {
                self.ros.set_driver_state(ctx, dev, DriverState::Loaded);
                return Err(e);
            }
        };
        self.runtime_mut(sid)?.devices.remove(&dev);
        let back_at = self.now().max(slot.ready_at) + cost;
        self.reclaim_peripheral_at(dev, back_at)?;
        self.stats.peripheral_switch_ms.push(cost.as_ms_f64());
        self.reschedule_phase_end(sid);
        self.serve_waiters(dev);
        Ok(cost)
    }

    /// Grants a freed device to the first live waiter.
    pub(crate) fn serve_waiters(&mut self, dev: DevId) {
        let now = self.now();
        loop {
            let free = self.monitor.ledger.dev_owner.get(&dev) == Some(&ContextId::Ros)
                && !self.ros.in_use.get(&dev).is_some_and(|&t| t > now);
            if !free {
                return;
            }
            let Some(w) = self.ros.waiters.get_mut(&dev).and_then(|q| q.pop_front()) else {
                return;
            };
            let live = self
                .sandboxes
                .get(&w.sandbox)
                .is_some_and(|r| r.state == SandboxState::Running);
            if !live || w.deadline < now {
                continue;
            }
            if self.grant_peripheral(w.sandbox, dev).is_ok() {
                return;
            }
        }
    }

    pub(crate) fn on_wait_timeout(&mut self, dev: DevId, sid: SandboxId) {
        let now = self.now();
        let Some(q) = self.ros.waiters.get_mut(&dev) else {
            return;
        };
        let before = q.len();
        q.retain(|w| !(w.sandbox == sid && w.deadline <= now));
        if q.len() != before {
            self.record(
                Actor::Ros,
                "request_peripheral",
                json!({"sandbox": sid.0, "dev": dev.0}),
                "timeout",
            );
        }
    }

    /// Orderly shutdown: release devices, then let the monitor tear down.
    pub fn terminate(&mut self, sid: SandboxId) -> Result<SimTime> {
        self.require_running(sid)?;
        self.sync(sid);
        self.charge(Actor::Sandbox(sid), CostKey::Ipi(Direction::SandboxToRos));
        let devs: Vec<DevId> = self.runtime(sid)?.devices.keys().copied().collect();
        for dev in devs {
            self.release_peripheral(sid, dev)?;
        }
        for q in self.ros.waiters.values_mut() {
            q.retain(|w| w.sandbox != sid);
        }
        self.runtime_mut(sid)?.state = SandboxState::Terminating;
        self.record(
            Actor::Sandbox(sid),
            "terminate",
            json!({"sandbox": sid.0}),
            "terminating",
        );
        let cost = self.teardown(sid)?;
        self.ros.cma.release_owner(sid);
        self.ros.shared.free(sid);
        let rt = self.runtime_mut(sid)?;
        rt.state = SandboxState::Dead;
        rt.cores.clear();
        rt.devices.clear();
        rt.mem_blocks.clear();
        rt.phase_remaining = 0.0;
        rt.ticking = false;
        self.record(
            Actor::Sandbox(sid),
            "terminate",
            json!({"sandbox": sid.0}),
            "dead",
        );
        Ok(cost)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SosConfig {
        SosConfig::default()
    }

    fn rt(max_cores: usize) -> SandboxRuntime {
        SandboxRuntime::new(
            SandboxId(1),
            Quota {
                max_cores,
                max_memory: 512 * MIB,
            },
            CoreId(4),
            CoreClass::Big,
            SimTime::ZERO,
            SimTime::ZERO,
            &cfg(),
        )
    }

    fn busy_batch(r: &mut SandboxRuntime, parallel: bool) {
        r.workload = Workload::InferenceBatch {
            images: 1000,
            units_per_image: 1500.0,
            parallelizable: parallel,
            gpu_speedup: 3.57,
        };
        r.phase_remaining = 1e12;
        r.workload_started_at = Some(SimTime::ZERO);
    }

    #[test]
    fn one_big_core_does_one_unit_per_ms() {
        let mut r = rt(1);
        busy_batch(&mut r, true);
        let w = r.step_workload(SimTime::from_ms(100), &cfg()).unwrap();
        assert!((w - 100.0).abs() < 1e-9);
    }

    #[test]
    fn parallel_rates_add() {
        let mut r = rt(2);
        busy_batch(&mut r, true);
        r.cores.insert(
            CoreId(5),
            CoreSlot {
                class: CoreClass::Big,
                ready_at: SimTime::ZERO,
            },
        );
        let w = r.step_workload(SimTime::from_ms(100), &cfg()).unwrap();
        assert!((w - 200.0).abs() < 1e-9);
    }

    #[test]
    fn gpu_multiplies_rate() {
        let mut r = rt(1);
        busy_batch(&mut r, true);
        r.devices.insert(
            DevId(0),
            DeviceSlot {
                ready_at: SimTime::ZERO,
                gpu: true,
            },
        );
        let w = r.step_workload(SimTime::from_ms(100), &cfg()).unwrap();
        assert!((w - 357.0).abs() < 1e-9);
    }

    #[test]
    fn step_requires_running() {
        let mut r = rt(1);
        r.state = SandboxState::Dead;
        assert!(matches!(
            r.step_workload(SimTime::from_ms(1), &cfg()),
            Err(Error::BadState(_))
        ));
    }

    #[test]
    fn serial_work_ignores_extra_cores() {
        let mut r = rt(2);
        busy_batch(&mut r, false);
        r.cores.insert(
            CoreId(5),
            CoreSlot {
                class: CoreClass::Big,
                ready_at: SimTime::ZERO,
            },
        );
        let w = r.step_workload(SimTime::from_ms(100), &cfg()).unwrap();
        assert!((w - 100.0).abs() < 1e-9);
    }

    #[test]
    fn phase_completion_time_is_exact() {
        let mut r = rt(1);
        r.workload = Workload::InferenceBatch {
            images: 1,
            units_per_image: 1500.0,
            parallelizable: true,
            gpu_speedup: 3.57,
        };
        r.phase_remaining = 1500.0;
        r.workload_started_at = Some(SimTime::ZERO);
        assert_eq!(r.predict_phase_end(&cfg()), Some(SimTime::from_ms(1500)));
        r.advance_to(SimTime::from_ms(2000), &cfg());
        assert_eq!(r.phase_done_at, Some(SimTime::from_ms(1500)));
        assert!((r.work_done - 1500.0).abs() < 1e-9);
    }

    #[test]
    fn prediction_spans_core_arrival() {
        let mut r = rt(2);
        r.workload = Workload::InferenceBatch {
            images: 1,
            units_per_image: 3000.0,
            parallelizable: true,
            gpu_speedup: 1.0,
        };
        r.phase_remaining = 3000.0;
        r.cores.insert(
            CoreId(5),
            CoreSlot {
                class: CoreClass::Big,
                ready_at: SimTime::from_ms(1000),
            },
        );
        // 1000 units alone, then 2000 units at rate 2
        assert_eq!(r.predict_phase_end(&cfg()), Some(SimTime::from_ms(2000)));
    }

    fn fill_samples(r: &mut SandboxRuntime, usage: &[f64], core: CoreId) {
        let mut t = SimTime::ZERO;
        for &u in usage {
            let end = t + SimTime::from_ms(100);
            r.samples.push_back(UsageSample {
                start: t,
                end,
                per_core: BTreeMap::from([(core, u)]),
                aggregate: Some(u),
            });
            t = end;
        }
    }

    #[test]
    fn full_usage_for_two_seconds_requests_a_core() {
        let mut r = rt(2);
        fill_samples(&mut r, &[1.0; 20], CoreId(4));
        assert_eq!(
            r.monitor_cpu(SimTime::from_ms(2000), &cfg()),
            Some(AdjustRequest::IncreaseCore)
        );
        assert_eq!(r.monitor_cpu(SimTime::from_ms(1900), &cfg()), None);
    }

    #[test]
    fn exhausted_quota_blocks_increase() {
        let mut r = rt(1);
        fill_samples(&mut r, &[1.0; 20], CoreId(4));
        assert_eq!(r.monitor_cpu(SimTime::from_ms(2000), &cfg()), None);
    }

    #[test]
    fn idle_surplus_core_is_released() {
        let mut r = rt(2);
        r.cores.insert(
            CoreId(5),
            CoreSlot {
                class: CoreClass::Big,
                ready_at: SimTime::ZERO,
            },
        );
        fill_samples(&mut r, &[0.3; 50], CoreId(5));
        for s in r.samples.iter_mut() {
            s.per_core.insert(CoreId(4), 0.3);
        }
        assert_eq!(
            r.monitor_cpu(SimTime::from_ms(5000), &cfg()),
            Some(AdjustRequest::ReleaseCore(CoreId(5)))
        );
    }

    #[test]
    fn memory_hook_rounds_to_granularity() {
        let mut r = rt(1);
        r.cache_base = 10 * MIB;
        assert_eq!(
            r.monitor_memory(30 * MIB, 16 * MIB),
            Some(MemRequest::Attach(32 * MIB))
        );
        assert_eq!(r.monitor_memory(8 * MIB, 16 * MIB), None);
        r.mem_blocks = vec![
            PhysRange::with_len(200 * MIB, 16 * MIB),
            PhysRange::with_len(216 * MIB, 16 * MIB),
        ];
        assert_eq!(r.monitor_memory(30 * MIB, 16 * MIB), None);
        assert_eq!(
            r.monitor_memory(20 * MIB, 16 * MIB),
            Some(MemRequest::Detach(PhysRange::with_len(216 * MIB, 16 * MIB)))
        );
    }

    #[test]
    fn cipher_query_work_model() {
        let w = Workload::CipherQuery {
            file_bytes: vec![30 * MIB],
            cache_base: 10 * MIB,
            queries: 10,
            flexible: true,
            scan_units_per_mb: 3.4,
            miss_units_per_mb: 9.4,
        };
        assert!((w.phase_work(0, 42 * MIB) - 1020.0).abs() < 1e-9);
        assert!((w.phase_work(0, 10 * MIB) - (1020.0 + 1880.0)).abs() < 1e-9);
    }

    mod prop {
        use super::*;
        use proptest::prelude::*;

        /// Reference evaluator: expand samples to a per-ms usage array and
        /// average the trailing window directly.
        fn naive_increase(usage: &[f64], now_ms: usize, window_ms: usize, thr: f64) -> bool {
            if now_ms < window_ms || now_ms > usage.len() * 100 {
                return false;
            }
            let per_ms: Vec<f64> = usage
                .iter()
                .flat_map(|&u| std::iter::repeat_n(u, 100))
                .collect();
            let slice = &per_ms[now_ms - window_ms..now_ms];
            slice.iter().sum::<f64>() / window_ms as f64 > thr
        }

        proptest! {
            #[test]
            fn increase_matches_brute_force(
                usage in proptest::collection::vec(prop_oneof![Just(1.0), Just(0.995), 0.0f64..1.0], 0..60),
                tick in 0usize..60,
            ) {
                let mut r = rt(2);
                fill_samples(&mut r, &usage, CoreId(4));
                let now_ms = tick * 100;
                let got = r.monitor_cpu(SimTime::from_ms(now_ms as u64), &cfg()) == Some(AdjustRequest::IncreaseCore);
                let want = now_ms <= usage.len() * 100 && naive_increase(&usage, now_ms, 2000, 0.99);
                prop_assert_eq!(got, want);
            }

            #[test]
            fn work_is_conserved(events in proptest::collection::vec((1u64..500, any::<bool>()), 1..20)) {
                let mut r = rt(3);
                busy_batch(&mut r, true);
                let mut expected = 0.0;
                let mut t = SimTime::ZERO;
                for (i, (ms, add)) in events.into_iter().enumerate() {
                    let rate = r.rate_at(t, &cfg()).0;
                    let dt = SimTime::from_ms(ms);
                    expected += rate * dt.as_ms_f64();
                    r.step_workload(dt, &cfg()).unwrap();
                    t = t + dt;
                    let extra = CoreId(5 + (i % 2) as u32);
                    if add && r.cores.len() < 3 {
                        r.cores.insert(extra, CoreSlot { class: CoreClass::Little, ready_at: t });
                    } else if extra != r.boot_core {
                        r.cores.remove(&extra);
                    }
                }
                prop_assert!((r.work_done - expected).abs() < 1e-6 * expected.max(1.0));
            }
        }
    }
}
