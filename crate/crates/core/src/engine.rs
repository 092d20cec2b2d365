//! Deterministic discrete-event core: simulated time, the cost table every
//! charged latency comes from, the event queue and the structured trace.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::hash::Hasher;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::hw::{CoreClass, PeripheralKind};
use crate::secure_world::FnvHasher;
use crate::types::{KIB, MIB};

/// Simulated time in nanoseconds. Used for both instants and durations.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_us(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000_000)
    }

    /// Rounds half-up to the nearest nanosecond.
    pub fn from_ms_f64(ms: f64) -> Self {
        SimTime((ms * 1e6).round().max(0.0) as u64)
    }

    pub fn from_us_f64(us: f64) -> Self {
        SimTime((us * 1e3).round().max(0.0) as u64)
    }

    pub fn as_ns(self) -> u64 {
        self.0
    }

    pub fn as_us_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl std::iter::Sum for SimTime {
    fn sum<I: Iterator<Item = SimTime>>(iter: I) -> SimTime {
        SimTime(iter.map(|t| t.0).sum())
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}ms", self.as_ms_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopyAnchor {
    pub bytes: u64,
    pub ms: f64,
}

/// Core hand-over latencies in ms, without and with the busy-wait optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreAdjustCost {
    pub increase_ms: f64,
    pub increase_opt_ms: f64,
    pub decrease_ms: f64,
    pub decrease_opt_ms: f64,
}

/// Per-device stage-2 switch latencies in ms, per side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeripheralCost {
    pub map_ros_ms: f64,
    pub map_sandbox_ms: f64,
    pub unmap_ros_ms: f64,
    pub unmap_sandbox_ms: f64,
}

/// Measured platform latencies that parameterize the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostTable {
    pub boot_ms: f64,
    pub shutdown_ms: f64,
    pub copy_anchors: Vec<CopyAnchor>,
    pub ipi_ros_to_sandbox_us: f64,
    pub ipi_sandbox_to_ros_us: f64,
    pub little_core: CoreAdjustCost,
    pub big_core: CoreAdjustCost,
    pub mem_increase_ms: f64,
    pub mem_decrease_ms: f64,
    /// Memory adjustment latencies are quoted per block of this size.
    pub mem_block_bytes: u64,
    pub gpu: PeripheralCost,
    pub wifi: PeripheralCost,
    pub bluetooth: PeripheralCost,
    pub other: PeripheralCost,
    pub render_period_ms: f64,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            boot_ms: 532.0,
            shutdown_ms: 629.0,
            copy_anchors: vec![
                CopyAnchor {
                    bytes: 64 * KIB,
                    ms: 16.58,
                },
                CopyAnchor {
                    bytes: 256 * KIB,
                    ms: 17.69,
                },
                CopyAnchor {
                    bytes: 1024 * KIB,
                    ms: 22.46,
                },
                CopyAnchor {
                    bytes: 4 * MIB,
                    ms: 39.46,
                },
                CopyAnchor {
                    bytes: 16 * MIB,
                    ms: 110.65,
                },
                CopyAnchor {
                    bytes: 64 * MIB,
                    ms: 323.42,
                },
            ],
            ipi_ros_to_sandbox_us: 23.89,
            ipi_sandbox_to_ros_us: 53.12,
            little_core: CoreAdjustCost {
                increase_ms: 137.0,
                increase_opt_ms: 55.0,
                decrease_ms: 72.0,
                decrease_opt_ms: 42.0,
            },
            big_core: CoreAdjustCost {
                increase_ms: 199.0,
                increase_opt_ms: 79.0,
                decrease_ms: 92.0,
                decrease_opt_ms: 62.0,
            },
            mem_increase_ms: 54.0,
            mem_decrease_ms: 56.0,
            mem_block_bytes: 16 * MIB,
            gpu: PeripheralCost {
                map_ros_ms: 55.0,
                map_sandbox_ms: 121.0,
                unmap_ros_ms: 35.0,
                unmap_sandbox_ms: 23.0,
            },
            wifi: PeripheralCost {
                map_ros_ms: 193.0,
                map_sandbox_ms: 188.0,
                unmap_ros_ms: 43.0,
                unmap_sandbox_ms: 37.0,
            },
            bluetooth: PeripheralCost {
                map_ros_ms: 117.0,
                map_sandbox_ms: 125.0,
                unmap_ros_ms: 33.0,
                unmap_sandbox_ms: 29.0,
            },
            // no measurement exists for other devices; reuse the bluetooth row
            other: PeripheralCost {
                map_ros_ms: 117.0,
                map_sandbox_ms: 125.0,
                unmap_ros_ms: 33.0,
                unmap_sandbox_ms: 29.0,
            },
            render_period_ms: 16.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Ros,
    Sandbox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    RosToSandbox,
    SandboxToRos,
}

/// Names every latency the simulation can charge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostKey {
    Boot,
    Shutdown,
    Copy(u64),
    Ipi(Direction),
    CoreIncrease { class: CoreClass, optimized: bool },
    CoreDecrease { class: CoreClass, optimized: bool },
    MemIncrease,
    MemDecrease,
    PeripheralMap { kind: PeripheralKind, side: Side },
    PeripheralUnmap { kind: PeripheralKind, side: Side },
}

fn class_name(c: CoreClass) -> &'static str {
    match c {
        CoreClass::Big => "big",
        CoreClass::Little => "little",
    }
}

fn kind_name(k: PeripheralKind) -> &'static str {
    match k {
        PeripheralKind::Gpu => "gpu",
        PeripheralKind::Wifi => "wifi",
        PeripheralKind::Bluetooth => "bluetooth",
        PeripheralKind::Other => "other",
    }
}

fn side_name(s: Side) -> &'static str {
    match s {
        Side::Ros => "ros",
        Side::Sandbox => "sandbox",
    }
}

impl fmt::Display for CostKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |o: bool| if o { ".opt" } else { "" };
        match *self {
            CostKey::Boot => f.write_str("boot"),
            CostKey::Shutdown => f.write_str("shutdown"),
            CostKey::Copy(_) => f.write_str("copy"),
            CostKey::Ipi(Direction::RosToSandbox) => f.write_str("ipi.ros_to_sandbox"),
            CostKey::Ipi(Direction::SandboxToRos) => f.write_str("ipi.sandbox_to_ros"),
            CostKey::CoreIncrease { class, optimized } => {
                write!(f, "core.{}.increase{}", class_name(class), opt(optimized))
            }
            CostKey::CoreDecrease { class, optimized } => {
                write!(f, "core.{}.decrease{}", class_name(class), opt(optimized))
            }
            CostKey::MemIncrease => f.write_str("mem.increase"),
            CostKey::MemDecrease => f.write_str("mem.decrease"),
            CostKey::PeripheralMap { kind, side } => {
                write!(f, "periph.{}.map.{}", kind_name(kind), side_name(side))
            }
            CostKey::PeripheralUnmap { kind, side } => {
                write!(f, "periph.{}.unmap.{}", kind_name(kind), side_name(side))
            }
        }
    }
}

impl CostTable {
    fn core(&self, class: CoreClass) -> &CoreAdjustCost {
        match class {
            CoreClass::Big => &self.big_core,
            CoreClass::Little => &self.little_core,
        }
    }

    pub fn peripheral(&self, kind: PeripheralKind) -> &PeripheralCost {
        match kind {
            PeripheralKind::Gpu => &self.gpu,
            PeripheralKind::Wifi => &self.wifi,
            PeripheralKind::Bluetooth => &self.bluetooth,
            PeripheralKind::Other => &self.other,
        }
    }

    pub fn get(&self, key: CostKey) -> SimTime {
        let ms = SimTime::from_ms_f64;
        match key {
            CostKey::Boot => ms(self.boot_ms),
            CostKey::Shutdown => ms(self.shutdown_ms),
            CostKey::Copy(bytes) => self.copy_cost(bytes),
            CostKey::Ipi(Direction::RosToSandbox) => {
                SimTime::from_us_f64(self.ipi_ros_to_sandbox_us)
            }
            CostKey::Ipi(Direction::SandboxToRos) => {
                SimTime::from_us_f64(self.ipi_sandbox_to_ros_us)
            }
            CostKey::CoreIncrease { class, optimized } => {
                let c = self.core(class);
                ms(if optimized {
                    c.increase_opt_ms
                } else {
                    c.increase_ms
                })
            }
            CostKey::CoreDecrease { class, optimized } => {
                let c = self.core(class);
                ms(if optimized {
                    c.decrease_opt_ms
                } else {
                    c.decrease_ms
                })
            }
            CostKey::MemIncrease => ms(self.mem_increase_ms),
            CostKey::MemDecrease => ms(self.mem_decrease_ms),
            CostKey::PeripheralMap { kind, side } => {
                let p = self.peripheral(kind);
                ms(match side {
                    Side::Ros => p.map_ros_ms,
                    Side::Sandbox => p.map_sandbox_ms,
                })
            }
            CostKey::PeripheralUnmap { kind, side } => {
                let p = self.peripheral(kind);
                ms(match side {
                    Side::Ros => p.unmap_ros_ms,
                    Side::Sandbox => p.unmap_sandbox_ms,
                })
            }
        }
    }

    /// Shared-memory copy latency: zero for an empty transfer, the first
    /// anchor for anything up to it, piecewise-linear between anchors and
    /// extrapolated along the last segment beyond the largest anchor.
    pub fn copy_cost(&self, bytes: u64) -> SimTime {
        let a = &self.copy_anchors;
        if bytes == 0 || a.is_empty() {
            return SimTime::ZERO;
        }
        if bytes <= a[0].bytes || a.len() == 1 {
            return SimTime::from_ms_f64(a[0].ms);
        }
        let seg = a
            .windows(2)
            .find(|w| bytes <= w[1].bytes)
            .unwrap_or(&a[a.len() - 2..]);
        let (lo, hi) = (seg[0], seg[1]);
        let frac = (bytes - lo.bytes) as f64 / (hi.bytes - lo.bytes) as f64;
        SimTime::from_ms_f64(lo.ms + frac * (hi.ms - lo.ms))
    }

    /// Checks the table is usable: non-negative costs, anchors increasing.
    pub fn validate(&self) -> Result<(), String> {
        let mut all = vec![
            self.boot_ms,
            self.shutdown_ms,
            self.ipi_ros_to_sandbox_us,
            self.ipi_sandbox_to_ros_us,
            self.mem_increase_ms,
            self.mem_decrease_ms,
            self.render_period_ms,
        ];
        for c in [&self.little_core, &self.big_core] {
            all.extend([
                c.increase_ms,
                c.increase_opt_ms,
                c.decrease_ms,
                c.decrease_opt_ms,
            ]);
        }
        for p in [&self.gpu, &self.wifi, &self.bluetooth, &self.other] {
            all.extend([
                p.map_ros_ms,
                p.map_sandbox_ms,
                p.unmap_ros_ms,
                p.unmap_sandbox_ms,
            ]);
        }
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("costs must be finite and non-negative".into());
        }
        if self.mem_block_bytes == 0 || self.render_period_ms <= 0.0 {
            return Err("memory block size and render period must be positive".into());
        }
        for w in self.copy_anchors.windows(2) {
            if w[1].bytes <= w[0].bytes || w[1].ms < w[0].ms {
                return Err("copy anchors must increase in size and time".into());
            }
        }
        if self.copy_anchors.iter().any(|a| a.ms < 0.0 || a.bytes == 0) {
            return Err("copy anchors must be positive".into());
        }
        Ok(())
    }
}

/// Who an event or trace record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Actor {
    System,
    Monitor,
    SecureWorld,
    Ros,
    Sandbox(crate::types::SandboxId),
    Adversary,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::System => f.write_str("system"),
            Actor::Monitor => f.write_str("monitor"),
            Actor::SecureWorld => f.write_str("secure_world"),
            Actor::Ros => f.write_str("ros"),
            Actor::Sandbox(id) => write!(f, "{id}"),
            Actor::Adversary => f.write_str("adversary"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Clone)]
pub struct Event<A> {
    pub time: SimTime,
    pub seq: u64,
    pub actor: Actor,
    pub action: A,
}

impl<A> PartialEq for Event<A> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<A> Eq for Event<A> {}

impl<A> PartialOrd for Event<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<A> Ord for Event<A> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Event queue ordered by `(time, seq)`; `seq` breaks ties in insertion order.
#[derive(Debug, Clone)]
pub struct Engine<A> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Event<A>>>,
}

impl<A> Default for Engine<A> {
    fn default() -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
        }
    }
}

impl<A> Engine<A> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, delay: SimTime, actor: Actor, action: A) -> EventId {
        self.schedule_at(self.now + delay, actor, action)
    }

    /// Absolute-time variant; times in the past are clamped to now.
    pub fn schedule_at(&mut self, time: SimTime, actor: Actor, action: A) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Event {
            time: time.max(self.now),
            seq,
            actor,
            action,
        }));
        EventId(seq)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(e)| e.time)
    }

    /// Pops the next event due at or before `t_end`, advancing the clock to it.
    pub fn pop_due(&mut self, t_end: SimTime) -> Option<Event<A>> {
        if self.peek_time()? > t_end {
            return None;
        }
        let Reverse(ev) = self.queue.pop()?;
        self.now = ev.time;
        Some(ev)
    }

    /// Dispatches every event with `time <= t_end` in order, then sets the
    /// clock to `t_end`. Returns the number dispatched.
    pub fn run_until(
        &mut self,
        t_end: SimTime,
        mut dispatch: impl FnMut(&mut Self, Event<A>),
    ) -> usize {
        let mut n = 0;
        while let Some(ev) = self.pop_due(t_end) {
            dispatch(self, ev);
            n += 1;
        }
        self.now = self.now.max(t_end);
        n
    }

    pub fn advance_to(&mut self, t: SimTime) {
        self.now = self.now.max(t);
    }
}

/// Trace schema version; bumped whenever record layout changes.
pub const TRACE_SCHEMA: u32 = 1;

/// One line of the structured trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub v: u32,
    pub time_us: f64,
    pub actor: String,
    pub op: String,
    pub args: serde_json::Value,
    pub verdict: String,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace record serializes")
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    enabled: bool,
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            records: Vec::new(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn push(
        &mut self,
        time: SimTime,
        actor: Actor,
        op: &str,
        args: serde_json::Value,
        verdict: &str,
    ) {
        if !self.enabled {
            return;
        }
        self.records.push(TraceRecord {
            v: TRACE_SCHEMA,
            time_us: time.as_us_f64(),
            actor: actor.to_string(),
            op: op.to_string(),
            args,
            verdict: verdict.to_string(),
        });
    }

    /// Appends records produced elsewhere, e.g. by a cloned world.
    pub fn extend(&mut self, records: &[TraceRecord]) {
        if self.enabled {
            self.records.extend_from_slice(records);
        }
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    /// FNV-1a over the serialized lines.
    pub fn digest(&self) -> u64 {
        let mut h = FnvHasher::default();
        for r in &self.records {
            h.write(r.to_line().as_bytes());
            h.write_u8(b'\n');
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_time_dispatches_in_insertion_order() {
        let mut e = Engine::new();
        e.schedule(SimTime::ZERO, Actor::System, "a");
        e.schedule(SimTime::ZERO, Actor::System, "b");
        let mut seen = Vec::new();
        e.run_until(SimTime::ZERO, |_, ev| seen.push(ev.action));
        assert_eq!(seen, ["a", "b"]);
    }

    #[test]
    fn earlier_time_dispatches_first() {
        let mut e = Engine::new();
        e.schedule(SimTime::from_us(5), Actor::System, "A");
        e.schedule(SimTime::from_us(3), Actor::System, "B");
        let mut seen = Vec::new();
        let n = e.run_until(SimTime::from_us(10), |eng, ev| {
            seen.push((eng.now(), ev.action))
        });
        assert_eq!(n, 2);
        assert_eq!(
            seen,
            [(SimTime::from_us(3), "B"), (SimTime::from_us(5), "A")]
        );
        assert_eq!(e.now(), SimTime::from_us(10));
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut e: Engine<()> = Engine::new();
        assert_eq!(e.run_until(SimTime::from_ms(7), |_, _| {}), 0);
        assert_eq!(e.now(), SimTime::from_ms(7));
    }

    #[test]
    fn events_beyond_horizon_stay_queued() {
        let mut e = Engine::new();
        e.schedule(SimTime::from_ms(2), Actor::System, 1);
        e.schedule(SimTime::from_ms(20), Actor::System, 2);
        assert_eq!(e.run_until(SimTime::from_ms(10), |_, _| {}), 1);
        assert_eq!(e.pending(), 1);
    }

    #[test]
    fn handlers_can_schedule_followups() {
        let mut e = Engine::new();
        e.schedule(SimTime::ZERO, Actor::System, 0u32);
        let mut times = Vec::new();
        e.run_until(SimTime::from_ms(1), |eng, ev| {
            times.push(eng.now());
            if ev.action < 3 {
                eng.schedule(SimTime::from_us(100), Actor::System, ev.action + 1);
            }
        });
        assert_eq!(times.len(), 4);
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn table_values_are_exact_in_nanoseconds() {
        let c = CostTable::default();
        assert_eq!(c.get(CostKey::Boot), SimTime::from_ms(532));
        assert_eq!(c.get(CostKey::Shutdown), SimTime::from_ms(629));
        assert_eq!(
            c.get(CostKey::Ipi(Direction::RosToSandbox)),
            SimTime(23_890)
        );
        assert_eq!(
            c.get(CostKey::Ipi(Direction::SandboxToRos)),
            SimTime(53_120)
        );
        assert_eq!(c.copy_cost(64 * KIB), SimTime(16_580_000));
        assert_eq!(c.copy_cost(64 * MIB), SimTime(323_420_000));
        assert_eq!(
            c.get(CostKey::CoreIncrease {
                class: CoreClass::Big,
                optimized: true
            }),
            SimTime::from_ms(79)
        );
        assert_eq!(
            c.get(CostKey::PeripheralMap {
                kind: PeripheralKind::Gpu,
                side: Side::Sandbox
            }),
            SimTime::from_ms(121)
        );
        assert!(c.validate().is_ok());
    }

    #[test]
    fn copy_cost_interpolates_between_anchors() {
        let c = CostTable::default();
        assert_eq!(c.copy_cost(0), SimTime::ZERO);
        assert_eq!(c.copy_cost(1), SimTime(16_580_000));
        // halfway between the 4 MB and 16 MB anchors
        let mid = c.copy_cost(10 * MIB);
        assert_eq!(mid, SimTime::from_ms_f64((39.46 + 110.65) / 2.0));
        for a in &c.copy_anchors {
            assert_eq!(c.copy_cost(a.bytes), SimTime::from_ms_f64(a.ms));
        }
        assert!(c.copy_cost(128 * MIB) > c.copy_cost(64 * MIB));
    }

    #[test]
    fn copy_cost_is_monotone() {
        let c = CostTable::default();
        let mut prev = SimTime::ZERO;
        let mut b = 0;
        while b <= 96 * MIB {
            let t = c.copy_cost(b);
            assert!(t >= prev, "non-monotone at {b}");
            prev = t;
            b += 37 * KIB;
        }
    }

    #[test]
    fn negative_cost_fails_validation() {
        let c = CostTable {
            boot_ms: -1.0,
            ..CostTable::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn disabled_trace_records_nothing() {
        let mut t = Trace::new(false);
        t.push(
            SimTime::ZERO,
            Actor::System,
            "x",
            serde_json::Value::Null,
            "ok",
        );
        assert!(t.records().is_empty());
    }
}
