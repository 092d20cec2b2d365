//! Machine-readable summary of a finished run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::sos::SandboxState;
use crate::world::World;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxMetrics {
    pub sandbox: u32,
    pub handle: Option<String>,
    pub state: SandboxState,
    pub created_ms: f64,
    pub ready_ms: f64,
    pub completion_ms: Option<f64>,
    pub work_done: f64,
    /// Busy over allocated core time.
    pub core_utilization: Option<f64>,
    /// Bytes in use over bytes held, integrated over the workload.
    pub memory_utilization: Option<f64>,
}

/// Count and latencies of one kind of adjustment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Adjustments {
    pub count: usize,
    pub mean_ms: Option<f64>,
    pub latencies_ms: Vec<f64>,
}

impl Adjustments {
    fn of(v: &[f64]) -> Self {
        Adjustments {
            count: v.len(),
            mean_ms: (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64),
            latencies_ms: v.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sim_time_ms: f64,
    pub events: usize,
    pub sandboxes: Vec<SandboxMetrics>,
    pub adjustments: BTreeMap<String, Adjustments>,
    pub memory_utilization: Option<f64>,
    pub core_utilization: Option<f64>,
    pub frozen_gui_ms: Vec<f64>,
    pub max_concurrent: usize,
    pub violations: usize,
    pub attacks: usize,
    pub unblocked_attacks: usize,
    pub directive_errors: usize,
    /// FNV-1a digest of the JSONL trace, hex.
    pub trace_digest: String,
    pub state_digest: String,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| (num / den).clamp(0.0, 1.0))
}

impl MetricsReport {
    pub fn from_world(w: &World) -> Self {
        let names: BTreeMap<_, _> = w.handles.iter().map(|(h, &s)| (s, h.clone())).collect();
        let sandboxes = w
            .sandboxes
            .values()
            .map(|rt| SandboxMetrics {
                sandbox: rt.id.0,
                handle: names.get(&rt.id).cloned(),
                state: rt.state,
                created_ms: rt.created_at.as_ms_f64(),
                ready_ms: rt.ready_at.as_ms_f64(),
                completion_ms: rt
                    .workload_started_at
                    .zip(rt.completed_at)
                    .map(|(s, e)| (e - s).as_ms_f64()),
                work_done: rt.work_done,
                core_utilization: ratio(rt.util.core_busy_ns as f64, rt.util.core_alloc_ns as f64),
                memory_utilization: ratio(rt.util.mem_used, rt.util.mem_alloc),
            })
            .collect();
        let (busy, alloc, used, held) = w.sandboxes.values().fold((0.0, 0.0, 0.0, 0.0), |a, rt| {
            (
                a.0 + rt.util.core_busy_ns as f64,
                a.1 + rt.util.core_alloc_ns as f64,
                a.2 + rt.util.mem_used,
                a.3 + rt.util.mem_alloc,
            )
        });
        let s = &w.stats;
        let adjustments = [
            ("core_increase", &s.core_increase_ms),
            ("core_decrease", &s.core_decrease_ms),
            ("memory_attach", &s.mem_attach_ms),
            ("memory_detach", &s.mem_detach_ms),
            ("peripheral_switch", &s.peripheral_switch_ms),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), Adjustments::of(v)))
        .collect();
        MetricsReport {
            sim_time_ms: w.now().as_ms_f64(),
            events: s.events_dispatched,
            sandboxes,
            adjustments,
            memory_utilization: ratio(used, held),
            core_utilization: ratio(busy, alloc),
            frozen_gui_ms: s.frozen_gui_ms.clone(),
            max_concurrent: s.max_concurrent,
            violations: s.violations.len(),
            attacks: s.attacks.len(),
            unblocked_attacks: s.attacks.iter().filter(|a| !a.blocked).count(),
            directive_errors: s.directive_errors,
            trace_digest: format!("{:016x}", w.trace.digest()),
            state_digest: format!("{:016x}", w.state_digest()),
        }
    }

    /// The run is clean: no violation and every attack blocked.
    pub fn clean(&self) -> bool {
        self.violations == 0 && self.unblocked_attacks == 0
    }
}
