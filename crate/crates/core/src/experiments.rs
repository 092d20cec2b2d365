//! Built-in reproductions: core-transfer optimization, dynamic cores for a
//! batch inference workload, flexible versus static memory for an encrypted
//! query workload, and the concurrency comparison of the two isolation
//! modes.

use serde::{Deserialize, Serialize};

use crate::engine::{CostKey, SimTime};
use crate::error::{Error, Result};
use crate::hw::CoreClass;
use crate::metrics::MetricsReport;
use crate::ros::CreateOptions;
use crate::scenario::{AppSpec, Directive, ScenarioFile, TimedDirective};
use crate::sos::Workload;
use crate::types::{SandboxId, MIB};
use crate::world::{IsolationMode, World, WorldConfig};

pub const SUITES: [&str; 3] = ["cpu_adjust", "dl_batch", "mem_query"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    CpuAdjust,
    DlBatch,
    MemQuery,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu_adjust" => Ok(Suite::CpuAdjust),
            "dl_batch" => Ok(Suite::DlBatch),
            "mem_query" => Ok(Suite::MemQuery),
            other => Err(Error::UnknownSuite(other.to_string())),
        }
    }
}

/// Rows of one suite run with its default parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "suite", content = "rows", rename_all = "snake_case")]
pub enum SuiteReport {
    CpuAdjust(Vec<RatioRow>),
    DlBatch(Vec<SpeedupRow>),
    MemQuery(Vec<MemRow>),
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    Ok(match suite {
        Suite::CpuAdjust => SuiteReport::CpuAdjust(cpu_adjust()?),
        Suite::DlBatch => SuiteReport::DlBatch(dl_batch(&DL_IMAGES, &[1, 2])?),
        Suite::MemQuery => SuiteReport::MemQuery(mem_query(&MEM_FILES_MB, &MEM_STATIC_MB)?),
    })
}

const APP: &str = "bench.app";

fn quiet_world(f: impl FnOnce(&mut WorldConfig)) -> Result<World> {
    let mut cfg = WorldConfig::platform();
    cfg.trace = false;
    cfg.check_invariants = false;
    f(&mut cfg);
    let mut w = World::new(cfg)?;
    w.install_app(APP, b"bench sandbox image")?;
    Ok(w)
}

fn launch(w: &mut World, opts: &CreateOptions) -> Result<SandboxId> {
    let sid = w.create_sandbox(APP, opts)?;
    let ready = w.sandboxes[&sid].ready_at;
    w.run_until(ready);
    Ok(sid)
}

/// Runs until the sandbox's workload completes; returns its duration.
fn run_to_completion(w: &mut World, sid: SandboxId, limit: SimTime) -> Result<SimTime> {
    let step = SimTime::from_ms(1000);
    while w.now() < limit {
        let rt = &w.sandboxes[&sid];
        if let (Some(s), Some(e)) = (rt.workload_started_at, rt.completed_at) {
            return Ok(e - s);
        }
        let t = w.now() + step;
        w.run_until(t);
    }
    Err(Error::BadState(format!(
        "{sid} did not finish by {limit:?}"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub name: String,
    pub unoptimized_ms: f64,
    pub optimized_ms: f64,
    /// unoptimized / optimized
    pub ratio: f64,
}

/// Measures one core grant and one release per core class with and
/// without the busy-wait optimization.
pub fn cpu_adjust() -> Result<Vec<RatioRow>> {
    let mut rows = Vec::new();
    for class in [CoreClass::Big, CoreClass::Little] {
        let mut inc = [0.0; 2];
        let mut dec = [0.0; 2];
        for (i, opt) in [false, true].into_iter().enumerate() {
            let mut w = quiet_world(|c| {
                c.autonomous = false;
                c.ros.optimized_core_transfer = opt;
            })?;
            let sid = launch(
                &mut w,
                &CreateOptions {
                    max_cores: 2,
                    core_class: Some(class),
                    ..CreateOptions::default()
                },
            )?;
            w.sos_increase_core(sid)?;
            w.sos_release_any_core(sid)?;
            let s = &w.stats;
            inc[i] = s.core_increase_ms[0];
            dec[i] = s.core_decrease_ms[0];
        }
        for (what, v) in [("increase", inc), ("decrease", dec)] {
            rows.push(RatioRow {
                name: format!("{}.{what}", class_name(class)),
                unoptimized_ms: v[0],
                optimized_ms: v[1],
                ratio: v[0] / v[1],
            });
        }
    }
    Ok(rows)
}

fn class_name(c: CoreClass) -> &'static str {
    match c {
        CoreClass::Big => "big",
        CoreClass::Little => "little",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub images: u32,
    /// Cores the sandbox may add beyond its boot core.
    pub extra_cores: usize,
    pub baseline_ms: f64,
    pub dynamic_ms: f64,
    pub speedup: f64,
    pub cores_added: usize,
    pub max_cores_held: usize,
}

pub const DL_IMAGES: [u32; 6] = [1, 5, 10, 20, 30, 40];

/// Completion time of an inference batch, the number of cores granted and
/// the most cores held at once.
pub fn inference_run(images: u32, max_cores: usize) -> Result<(SimTime, usize, usize)> {
    let mut w = quiet_world(|_| {})?;
    let sid = launch(
        &mut w,
        &CreateOptions {
            max_cores,
            ..CreateOptions::default()
        },
    )?;
    w.assign_workload(
        sid,
        Workload::InferenceBatch {
            images,
            units_per_image: 1500.0,
            parallelizable: true,
            gpu_speedup: 3.57,
        },
    )?;
    let mut held = 1;
    let step = SimTime::from_ms(100);
    let limit = w.now() + SimTime::from_ms(3_600_000);
    let done = loop {
        let rt = &w.sandboxes[&sid];
        held = held.max(rt.cores.len());
        if let (Some(s), Some(e)) = (rt.workload_started_at, rt.completed_at) {
            break e - s;
        }
        if w.now() >= limit {
            return Err(Error::BadState("inference did not finish".into()));
        }
        let t = w.now() + step;
        w.run_until(t);
    };
    Ok((done, w.stats.core_increase_ms.len(), held))
}

/// Dynamic cores against a single fixed core for each batch size.
pub fn dl_batch(images: &[u32], extra: &[usize]) -> Result<Vec<SpeedupRow>> {
    let mut rows = Vec::new();
    for &n in images {
        let (base, _, _) = inference_run(n, 1)?;
        for &e in extra {
            let (t, added, held) = inference_run(n, 1 + e)?;
            rows.push(SpeedupRow {
                images: n,
                extra_cores: e,
                baseline_ms: base.as_ms_f64(),
                dynamic_ms: t.as_ms_f64(),
                speedup: base.as_ms_f64() / t.as_ms_f64(),
                cores_added: added,
                max_cores_held: held,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemRow {
    pub strategy: String,
    /// Pre-allocated cache for static strategies.
    pub memory_mb: Option<u64>,
    pub completion_ms: f64,
    pub utilization: f64,
    pub attaches: usize,
    pub detaches: usize,
}

pub const MEM_FILES_MB: [u64; 10] = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100];
pub const MEM_STATIC_MB: [u64; 5] = [30, 50, 60, 80, 100];

/// Ten queries per file. `cache` is the static allocation, or `None` for
/// a 10 MB cache that grows and shrinks with the file.
pub fn query_run(files_mb: &[u64], cache: Option<u64>) -> Result<MemRow> {
    let mut w = quiet_world(|_| {})?;
    let sid = launch(&mut w, &CreateOptions::default())?;
    let (cache_base, flexible) = match cache {
        Some(mb) => (mb * MIB, false),
        None => (10 * MIB, true),
    };
    w.assign_workload(
        sid,
        Workload::CipherQuery {
            file_bytes: files_mb.iter().map(|m| m * MIB).collect(),
            cache_base,
            queries: 10,
            flexible,
            scan_units_per_mb: 3.4,
            miss_units_per_mb: 9.4,
        },
    )?;
    let limit = w.now() + SimTime::from_ms(24 * 3_600_000);
    let t = run_to_completion(&mut w, sid, limit)?;
    let util = MetricsReport::from_world(&w).sandboxes[0]
        .memory_utilization
        .unwrap_or(0.0);
    Ok(MemRow {
        strategy: match cache {
            Some(mb) => format!("static_{mb}mb"),
            None => "flexible".into(),
        },
        memory_mb: cache,
        completion_ms: t.as_ms_f64(),
        utilization: util,
        attaches: w.stats.mem_attach_ms.len(),
        detaches: w.stats.mem_detach_ms.len(),
    })
}

/// The flexible strategy first, then each static size.
pub fn mem_query(files_mb: &[u64], statics_mb: &[u64]) -> Result<Vec<MemRow>> {
    let mut rows = vec![query_run(files_mb, None)?];
    for &mb in statics_mb {
        rows.push(query_run(files_mb, Some(mb))?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: IsolationMode,
    pub requested: usize,
    pub max_concurrent: usize,
    pub rejected: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub leap: ModeResult,
    pub tzasc: ModeResult,
    /// Per handle, tzasc completion minus leap completion (ms), for
    /// sandboxes that finished in both modes.
    pub completion_delta_ms: Vec<(String, f64)>,
}

/// Runs the same timeline under both isolation modes.
pub fn compare(s: &ScenarioFile) -> Result<CompareReport> {
    let requested = s
        .timeline
        .iter()
        .filter(|t| matches!(t.directive, Directive::CreateSandbox { .. }))
        .count();
    let run = |mode: IsolationMode| -> Result<ModeResult> {
        let mut s = s.clone();
        s.mode = mode;
        let w = s.run()?;
        let metrics = MetricsReport::from_world(&w);
        let created = w.sandboxes.len();
        Ok(ModeResult {
            mode,
            requested,
            max_concurrent: w.stats.max_concurrent,
            rejected: requested.saturating_sub(created),
            metrics,
        })
    };
    let leap = run(IsolationMode::Leap)?;
    let tzasc = run(IsolationMode::Tzasc)?;
    let completion = |m: &ModeResult| -> Vec<(String, f64)> {
        m.metrics
            .sandboxes
            .iter()
            .filter_map(|s| Some((s.handle.clone()?, s.completion_ms?)))
            .collect()
    };
    let tz = completion(&tzasc);
    let completion_delta_ms = completion(&leap)
        .into_iter()
        .filter_map(|(h, a)| {
            let b = tz.iter().find(|(k, _)| *k == h)?.1;
            Some((h, b - a))
        })
        .collect();
    Ok(CompareReport {
        leap,
        tzasc,
        completion_delta_ms,
    })
}

/// `n` sandboxes created together, each running a short batch, then
/// terminated.
pub fn concurrency_scenario(n: usize) -> ScenarioFile {
    let mut timeline = Vec::new();
    for i in 0..n {
        let handle = format!("s{i}");
        timeline.push(TimedDirective {
            at_ms: 0.0,
            directive: Directive::CreateSandbox {
                handle: handle.clone(),
                app: "app".into(),
                max_cores: 1,
                max_memory_mb: None,
                core_class: None,
                memory_mb: None,
            },
        });
        timeline.push(TimedDirective {
            at_ms: 1000.0,
            directive: Directive::Workload {
                sandbox: handle.clone(),
                workload: Workload::InferenceBatch {
                    images: 1,
                    units_per_image: 1500.0,
                    parallelizable: true,
                    gpu_speedup: 3.57,
                },
            },
        });
        timeline.push(TimedDirective {
            at_ms: 5000.0,
            directive: Directive::Terminate { sandbox: handle },
        });
    }
    timeline.sort_by(|a, b| a.at_ms.total_cmp(&b.at_ms));
    ScenarioFile {
        apps: vec![AppSpec {
            id: "app".into(),
            payload: None,
            tampered: false,
        }],
        timeline,
        horizon_ms: Some(8000.0),
        ..ScenarioFile::default()
    }
}

/// The latency the cost table assigns to `key`, in milliseconds.
pub fn table_ms(cfg: &WorldConfig, key: CostKey) -> f64 {
    cfg.costs.get(key).as_ms_f64()
}
