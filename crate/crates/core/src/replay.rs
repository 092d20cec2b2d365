//! Replay of recorded traces. A scenario trace is rerun from the scenario in
//! its header; a counterexample trace reruns its schedule.

use crate::engine::TraceRecord;
use crate::error::{Error, Result};
use crate::explore::{counterexample_from_trace, replay as replay_ops, Finding};
use crate::scenario::ScenarioFile;
use crate::world::World;

/// Parses line-delimited trace records, skipping blank lines.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Parse(format!("line {} column {}: {e}", i + 1, e.column())))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Scenario,
    Counterexample,
}

#[derive(Debug)]
pub struct Replayed {
    pub kind: TraceKind,
    /// Digest from the recorded closing record, if there was one.
    pub recorded_digest: Option<String>,
    pub replayed_digest: String,
    /// The new trace is byte-identical to the recorded one.
    pub identical: bool,
    pub findings: Vec<Finding>,
    pub world: World,
}

impl Replayed {
    pub fn matches(&self) -> bool {
        self.recorded_digest.as_deref() == Some(self.replayed_digest.as_str())
    }
}

fn end_digest(records: &[TraceRecord]) -> Option<String> {
    records
        .iter()
        .rev()
        .find(|r| r.op == "end")
        .and_then(|r| r.args.get("state_digest"))
        .and_then(|d| d.as_str())
        .map(str::to_string)
}

pub fn replay_trace(text: &str) -> Result<Replayed> {
    let records = parse_trace(text)?;
    let recorded_digest = end_digest(&records);
    let (kind, world, findings) = if records.iter().any(|r| r.op == "counterexample") {
        let (cfg, ops) = counterexample_from_trace(&records)?;
        let (w, f) = replay_ops(&cfg, &ops)?;
        (TraceKind::Counterexample, w, f)
    } else {
        let head = records
            .iter()
            .find(|r| r.op == "scenario")
            .ok_or_else(|| Error::Parse("trace has no scenario header".into()))?;
        let s: ScenarioFile = serde_json::from_value(head.args["scenario"].clone())
            .map_err(|e| Error::Parse(format!("scenario header: {e}")))?;
        s.validate()?;
        (TraceKind::Scenario, s.run()?, Vec::new())
    };
    let identical = world.trace.to_jsonl().trim_end() == text.trim_end();
    Ok(Replayed {
        kind,
        recorded_digest,
        replayed_digest: format!("{:016x}", world.state_digest()),
        identical,
        findings,
        world,
    })
}
