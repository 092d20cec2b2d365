//! `leap`: runs scenarios, explores the small configuration, compares the
//! two isolation modes and reproduces the built-in experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use leap_core::experiments::{self, compare};
use leap_core::explore::{replay, Alphabet, ExploreConfig};
use leap_core::{
    explore, random_scenario, replay_trace, Error, IsolationMode, MetricsReport, Mutation,
    ScenarioFile, Suite, SuiteReport, TraceKind,
};

/// Exit status for a run that found a violation or an unblocked attack.
const EXIT_DIRTY: u8 = 1;
/// Exit status for unreadable, unparsable or invalid input.
const EXIT_INPUT: u8 = 2;
/// Exit status when exploration ran out of budget.
const EXIT_BUDGET: u8 = 3;

#[derive(Parser)]
#[command(
    name = "leap",
    version,
    about = "TrustZone sandbox architecture simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Leap,
    Tzasc,
}

impl From<Mode> for IsolationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Leap => IsolationMode::Leap,
            Mode::Tzasc => IsolationMode::Tzasc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlphabetArg {
    Honest,
    Adversarial,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario to its horizon.
    Run {
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Disable one defense (repeatable).
        #[arg(long, value_parser = parse_mutation)]
        mutate: Vec<Mutation>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Exhaustively explore interleavings on a scenario's platform (the
    /// small one by default).
    Explore {
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        depth: usize,
        /// Maximum number of distinct states.
        #[arg(long, default_value_t = 2_000_000)]
        budget: usize,
        #[arg(long, value_parser = parse_mutation)]
        mutate: Vec<Mutation>,
        #[arg(long, value_enum, default_value = "adversarial")]
        alphabet: AlphabetArg,
        /// Directory for counterexample traces.
        #[arg(long, default_value = "counterexamples")]
        out_dir: PathBuf,
    },
    /// Run a scenario under both isolation modes.
    Compare {
        scenario: PathBuf,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Reproduce a built-in experiment: cpu_adjust, dl_batch or mem_query.
    Bench {
        suite: String,
        /// Print rows as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Re-execute a recorded trace and check its final state digest.
    Replay { trace: PathBuf },
    /// Run seeded random honest scenarios and count violations.
    Sweep {
        #[arg(long, default_value_t = 1000)]
        count: u64,
        #[arg(long, default_value_t = 200)]
        events: usize,
        #[arg(long, default_value_t = 0)]
        start_seed: u64,
    },
}

fn parse_mutation(s: &str) -> Result<Mutation, String> {
    s.parse()
}

fn load(path: &Path) -> Result<ScenarioFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ScenarioFile::parse(&text)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn cmd_run(
    path: &Path,
    seed: Option<u64>,
    mode: Option<Mode>,
    mutate: &[Mutation],
    trace_out: Option<&Path>,
    metrics_out: Option<&Path>,
) -> Result<u8> {
    let mut s = load(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(m) = mode {
        s.mode = m.into();
    }
    s.mutate.extend_from_slice(mutate);
    let w = s.run()?;
    let m = MetricsReport::from_world(&w);
    if let Some(p) = trace_out {
        write(p, &w.trace.to_jsonl())?;
    }
    match metrics_out {
        Some(p) => write(p, &to_json(&m)?)?,
        None => print!("{}", to_json(&m)?),
    }
    for v in &w.stats.violations {
        eprintln!("violation: {v}");
    }
    for a in w.stats.attacks.iter().filter(|a| !a.blocked) {
        eprintln!("unblocked attack: {:?}", a.kind);
    }
    Ok(if m.clean() { 0 } else { EXIT_DIRTY })
}

fn cmd_explore(
    path: Option<&Path>,
    depth: usize,
    budget: usize,
    mutate: &[Mutation],
    alphabet: AlphabetArg,
    out_dir: &Path,
) -> Result<u8> {
    let mut cfg = match path {
        Some(p) => {
            let mut s = load(p)?;
            s.mutate.extend_from_slice(mutate);
            ExploreConfig::from_scenario(&s, depth)
        }
        None => ExploreConfig::small(leap_core::Defenses::with_mutations(mutate), depth),
    };
    cfg.budget = budget;
    cfg.alphabet = match alphabet {
        AlphabetArg::Honest => Alphabet::Honest,
        AlphabetArg::Adversarial => Alphabet::Adversarial,
    };
    let report = explore(&cfg)?;
    println!(
        "states {} transitions {} depth {} violating {} leaking {}",
        report.states_visited,
        report.transitions,
        report.max_depth_reached,
        report.violating_states,
        report.leaking_states
    );
    if report.counterexamples.is_empty() {
        return Ok(0);
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (i, cx) in report.counterexamples.iter().enumerate() {
        let (w, _) = replay(&cfg, &cx.ops)?;
        let kinds: Vec<String> = cx.findings.iter().map(|f| f.kind()).collect();
        let file = out_dir.join(format!("cx-{i:03}.jsonl"));
        write(&file, &w.trace.to_jsonl())?;
        let ops: Vec<&str> = cx.ops.iter().map(|o| o.name()).collect();
        println!(
            "{}: [{}] -> {}",
            file.display(),
            ops.join(", "),
            kinds.join(", ")
        );
    }
    Ok(EXIT_DIRTY)
}

fn cmd_compare(path: &Path, metrics_out: Option<&Path>) -> Result<u8> {
    let s = load(path)?;
    let r = compare(&s)?;
    for m in [&r.leap, &r.tzasc] {
        println!(
            "{:<6} requested {} max concurrent {} rejected {}",
            format!("{:?}", m.mode).to_lowercase(),
            m.requested,
            m.max_concurrent,
            m.rejected
        );
    }
    for (h, d) in &r.completion_delta_ms {
        println!("completion delta {h}: {d:+.3} ms");
    }
    if let Some(p) = metrics_out {
        write(p, &to_json(&r)?)?;
    }
    let clean = r.leap.metrics.clean() && r.tzasc.metrics.clean();
    Ok(if clean { 0 } else { EXIT_DIRTY })
}

fn cmd_bench(name: &str, json: bool) -> Result<u8> {
    let suite: Suite = name.parse()?;
    let report = experiments::run_suite(suite)?;
    if json {
        print!("{}", to_json(&report)?);
        return Ok(0);
    }
    match report {
        SuiteReport::CpuAdjust(rows) => {
            println!(
                "{:<16} {:>10} {:>10} {:>7} {:>9}",
                "transfer", "plain ms", "busy ms", "ratio", "reference"
            );
            let reference = [199.0 / 79.0, 92.0 / 62.0, 137.0 / 55.0, 72.0 / 42.0];
            for (r, want) in rows.iter().zip(reference) {
                println!(
                    "{:<16} {:>10.3} {:>10.3} {:>7.3} {:>9.3}",
                    r.name, r.unoptimized_ms, r.optimized_ms, r.ratio, want
                );
            }
        }
        SuiteReport::DlBatch(rows) => {
            println!(
                "{:>6} {:>6} {:>12} {:>12} {:>8} {:>6}",
                "images", "extra", "static ms", "dynamic ms", "speedup", "added"
            );
            for r in rows {
                println!(
                    "{:>6} {:>6} {:>12.1} {:>12.1} {:>8.3} {:>6}",
                    r.images, r.extra_cores, r.baseline_ms, r.dynamic_ms, r.speedup, r.cores_added
                );
            }
        }
        SuiteReport::MemQuery(rows) => {
            println!(
                "{:<14} {:>12} {:>12} {:>8} {:>8}",
                "strategy", "completion", "utilization", "attach", "detach"
            );
            for r in rows {
                println!(
                    "{:<14} {:>12.1} {:>12.4} {:>8} {:>8}",
                    r.strategy, r.completion_ms, r.utilization, r.attaches, r.detaches
                );
            }
        }
    }
    Ok(0)
}

fn cmd_replay(path: &Path) -> Result<u8> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let r = replay_trace(&text)?;
    let kind = match r.kind {
        TraceKind::Scenario => "scenario",
        TraceKind::Counterexample => "counterexample",
    };
    println!(
        "{kind} replayed: state digest {} (recorded {}), trace {}",
        r.replayed_digest,
        r.recorded_digest.as_deref().unwrap_or("none"),
        if r.identical { "identical" } else { "differs" }
    );
    for f in &r.findings {
        println!("finding: {}", serde_json::to_string(f)?);
    }
    if !r.matches() {
        anyhow::bail!("replayed state digest does not match the recording");
    }
    Ok(0)
}

fn cmd_sweep(count: u64, events: usize, start: u64) -> Result<u8> {
    let mut dirty = 0;
    for seed in start..start + count {
        let s = random_scenario(seed, events);
        let mut cfg = s.world_config();
        cfg.trace = false;
        let w = s.run_with(cfg)?;
        if !MetricsReport::from_world(&w).clean() {
            dirty += 1;
            eprintln!("seed {seed}: {} violations", w.stats.violations.len());
        }
    }
    println!("{count} scenarios, {dirty} with violations");
    Ok(if dirty == 0 { 0 } else { EXIT_DIRTY })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            mode,
            mutate,
            trace_out,
            metrics_out,
        } => cmd_run(
            scenario,
            *seed,
            *mode,
            mutate,
            trace_out.as_deref(),
            metrics_out.as_deref(),
        ),
        Cmd::Explore {
            scenario,
            depth,
            budget,
            mutate,
            alphabet,
            out_dir,
        } => cmd_explore(
            scenario.as_deref(),
            *depth,
            *budget,
            mutate,
            *alphabet,
            out_dir,
        ),
        Cmd::Compare {
            scenario,
            metrics_out,
        } => cmd_compare(scenario, metrics_out.as_deref()),
        Cmd::Bench { suite, json } => cmd_bench(suite, *json),
        Cmd::Replay { trace } => cmd_replay(trace),
        Cmd::Sweep {
            count,
            events,
            start_seed,
        } => cmd_sweep(*count, *events, *start_seed),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<Error>() {
                Some(Error::BudgetExceeded { .. }) => EXIT_BUDGET,
                _ => EXIT_INPUT,
            };
            ExitCode::from(code)
        }
    }
}
