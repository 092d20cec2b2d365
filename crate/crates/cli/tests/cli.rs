use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn leap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leap"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("leap runs")
}

fn scenario(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name]
        .iter()
        .collect();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn cost_ms(trace: &str, name: &str) -> Vec<f64> {
    trace
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|r| r["op"] == "cost" && r["args"]["name"] == name)
        .map(|r| r["args"]["duration_us"].as_f64().unwrap() / 1000.0)
        .collect()
}

#[test]
fn minimal_run_is_clean_and_charges_boot_and_shutdown() {
    let dir = TempDir::new().unwrap();
    let o = leap(
        &[
            "run",
            &scenario("minimal.toml"),
            "--trace-out",
            "t.jsonl",
            "--metrics-out",
            "m.json",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trace = fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    assert_eq!(cost_ms(&trace, "boot"), vec![532.0]);
    assert_eq!(cost_ms(&trace, "shutdown"), vec![629.0]);
    for line in trace.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["time_us", "actor", "op", "args", "verdict"] {
            assert!(r.get(key).is_some(), "{key} missing in {line}");
        }
    }
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(m["violations"], 0);
    assert_eq!(m["sandboxes"].as_array().unwrap().len(), 1);
}

#[test]
fn unknown_device_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        r#"format = "leap-scenario/1"

[[apps]]
id = "a"

[[timeline]]
at_ms = 0.0
op = "create_sandbox"
handle = "x"
app = "a"

[[timeline]]
at_ms = 1.0
op = "request_peripheral"
sandbox = "x"
device = 42
"#,
    )
    .unwrap();
    let o = leap(&["run", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown device 42"), "{}", stderr(&o));
}

#[test]
fn parse_error_names_line_and_column() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "format = \"leap-scenario/1\"\nseed = = 1\n",
    )
    .unwrap();
    let o = leap(&["run", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 2") && err.contains("column"), "{err}");
}

#[test]
fn same_seed_gives_same_digest() {
    let dir = TempDir::new().unwrap();
    let digest = |seed: &str, out: &str| {
        let o = leap(
            &[
                "run",
                &scenario("workloads.toml"),
                "--seed",
                seed,
                "--metrics-out",
                out,
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(out)).unwrap()).unwrap();
        m["trace_digest"].as_str().unwrap().to_string()
    };
    assert_eq!(digest("11", "a.json"), digest("11", "b.json"));
    assert_ne!(digest("11", "a.json"), digest("12", "c.json"));
}

#[test]
fn trace_replays_to_the_same_state() {
    let dir = TempDir::new().unwrap();
    let o = leap(
        &[
            "run",
            &scenario("workloads.toml"),
            "--trace-out",
            "t.jsonl",
            "--metrics-out",
            "m.json",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let o = leap(&["replay", "t.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("identical"));

    let trace = fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    let forged = trace.replace("\"state_digest\":\"", "\"state_digest\":\"0");
    fs::write(dir.path().join("forged.jsonl"), forged).unwrap();
    assert_ne!(
        leap(&["replay", "forged.jsonl"], dir.path()).status.code(),
        Some(0)
    );
}

#[test]
fn attacks_are_blocked_unless_a_defense_is_off() {
    let dir = TempDir::new().unwrap();
    let o = leap(&["run", &scenario("attacks.toml")], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["attacks"], 7);
    assert_eq!(m["unblocked_attacks"], 0);

    let o = leap(
        &["run", &scenario("attacks.toml"), "--mutate", "no_smmu"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("DmaBypass"));
}

#[test]
fn tzasc_mode_rejects_the_fourth_sandbox() {
    let dir = TempDir::new().unwrap();
    let o = leap(
        &[
            "run",
            &scenario("concurrency.toml"),
            "--mode",
            "tzasc",
            "--metrics-out",
            "m.json",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(m["max_concurrent"], 3);
}

#[test]
fn compare_reports_both_limits() {
    let dir = TempDir::new().unwrap();
    let o = leap(
        &[
            "compare",
            &scenario("concurrency.toml"),
            "--metrics-out",
            "c.json",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let c: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("c.json")).unwrap()).unwrap();
    assert_eq!(c["leap"]["max_concurrent"], 7);
    assert_eq!(c["leap"]["rejected"], 0);
    assert_eq!(c["tzasc"]["max_concurrent"], 3);
    assert_eq!(c["tzasc"]["rejected"], 4);
}

#[test]
fn explore_without_sanitize_writes_replayable_counterexamples() {
    let dir = TempDir::new().unwrap();
    let o = leap(
        &[
            "explore",
            "--depth",
            "5",
            "--mutate",
            "no_sanitize",
            "--out-dir",
            "cx",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let files: Vec<_> = fs::read_dir(dir.path().join("cx"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert!(!files.is_empty());
    for f in files {
        let o = leap(&["replay", f.to_str().unwrap()], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("finding"));
    }
}

#[test]
fn explore_of_bundled_small_config_is_clean() {
    let dir = TempDir::new().unwrap();
    let o = leap(
        &["explore", &scenario("small.toml"), "--depth", "6"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("violating 0 leaking 0"));
    assert!(!dir.path().join("counterexamples").exists());
}

#[test]
fn tiny_budget_reports_budget_exceeded() {
    let dir = TempDir::new().unwrap();
    let o = leap(&["explore", "--depth", "12", "--budget", "50"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("budget of 50 states exceeded after"), "{err}");
}

#[test]
fn bench_suites() {
    let dir = TempDir::new().unwrap();
    let o = leap(&["bench", "cpu_adjust", "--json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["suite"], "cpu_adjust");
    assert_eq!(r["rows"].as_array().unwrap().len(), 4);
    for s in ["dl_batch", "mem_query"] {
        assert_eq!(leap(&["bench", s], dir.path()).status.code(), Some(0));
    }
    let o = leap(&["bench", "lmbench"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown bench suite"));
}

#[test]
fn sweep_is_clean() {
    let dir = TempDir::new().unwrap();
    let o = leap(&["sweep", "--count", "20", "--events", "100"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
