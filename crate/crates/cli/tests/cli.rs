use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use iserve_core::catalog::enumerate_configs;
use iserve_core::presets;
use iserve_core::ConfigMap;
use iserve_sim::{Comparison, Plan};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iserve-sim"))
}

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/smoke.json")
}

fn four_models() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/four_models.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_scenario(dir: &TempDir, name: &str, json: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, json).unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SIX_B: &str = r#"{
    "cluster": {"num_gpus": 8, "capacity_gb": 48},
    "models": ["gptj-6b", "falcon-40b", "llama2-70b"],
    "trace": {"source": {"sample": "code"}}
}"#;

#[test]
fn profile_writes_a_complete_map() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(&dir, "s.json", SIX_B);
    let out = dir.path().join("maps");
    let o = run(&[
        "profile",
        "--scenario",
        p(&scenario),
        "--model",
        "gptj-6b",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("peak GPU memory"));
    let map =
        ConfigMap::from_json(&std::fs::read_to_string(out.join("gptj-6b.configmap.json")).unwrap())
            .unwrap();
    let expected = enumerate_configs(&presets::preset("gptj-6b").unwrap(), 8).len();
    assert_eq!(map.records.len(), expected);
    assert_eq!(map.schema_version, 1);
}

#[test]
fn fingerprint_profiling_uses_less_memory() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(&dir, "s.json", SIX_B);
    let peak = |mem: &str, lat: &str| {
        let o = run(&[
            "profile",
            "--scenario",
            p(&scenario),
            "--model",
            "falcon-40b",
            "--mem",
            mem,
            "--lat",
            lat,
            "--json",
            "--out",
            p(dir.path()),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        v["peak_gpu_mem_gb"].as_f64().unwrap()
    };
    assert!(peak("M2", "L2") < peak("M1", "L1"));
}

#[test]
fn unknown_model_exits_2() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(&dir, "s.json", SIX_B);
    let o = run(&[
        "profile",
        "--scenario",
        p(&scenario),
        "--model",
        "ghost-1b",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ghost-1b"));
}

#[test]
fn noisy_profiling_failure_names_the_config() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(
        &dir,
        "s.json",
        &SIX_B.replace(
            r#""trace""#,
            r#""profiling": {"noise": {"kind": "multiplicative", "sigma": 0.3}}, "trace""#,
        ),
    );
    let o = run(&[
        "profile",
        "--scenario",
        p(&scenario),
        "--model",
        "llama2-70b",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tp"), "{}", stderr(&o));
}

fn plan(scenario: &Path, model: &str, intent: &str) -> (Output, Option<Plan>) {
    let o = run(&[
        "plan",
        "--scenario",
        p(scenario),
        "--model",
        model,
        "--intent",
        intent,
        "--json",
    ]);
    let plan = serde_json::from_str(&stdout(&o)).ok();
    (o, plan)
}

#[test]
fn plan_on_empty_cluster_ranks_memory_argmin_first() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(&dir, "s.json", SIX_B);
    let (o, plan) = plan(&scenario, "llama2-70b", "MinMemory");
    assert!(o.status.success(), "{}", stderr(&o));
    let plan = plan.unwrap();
    assert_eq!(plan.rows.len(), 10);
    let min = plan
        .rows
        .iter()
        .map(|r| r.memory_gb)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(plan.rows[0].memory_gb, min);
    assert!(plan.rows[0].feasible);
    assert_eq!(plan.committed.config, plan.rows[0].config);
    // the JSON form round-trips
    let again: Plan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
    assert_eq!(again, plan);
}

#[test]
fn plan_marks_infeasible_top_choice() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(
        &dir,
        "s.json",
        &SIX_B.replace(r#""num_gpus": 8"#, r#""num_gpus": 2"#),
    );
    let (o, plan) = plan(&scenario, "llama2-70b", "MinLatency");
    assert!(o.status.success(), "{}", stderr(&o));
    let plan = plan.unwrap();
    assert!(!plan.rows[0].feasible);
    assert_ne!(plan.committed.config, plan.rows[0].config);
    assert!(plan.committed.rank > 1);
    let table = run(&["plan", "--scenario", p(&scenario), "--model", "llama2-70b"]);
    assert!(stdout(&table).lines().nth(2).unwrap().ends_with("no"));
}

#[test]
fn plan_without_any_fit_exits_3() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(
        &dir,
        "s.json",
        &SIX_B.replace(
            r#""num_gpus": 8, "capacity_gb": 48"#,
            r#""num_gpus": 1, "capacity_gb": 16"#,
        ),
    );
    let (o, _) = plan(&scenario, "llama2-70b", "MinMemory");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn smoke_run_emits_all_artifacts_quickly() {
    let dir = TempDir::new().unwrap();
    let start = Instant::now();
    let o = run(&["run", "--scenario", p(&smoke()), "--out", p(dir.path())]);
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["report.json", "requests.csv", "plot.csv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["schema_version"], 1);
    assert!(report["requests_total"].as_u64().unwrap() > 0);
    for name in ["requests.csv", "plot.csv"] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(text.starts_with("# schema_version=1\n"), "{name}");
    }
}

#[test]
fn same_seed_gives_identical_request_logs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        let o = run(&[
            "run",
            "--scenario",
            p(&smoke()),
            "--seed",
            "7",
            "--out",
            p(d.path()),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &TempDir| std::fs::read(d.path().join("requests.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn sweep_emits_one_report_per_point() {
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "run",
        "--scenario",
        p(&smoke()),
        "--sweep",
        "rate=0.1,0.2,0.4",
        "--out",
        p(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for v in ["0.1", "0.2", "0.4"] {
        assert!(dir.path().join(format!("rate={v}/report.json")).exists());
    }
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn run_reuses_saved_maps() {
    let dir = TempDir::new().unwrap();
    let maps = dir.path().join("maps");
    for model in ["llama2-7b", "gptj-6b"] {
        let o = run(&[
            "profile",
            "--scenario",
            p(&smoke()),
            "--model",
            model,
            "--out",
            p(&maps),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let with = dir.path().join("with");
    let without = dir.path().join("without");
    assert!(run(&[
        "run",
        "--scenario",
        p(&smoke()),
        "--maps",
        p(&maps),
        "--out",
        p(&with)
    ])
    .status
    .success());
    assert!(
        run(&["run", "--scenario", p(&smoke()), "--out", p(&without)])
            .status
            .success()
    );
    let read = |d: &Path| std::fs::read(d.join("requests.csv")).unwrap();
    assert_eq!(read(&with), read(&without));
}

#[test]
fn invalid_scenario_exits_2() {
    let dir = TempDir::new().unwrap();
    let text = std::fs::read_to_string(smoke()).unwrap().replace(
        r#""time_s": 0, "model": "gptj-6b""#,
        r#""time_s": -5, "model": "gptj-6b""#,
    );
    let scenario = write_scenario(&dir, "bad.json", &text);
    let o = run(&["run", "--scenario", p(&scenario), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let missing = run(&["run", "--scenario", "/nonexistent/scenario.json"]);
    assert_eq!(missing.status.code(), Some(2));
}

const UNDERSIZED: &str = r#"{
    "cluster": {"num_gpus": 8, "capacity_gb": 16},
    "models": ["llama2-70b"],
    "deployments": [{"time_s": 0, "model": "llama2-70b", "intent": {"kind": "MaxPp"}}],
    "trace": {"source": {"poisson": {"rate": 0.05, "duration_s": 300,
              "lengths": {"kind": "fixed", "input": 128, "output": 32}}}},
    "load_pause_s": 0
}"#;

#[test]
fn runtime_oom_exits_4_naming_the_model() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(&dir, "s.json", UNDERSIZED);
    let o = run(&["run", "--scenario", p(&scenario), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("llama2-70b"));
    assert!(dir.path().join("report.json").exists());
}

fn compare(scenario: &Path, policies: &str) -> Comparison {
    let o = run(&[
        "compare",
        "--scenario",
        p(scenario),
        "--policies",
        policies,
        "--json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn min_memory_needs_no_more_memory_than_max_tp() {
    let table = compare(&four_models(), "MinMemory,MaxTp");
    assert!(table.rows[0].total_memory_gb <= table.rows[1].total_memory_gb);
}

#[test]
fn max_pp_on_undersized_cluster_records_oom() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(&dir, "s.json", UNDERSIZED);
    let table = compare(&scenario, "MaxPp,MinMemory");
    assert!(table.rows[0].failures.iter().any(|f| f.starts_with("oom")));
    assert!(table.rows[1].failures.is_empty());
    assert_eq!(table.rows[1].requests_dropped, 0);
}

#[test]
fn identical_policies_give_identical_rows() {
    let table = compare(&smoke(), "MinCost,MinCost");
    assert_eq!(table.rows[0], table.rows[1]);
    let o = run(&[
        "compare",
        "--scenario",
        p(&smoke()),
        "--policies",
        "MinCost",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
