//! Commands behind the `iserve-sim` binary.
//!
//! Every command returns a [`CliError`] carrying the process exit code:
//! 2 for validation or profiling failures, 3 when planning finds no feasible
//! configuration and 4 for failures while a scenario runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use iserve_core::catalog::ModelArchitecture;
use iserve_core::deployment::{
    self, check_feasible, rank_with_metrics, DeployError, Intent, IntentKind, PlacementPolicy,
};
use iserve_core::profiler::{self, ConfigMap, LatMethod, MemMethod};
use iserve_core::scenario::{Scenario, ScenarioError};
use iserve_core::simulator::{self, MetricsReport, SimError, SimOutcome};
use iserve_core::SCHEMA_VERSION;
use serde::Serialize;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::validation(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Writes `contents` to `path` through a temporary file in the same
/// directory, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| CliError::runtime(format!("cannot write {}: {e}", path.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents.as_bytes()).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// Loads a scenario and applies a `--seed` override to every seeded stage.
pub fn load_scenario(path: &Path, seed: Option<u64>) -> CliResult<Scenario> {
    let mut s = Scenario::from_path(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
        s.trace.seed = seed;
        s.profiling.seed = seed;
    }
    Ok(s)
}

fn find_model(scenario: &Scenario, model: &str) -> CliResult<ModelArchitecture> {
    let models = scenario.resolve_models()?;
    models.get(model).cloned().ok_or_else(|| {
        CliError::validation(format!("model `{model}` is not defined in the scenario"))
    })
}

pub fn map_file_name(model: &str) -> String {
    format!("{model}.configmap.json")
}

/// Reads every `<model>.configmap.json` in `dir` that matches a scenario model.
pub fn load_maps(dir: &Path, scenario: &Scenario) -> CliResult<BTreeMap<String, ConfigMap>> {
    let mut maps = BTreeMap::new();
    for id in scenario.resolve_models()?.keys() {
        let path = dir.join(map_file_name(id));
        if path.exists() {
            maps.insert(id.clone(), read_map(&path)?);
        }
    }
    Ok(maps)
}

pub fn read_map(path: &Path) -> CliResult<ConfigMap> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
    ConfigMap::from_json(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileSummary {
    pub schema_version: u32,
    pub model: String,
    pub mem_method: String,
    pub lat_method: String,
    pub entries: usize,
    pub peak_gpu_mem_gb: f64,
    pub wall_time_s: f64,
    pub gpu_hours: f64,
    pub map_file: PathBuf,
}

/// Profiles `model` with the given methods and writes its config map.
pub fn cmd_profile(
    scenario: &Scenario,
    model: &str,
    mem: MemMethod,
    lat: LatMethod,
    out_dir: &Path,
) -> CliResult<ProfileSummary> {
    let arch = find_model(scenario, model)?;
    let p = &scenario.profiling;
    let outcome = profiler::profile_model(
        &arch,
        mem,
        lat,
        p.noise,
        p.seed,
        &scenario.profile_options(),
    )
    .map_err(|e| CliError::validation(format!("profiling `{model}` failed: {e}")))?;
    let map = outcome.map;
    if let Some(bad) = map.records.iter().find(|r| !r.is_complete()) {
        let failed = map.records.iter().filter(|r| !r.is_complete()).count();
        return Err(CliError::validation(format!(
            "profiling `{model}` failed for {failed} entries, first {}: {}",
            bad.cfg,
            bad.failure.as_deref().unwrap_or("no estimate")
        )));
    }
    let path = out_dir.join(map_file_name(model));
    write_atomic(&path, &map.to_json())?;
    let cost = map.profiling_cost;
    Ok(ProfileSummary {
        schema_version: SCHEMA_VERSION,
        model: model.to_string(),
        mem_method: mem.to_string(),
        lat_method: lat.to_string(),
        entries: map.records.len(),
        peak_gpu_mem_gb: cost.peak_gpu_mem,
        wall_time_s: cost.wall_time,
        gpu_hours: cost.gpu_hours,
        map_file: path,
    })
}

impl ProfileSummary {
    pub fn render(&self) -> String {
        format!(
            "profiled {} with {}/{}: {} entries\n  peak GPU memory {:.2} GB, wall time {:.1} s, {:.4} GPU-hours\n  wrote {}\n",
            self.model,
            self.mem_method,
            self.lat_method,
            self.entries,
            self.peak_gpu_mem_gb,
            self.wall_time_s,
            self.gpu_hours,
            self.map_file.display()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct PlanRow {
    pub rank: usize,
    pub config: String,
    pub latency_s: f64,
    pub memory_gb: f64,
    pub cost_gb_s: f64,
    pub gpu_hours: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Committed {
    pub config: String,
    pub rank: usize,
    pub gpu_ids: Vec<usize>,
    pub mem_per_gpu_gb: Vec<f64>,
    pub layers_per_stage: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Plan {
    pub schema_version: u32,
    pub model: String,
    pub intent: String,
    pub policy: String,
    pub rows: Vec<PlanRow>,
    pub committed: Committed,
}

/// Ranks `model`'s configurations for `intent` against the scenario's
/// (empty) cluster and shows which one a deployment would commit.
pub fn cmd_plan(
    scenario: &Scenario,
    map: &ConfigMap,
    intent: &Intent,
    policy: &PlacementPolicy,
    top: usize,
) -> CliResult<Plan> {
    let cluster = scenario.cluster.build()?;
    let buffer = scenario.buffer_size;
    let ranked = rank_with_metrics(map, intent).map_err(|e| CliError::validation(e.to_string()))?;
    let rows = ranked
        .iter()
        .take(top)
        .enumerate()
        .map(|(i, m)| PlanRow {
            rank: i + 1,
            config: m.cfg.to_string(),
            latency_s: m.latency,
            memory_gb: m.memory,
            cost_gb_s: m.cost,
            gpu_hours: m.gpu_seconds / 3600.0,
            feasible: check_feasible(&m.cfg, map, &cluster, buffer).is_some(),
        })
        .collect();
    let record =
        deployment::deploy(map, intent, policy, &cluster, buffer, 0.0).map_err(|e| match e {
            DeployError::NoFeasibleConfig { .. } => CliError {
                code: EXIT_INFEASIBLE,
                message: e.to_string(),
            },
            other => CliError::validation(other.to_string()),
        })?;
    Ok(Plan {
        schema_version: SCHEMA_VERSION,
        model: map.model_id.clone(),
        intent: intent.kind.to_string(),
        policy: policy_label(policy),
        rows,
        committed: Committed {
            config: record.cfg.to_string(),
            rank: record.rank + 1,
            gpu_ids: record.gpu_ids,
            mem_per_gpu_gb: record.mem_per_gpu,
            layers_per_stage: record.layers_per_stage,
        },
    })
}

fn policy_label(p: &PlacementPolicy) -> String {
    match p.kind {
        deployment::PolicyKind::Hybrid => format!("Hybrid(theta={})", p.theta),
        k => k.to_string(),
    }
}

impl Plan {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{} ranked for {} ({} placement)\n",
            self.model, self.intent, self.policy
        );
        let _ = writeln!(
            out,
            "{:>4}  {:<28} {:>10} {:>10} {:>12} {:>10}  feasible",
            "rank", "config", "latency_s", "memory_gb", "cost_gb_s", "gpu_hours"
        );
        for r in &self.rows {
            let mark = if r.config == self.committed.config {
                " *"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "{:>4}  {:<28} {:>10.3} {:>10.2} {:>12.2} {:>10.6}  {}{mark}",
                r.rank,
                r.config,
                r.latency_s,
                r.memory_gb,
                r.cost_gb_s,
                r.gpu_hours,
                if r.feasible { "yes" } else { "no" }
            );
        }
        let c = &self.committed;
        let _ = writeln!(
            out,
            "committed: {} (rank {}) on GPUs {:?}, layers per stage {:?}",
            c.config, c.rank, c.gpu_ids, c.layers_per_stage
        );
        out
    }
}

/// Artifacts written by one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub report: PathBuf,
    pub requests_csv: PathBuf,
    pub plot_csv: PathBuf,
}

impl RunArtifacts {
    /// `--out` wins; otherwise the scenario's `outputs`, defaulting to an
    /// `out/` directory next to the scenario.
    pub fn resolve(scenario: &Scenario, out_dir: Option<&Path>) -> Self {
        let names = ("report.json", "requests.csv", "plot.csv");
        if let Some(dir) = out_dir {
            return RunArtifacts {
                report: dir.join(names.0),
                requests_csv: dir.join(names.1),
                plot_csv: dir.join(names.2),
            };
        }
        let dir = scenario.base_dir.join("out");
        let o = &scenario.outputs;
        let pick = |p: &Option<PathBuf>, name: &str| {
            p.as_ref()
                .map_or_else(|| dir.join(name), |p| scenario.resolve_path(p))
        };
        RunArtifacts {
            report: pick(&o.report, names.0),
            requests_csv: pick(&o.requests_csv, names.1),
            plot_csv: pick(&o.plot_csv, names.2),
        }
    }
}

/// Runs a scenario, reusing any supplied config maps.
pub fn simulate(scenario: &Scenario, maps: &BTreeMap<String, ConfigMap>) -> CliResult<SimOutcome> {
    let input = scenario.build_input_with(maps)?;
    simulator::run(&input).map_err(|e| match e {
        SimError::ScenarioInvalid { .. } => CliError::validation(e.to_string()),
        other => CliError::runtime(other.to_string()),
    })
}

pub fn write_artifacts(outcome: &SimOutcome, artifacts: &RunArtifacts) -> CliResult<()> {
    write_atomic(&artifacts.report, &outcome.report.to_json())?;
    write_atomic(&artifacts.requests_csv, &outcome.report.requests_csv())?;
    write_atomic(
        &artifacts.plot_csv,
        &outcome.report.plot_csv(&outcome.cluster),
    )?;
    Ok(())
}

/// Deployments that failed for lack of memory, as an exit-4 error.
pub fn oom_error(report: &MetricsReport) -> Option<CliError> {
    let oom: Vec<String> = report
        .failures
        .iter()
        .filter(|f| f.kind == "oom")
        .map(|f| format!("{} at {:.1}s", f.model, f.time))
        .collect();
    (!oom.is_empty())
        .then(|| CliError::runtime(format!("no feasible configuration for {}", oom.join(", "))))
}

pub fn summarize(report: &MetricsReport) -> String {
    let p = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    format!(
        "requests {} (completed {}, dropped {}), SLO attainment {:.3}, latency p50/p95/p99 {}/{}/{} s, \
         GPUs used {} (distinct {}), peak memory {:.2} GB, {:.4} GPU-hours",
        report.requests_total,
        report.requests_completed,
        report.requests_dropped,
        report.slo_attainment,
        p(report.latency_p50),
        p(report.latency_p95),
        p(report.latency_p99),
        report.gpus_used,
        report.distinct_gpus_used,
        report.total_memory,
        report.gpu_hours
    )
}

/// Runs the scenario and writes the report, request log and plot data.
pub fn cmd_run(
    scenario: &Scenario,
    maps: &BTreeMap<String, ConfigMap>,
    out_dir: Option<&Path>,
) -> CliResult<MetricsReport> {
    let outcome = simulate(scenario, maps)?;
    write_artifacts(&outcome, &RunArtifacts::resolve(scenario, out_dir))?;
    match oom_error(&outcome.report) {
        Some(e) => Err(e),
        None => Ok(outcome.report),
    }
}

/// One `--sweep KEY=V1,V2,...` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: SweepKey,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKey {
    Rate,
    Seed,
    Buffer,
    SloMultiple,
}

impl SweepKey {
    fn label(self) -> &'static str {
        match self {
            SweepKey::Rate => "rate",
            SweepKey::Seed => "seed",
            SweepKey::Buffer => "buffer",
            SweepKey::SloMultiple => "slo",
        }
    }
}

impl FromStr for Sweep {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| CliError::validation(format!("invalid sweep `{s}`: {m}"));
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| bad("expected KEY=V1,V2,...".into()))?;
        let key = match key.trim() {
            "rate" | "rate_factor" => SweepKey::Rate,
            "seed" => SweepKey::Seed,
            "buffer" | "buffer_size" => SweepKey::Buffer,
            "slo" | "slo_multiple" => SweepKey::SloMultiple,
            k => return Err(bad(format!("unknown key `{k}` (rate, seed, buffer, slo)"))),
        };
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("`{v}`: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err(bad("no values".into()));
        }
        if key == SweepKey::Seed && values.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(bad("seeds must be non-negative integers".into()));
        }
        Ok(Sweep { key, values })
    }
}

impl Sweep {
    /// The scenario for one point of the sweep and its directory name.
    pub fn apply(&self, base: &Scenario, value: f64) -> (Scenario, String) {
        let mut s = base.clone();
        match self.key {
            SweepKey::Rate => s.trace.rate_factor = value,
            SweepKey::Seed => {
                let seed = value as u64;
                s.seed = seed;
                s.trace.seed = seed;
                s.profiling.seed = seed;
            }
            SweepKey::Buffer => s.buffer_size = value,
            SweepKey::SloMultiple => s.slo.multiple = value,
        }
        (s, format!("{}={value}", self.key.label()))
    }
}

/// Runs every point of `sweep` concurrently; each point writes its artifacts
/// to `out_dir/<key>=<value>/`. Results come back in sweep order.
pub fn cmd_sweep(
    base: &Scenario,
    maps: &BTreeMap<String, ConfigMap>,
    sweep: &Sweep,
    out_dir: &Path,
) -> Vec<(String, CliResult<MetricsReport>)> {
    let points: Vec<(Scenario, String)> =
        sweep.values.iter().map(|v| sweep.apply(base, *v)).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = points
            .iter()
            .map(|(s, name)| {
                let dir = out_dir.join(name);
                scope.spawn(move || cmd_run(s, maps, Some(&dir)))
            })
            .collect();
        points
            .iter()
            .zip(handles)
            .map(|((_, name), h)| {
                let result = h.join().unwrap_or_else(|_| {
                    Err(CliError::runtime(format!("sweep point {name} panicked")))
                });
                (name.clone(), result)
            })
            .collect()
    })
}

/// A compared policy: an intent override, optionally with a placement
/// override, written `INTENT` or `INTENT@POLICY[:THETA]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    pub label: String,
    pub intent: IntentKind,
    pub placement: Option<PlacementPolicy>,
}

impl FromStr for PolicySpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (intent, placement) = match s.split_once('@') {
            Some((i, p)) => (i, Some(p)),
            None => (s, None),
        };
        let intent: IntentKind = intent.trim().parse().map_err(CliError::validation)?;
        if intent.is_slo() {
            return Err(CliError::validation(format!(
                "`{s}`: SLO intents need a target and cannot be compared by name"
            )));
        }
        let placement = placement
            .map(|p| {
                let (kind, theta) = match p.split_once(':') {
                    Some((k, t)) => {
                        let theta = t.parse::<f64>().map_err(|e| {
                            CliError::validation(format!("`{s}`: theta `{t}`: {e}"))
                        })?;
                        (k, theta)
                    }
                    None => (p, 0.5),
                };
                let kind = kind.trim().parse().map_err(CliError::validation)?;
                let policy = PlacementPolicy { kind, theta };
                policy
                    .validate()
                    .map_err(|e| CliError::validation(e.to_string()))?;
                Ok::<_, CliError>(policy)
            })
            .transpose()?;
        Ok(PolicySpec {
            label: s.trim().to_string(),
            intent,
            placement,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct CompareRow {
    pub policy: String,
    pub slo_attainment: f64,
    pub latency_p95: Option<f64>,
    pub total_memory_gb: f64,
    pub gpus_used: usize,
    pub distinct_gpus_used: usize,
    pub requests_dropped: usize,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub rows: Vec<CompareRow>,
}

/// Re-runs the scenario once per policy with every deployment's intent (and
/// optionally placement) overridden. All runs share seeds and config maps.
pub fn cmd_compare(
    scenario: &Scenario,
    maps: &BTreeMap<String, ConfigMap>,
    policies: &[PolicySpec],
) -> CliResult<Comparison> {
    if policies.len() < 2 {
        return Err(CliError::validation("compare needs at least two policies"));
    }
    // profile once so every policy plans from the same maps
    let mut maps = maps.clone();
    for (id, arch) in scenario.resolve_models()? {
        if let std::collections::btree_map::Entry::Vacant(slot) = maps.entry(id) {
            slot.insert(scenario.profile(&arch)?);
        }
    }
    let mut rows = Vec::new();
    for p in policies {
        let mut s = scenario.clone();
        for d in &mut s.deployments {
            d.intent = Intent {
                kind: p.intent,
                target: None,
                reference_output_len: d.intent.reference_output_len,
            };
            if let Some(placement) = p.placement {
                d.policy = placement;
            }
        }
        let report = simulate(&s, &maps)?.report;
        rows.push(CompareRow {
            policy: p.label.clone(),
            slo_attainment: report.slo_attainment,
            latency_p95: report.latency_p95,
            total_memory_gb: report.total_memory,
            gpus_used: report.gpus_used,
            distinct_gpus_used: report.distinct_gpus_used,
            requests_dropped: report.requests_dropped,
            failures: report
                .failures
                .iter()
                .map(|f| format!("{}: {} ({})", f.kind, f.model, f.message))
                .collect(),
        });
    }
    Ok(Comparison {
        schema_version: SCHEMA_VERSION,
        rows,
    })
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<24} {:>10} {:>10} {:>10} {:>5} {:>8} {:>8}  {}\n",
            "policy", "attainment", "p95_s", "memory_gb", "gpus", "distinct", "dropped", "failures"
        );
        for r in &self.rows {
            let p95 = r.latency_p95.map_or("-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                out,
                "{:<24} {:>10.3} {:>10} {:>10.2} {:>5} {:>8} {:>8}  {}",
                r.policy,
                r.slo_attainment,
                p95,
                r.total_memory_gb,
                r.gpus_used,
                r.distinct_gpus_used,
                r.requests_dropped,
                if r.failures.is_empty() {
                    "-".to_string()
                } else {
                    r.failures.join("; ")
                }
            );
        }
        out
    }
}
