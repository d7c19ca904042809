//! JSON scenario files: cluster, models, deployments and a workload.
//!
//! A scenario is resolved into a [`SimInput`] by profiling every model that
//! is not profiled on the fleet, preparing the trace and deriving per-model
//! SLOs from each model's single-request latency.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogError, DeployConfig, ModelArchitecture};
use crate::deployment::DEFAULT_BUFFER;
use crate::oracle::{self, NoiseSpec};
use crate::presets;
use crate::profiler::{self, ConfigMap, LatMethod, MemMethod, ProfileError, ProfileOptions};
use crate::simulator::{
    self, ClusterState, DeploySpec, ProfileJobSpec, RemovalSpec, SimError, SimInput, SimOptions,
    SimOutcome, DEFAULT_LOAD_PAUSE_S, DEFAULT_WINDOW_S,
};
use crate::trace::{self, LengthDist, Trace, TraceError, DEFAULT_INTERVAL_S};
use crate::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(String),
    #[error("malformed scenario: {0}")]
    Json(String),
    #[error("unsupported schema_version {0}")]
    SchemaVersion(u32),
    #[error("unknown model preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    #[serde(default)]
    pub num_gpus: Option<usize>,
    #[serde(default, alias = "gpu_capacity_gb")]
    pub capacity_gb: Option<f64>,
    /// Per-GPU capacities; overrides `num_gpus` and `capacity_gb`.
    #[serde(default)]
    pub capacities: Option<Vec<f64>>,
    #[serde(default = "default_window")]
    pub window_s: f64,
}

fn default_window() -> f64 {
    DEFAULT_WINDOW_S
}

impl ClusterSpec {
    pub fn build(&self) -> Result<ClusterState, ScenarioError> {
        let caps = match (&self.capacities, self.num_gpus, self.capacity_gb) {
            (Some(c), _, _) => c.clone(),
            (None, Some(n), Some(cap)) => vec![cap; n],
            _ => {
                return Err(ScenarioError::Invalid(
                    "cluster needs `capacities` or both `num_gpus` and `capacity_gb`".into(),
                ))
            }
        };
        if caps.is_empty() {
            return Err(ScenarioError::Invalid("cluster has no GPUs".into()));
        }
        if caps.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(ScenarioError::Invalid(
                "GPU capacities must be positive".into(),
            ));
        }
        if !(self.window_s.is_finite() && self.window_s > 0.0) {
            return Err(ScenarioError::Invalid(
                "load window must be positive".into(),
            ));
        }
        let mut cluster = ClusterState::with_capacities(&caps);
        cluster.window = self.window_s;
        Ok(cluster)
    }
}

/// A bundled preset by name, or a full inline descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Inline(Box<ModelArchitecture>),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelArchitecture, ScenarioError> {
        let arch = match self {
            ModelSpec::Preset(name) => {
                presets::preset(name).ok_or_else(|| ScenarioError::UnknownPreset(name.clone()))?
            }
            ModelSpec::Inline(arch) => (**arch).clone(),
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    /// CSV file; relative paths resolve against the scenario's directory.
    File(PathBuf),
    /// A bundled sample trace: `code` or `conversation`.
    Sample(String),
    /// Poisson arrivals at a constant rate.
    Poisson {
        rate: f64,
        duration_s: f64,
        lengths: LengthDist,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    pub source: TraceSource,
    #[serde(default = "one")]
    pub rate_factor: f64,
    #[serde(default = "default_interval")]
    pub interval_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub max_output_len: Option<u32>,
    /// Drops arrivals after this many seconds.
    #[serde(default)]
    pub duration_s: Option<f64>,
    /// Assigns requests without a model uniformly over the scenario's models.
    #[serde(default)]
    pub assign_models: bool,
}

fn one() -> f64 {
    1.0
}

fn default_interval() -> f64 {
    DEFAULT_INTERVAL_S
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilingSpec {
    #[serde(default = "default_mem")]
    pub mem_method: MemMethod,
    #[serde(default = "default_lat")]
    pub lat_method: LatMethod,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_profile_gpus")]
    pub num_gpus: u32,
    /// Profile every deployed model on the serving fleet, starting at its
    /// first deployment, instead of offline before the run.
    #[serde(default)]
    pub on_fleet: bool,
}

fn default_mem() -> MemMethod {
    MemMethod::M2
}

fn default_lat() -> LatMethod {
    LatMethod::L2
}

fn default_profile_gpus() -> u32 {
    ProfileOptions::default().num_gpus
}

impl Default for ProfilingSpec {
    fn default() -> Self {
        ProfilingSpec {
            mem_method: default_mem(),
            lat_method: default_lat(),
            noise: NoiseSpec::None,
            seed: 0,
            num_gpus: default_profile_gpus(),
            on_fleet: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloSpec {
    /// SLO = `multiple` × the model's unparallelised FP16 latency.
    #[serde(default = "default_multiple")]
    pub multiple: f64,
    #[serde(default = "default_ref_len")]
    pub reference_output_len: u32,
    /// Explicit per-model SLOs in seconds, overriding the multiple.
    #[serde(default)]
    pub per_model: BTreeMap<String, f64>,
}

fn default_multiple() -> f64 {
    5.0
}

fn default_ref_len() -> u32 {
    crate::deployment::DEFAULT_REFERENCE_LEN
}

impl Default for SloSpec {
    fn default() -> Self {
        SloSpec {
            multiple: default_multiple(),
            reference_output_len: default_ref_len(),
            per_model: BTreeMap::new(),
        }
    }
}

/// Where a run writes its artifacts; relative paths resolve against the
/// scenario's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub requests_csv: Option<PathBuf>,
    #[serde(default)]
    pub plot_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub cluster: ClusterSpec,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub profiling: ProfilingSpec,
    #[serde(default)]
    pub deployments: Vec<DeploySpec>,
    #[serde(default)]
    pub removals: Vec<RemovalSpec>,
    #[serde(default)]
    pub profile_jobs: Vec<ProfileJobSpec>,
    pub trace: TraceSpec,
    #[serde(default = "default_buffer")]
    pub buffer_size: f64,
    #[serde(default)]
    pub slo: SloSpec,
    #[serde(default = "default_pause")]
    pub load_pause_s: f64,
    #[serde(default)]
    pub queue_cap: Option<usize>,
    #[serde(default)]
    pub service_noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub outputs: OutputSpec,
    /// Directory relative paths resolve against; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_buffer() -> f64 {
    DEFAULT_BUFFER
}

fn default_pause() -> f64 {
    DEFAULT_LOAD_PAUSE_S
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| ScenarioError::Json(e.to_string()))?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::SchemaVersion(s.schema_version));
        }
        Ok(s)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        let mut s = Self::from_json(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenarios always serialize")
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn resolve_models(&self) -> Result<BTreeMap<String, ModelArchitecture>, ScenarioError> {
        let mut out = BTreeMap::new();
        for spec in &self.models {
            let arch = spec.resolve()?;
            if out.insert(arch.model_id.clone(), arch).is_some() {
                return Err(ScenarioError::Invalid(format!(
                    "model listed twice: {spec:?}"
                )));
            }
        }
        if out.is_empty() {
            return Err(ScenarioError::Invalid("no models".into()));
        }
        Ok(out)
    }

    pub fn build_trace(
        &self,
        models: &BTreeMap<String, ModelArchitecture>,
    ) -> Result<Trace, ScenarioError> {
        let spec = &self.trace;
        let raw = match &spec.source {
            TraceSource::File(p) => trace::parse_trace(&self.resolve_path(p))?,
            TraceSource::Sample(name) => trace::samples::by_name(name, spec.seed)
                .ok_or_else(|| ScenarioError::Invalid(format!("unknown sample trace `{name}`")))?,
            TraceSource::Poisson {
                rate,
                duration_s,
                lengths,
            } => trace::synth_poisson(*rate, *duration_s, *lengths, spec.seed)?,
        };
        let mut t = trace::scale_trace(&raw, spec.rate_factor, spec.interval_s, spec.seed)?;
        if let Some(end) = spec.duration_s {
            t.truncate_at(end);
        }
        if let Some(max) = spec.max_output_len {
            t.clamp_output(max);
        }
        if spec.assign_models {
            let ids: Vec<String> = models.keys().cloned().collect();
            let mut fill = t.clone();
            fill.entries.retain(|e| e.model_id.is_none());
            let fill = trace::assign_models(&fill, &ids, spec.seed)?;
            let mut it = fill.entries.into_iter();
            for e in t.entries.iter_mut().filter(|e| e.model_id.is_none()) {
                e.model_id = it.next().and_then(|f| f.model_id);
            }
        }
        Ok(t)
    }

    /// Single-request latency at the reference length under the unparallelised
    /// FP16 configuration, times the SLO multiple.
    pub fn derive_slos(
        &self,
        models: &BTreeMap<String, ModelArchitecture>,
    ) -> Result<BTreeMap<String, f64>, ScenarioError> {
        let mut base = BTreeMap::new();
        for (id, arch) in models {
            let lat = oracle::true_latency_params(arch, &DeployConfig::baseline())
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?
                .latency(self.slo.reference_output_len);
            base.insert(id.clone(), lat);
        }
        let ids: Vec<String> = models.keys().cloned().collect();
        let mut slos = trace::derive_slos(&base, &ids, self.slo.multiple)?;
        for (id, v) in &self.slo.per_model {
            if !models.contains_key(id) {
                return Err(ScenarioError::Invalid(format!(
                    "SLO for unknown model `{id}`"
                )));
            }
            if !(v.is_finite() && *v > 0.0) {
                return Err(ScenarioError::Invalid(format!(
                    "SLO for `{id}` must be positive"
                )));
            }
            slos.insert(id.clone(), *v);
        }
        Ok(slos)
    }

    pub fn profile_options(&self) -> ProfileOptions {
        ProfileOptions {
            num_gpus: self.profiling.num_gpus,
            ..ProfileOptions::default()
        }
    }

    /// Profiles one model offline with the scenario's settings.
    pub fn profile(&self, arch: &ModelArchitecture) -> Result<ConfigMap, ScenarioError> {
        let p = &self.profiling;
        Ok(profiler::profile_model(
            arch,
            p.mem_method,
            p.lat_method,
            p.noise,
            p.seed,
            &self.profile_options(),
        )?
        .map)
    }

    /// Explicit profile jobs, plus one per deployed model at its first
    /// deployment when profiling runs on the fleet.
    pub fn effective_profile_jobs(&self) -> Vec<ProfileJobSpec> {
        let mut jobs = self.profile_jobs.clone();
        if !self.profiling.on_fleet {
            return jobs;
        }
        let mut first: BTreeMap<&str, f64> = BTreeMap::new();
        for d in &self.deployments {
            let t = first.entry(d.model.as_str()).or_insert(d.time);
            *t = t.min(d.time);
        }
        for (model, time) in first {
            if !jobs.iter().any(|j| j.model == model) {
                jobs.push(ProfileJobSpec {
                    time,
                    model: model.to_string(),
                    mem_method: self.profiling.mem_method,
                    lat_method: self.profiling.lat_method,
                });
            }
        }
        jobs
    }

    /// Resolves the scenario. Maps in `known` are reused; every other model
    /// that is not profiled on the fleet is profiled offline.
    pub fn build_input_with(
        &self,
        known: &BTreeMap<String, ConfigMap>,
    ) -> Result<SimInput, ScenarioError> {
        if !(0.0..=0.5).contains(&self.buffer_size) {
            return Err(ScenarioError::Invalid(format!(
                "buffer_size {} outside [0, 0.5]",
                self.buffer_size
            )));
        }
        let cluster = self.cluster.build()?;
        let models = self.resolve_models()?;
        let profile_jobs = self.effective_profile_jobs();
        let mut maps = BTreeMap::new();
        for (id, arch) in &models {
            if profile_jobs.iter().any(|j| &j.model == id) {
                continue;
            }
            let map = match known.get(id) {
                Some(m) => m.clone(),
                None => self.profile(arch)?,
            };
            maps.insert(id.clone(), map);
        }
        let trace = self.build_trace(&models)?;
        let slos = self.derive_slos(&models)?;
        let input = SimInput {
            cluster,
            models,
            maps,
            deployments: self.deployments.clone(),
            removals: self.removals.clone(),
            profile_jobs,
            trace,
            slos,
            options: SimOptions {
                buffer: self.buffer_size,
                load_pause_s: self.load_pause_s,
                queue_cap: self.queue_cap,
                seed: self.seed,
                service_noise: self.service_noise,
                profile_noise: self.profiling.noise,
                profile_options: self.profile_options(),
            },
        };
        input.validate()?;
        Ok(input)
    }

    pub fn build_input(&self) -> Result<SimInput, ScenarioError> {
        self.build_input_with(&BTreeMap::new())
    }

    pub fn run(&self) -> Result<SimOutcome, ScenarioError> {
        Ok(simulator::run(&self.build_input()?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
        "cluster": {"num_gpus": 4, "capacity_gb": 48},
        "models": ["llama2-7b"],
        "deployments": [{"time": 0, "model": "llama2-7b", "intent": {"kind": "MinLatency"}}],
        "trace": {"source": {"poisson": {"rate": 0.2, "duration_s": 300,
                  "lengths": {"kind": "fixed", "input": 64, "output": 50}}},
                  "assign_models": true},
        "load_pause_s": 0
    }"#;

    #[test]
    fn small_scenario_runs() {
        let s = Scenario::from_json(SMALL).unwrap();
        let out = s.run().unwrap();
        assert!(out.report.requests_total > 20);
        assert_eq!(out.report.requests_dropped, 0);
        assert_eq!(out.report.slo_attainment, 1.0);
        assert_eq!(out.report.deployments.len(), 1);
    }

    #[test]
    fn default_slo_is_five_times_base_latency() {
        let s = Scenario::from_json(SMALL).unwrap();
        let models = s.resolve_models().unwrap();
        let slos = s.derive_slos(&models).unwrap();
        let base = oracle::true_latency_params(&models["llama2-7b"], &DeployConfig::baseline())
            .unwrap()
            .latency(100);
        assert!((slos["llama2-7b"] - 5.0 * base).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            Scenario::from_json(&SMALL.replace("llama2-7b\"]", "nope\"]"))
                .unwrap()
                .build_input(),
            Err(ScenarioError::UnknownPreset(_))
        ));
        assert!(matches!(
            Scenario::from_json(&SMALL.replace(
                "\"load_pause_s\": 0",
                "\"load_pause_s\": 0, \"schema_version\": 9"
            )),
            Err(ScenarioError::SchemaVersion(9))
        ));
        assert!(matches!(
            Scenario::from_json(
                &SMALL.replace("\"load_pause_s\": 0", "\"load_pause_s\": 0, \"bogus\": 1")
            ),
            Err(ScenarioError::Json(_))
        ));
        let mut s = Scenario::from_json(SMALL).unwrap();
        s.deployments[0].time = -1.0;
        assert!(matches!(
            s.build_input(),
            Err(ScenarioError::Sim(SimError::ScenarioInvalid { .. }))
        ));
    }

    #[test]
    fn json_round_trip() {
        let s = Scenario::from_json(SMALL).unwrap();
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }
}
