//! Estimates latency and memory for every deployment configuration of a model
//! from a handful of observations, and packages them as a [`ConfigMap`].

mod estimators;
mod observer;
mod solve;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{
    enumerate_configs, CatalogError, Compression, DeployConfig, ModelArchitecture,
};
use crate::oracle::{balanced_per_gpu, LatencyParams, MemoryComponents, NoiseSpec, OracleError};
use crate::SCHEMA_VERSION;

pub use estimators::{
    estimate_latency_l1, estimate_latency_l2, estimate_memory_m1, estimate_memory_m2,
    estimate_memory_m3, EntryFailure, Estimate, DEFAULT_LENGTHS,
};
pub use observer::{
    LoadCostModel, Observer, OracleObserver, ProfileSession, ProfilingCost, ProfilingResources,
    Subject,
};
pub use solve::{
    extrapolate_layers, solve_latency_pair, solve_layer_decomposition, solve_memory_system,
    LayerLatency,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("solved {component} = {value} is not positive")]
    NonPositiveSolution { component: &'static str, value: f64 },
    #[error("fingerprint footprints do not grow with depth ({k1} -> {k2})")]
    DegenerateSlope { k1: f64, k2: f64 },
    #[error("latency solve needs two distinct output lengths, got {0} twice")]
    IdenticalLengths(u32),
    #[error("cannot host {subject} under {cfg}: needs {needed_per_gpu:.2} GB per GPU, capacity {capacity:.2} GB")]
    InsufficientResources {
        subject: Subject,
        cfg: DeployConfig,
        needed_per_gpu: f64,
        capacity: f64,
    },
    #[error("configuration {0} is not in the map")]
    UnknownConfig(DeployConfig),
    #[error("no estimate for {cfg}: {reason}")]
    EntryFailed { cfg: DeployConfig, reason: String },
    #[error("unsupported config map schema version {0}")]
    SchemaVersion(u32),
    #[error("invalid config map: {0}")]
    Json(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

impl ProfileError {
    /// Failures caused by noise, worth one retry with fresh observations.
    pub fn is_soft(&self) -> bool {
        matches!(
            self,
            ProfileError::NonPositiveSolution { .. } | ProfileError::DegenerateSlope { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MemMethod {
    M1,
    M2,
    M3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LatMethod {
    L1,
    L2,
}

macro_rules! method_names {
    ($ty:ident { $($v:ident => $s:literal),+ }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$v => $s),+ })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.to_ascii_uppercase().as_str() {
                    $($s => Ok($ty::$v),)+
                    _ => Err(format!("unknown {} `{s}`", stringify!($ty))),
                }
            }
        }
    };
}

method_names!(MemMethod { M1 => "M1", M2 => "M2", M3 => "M3" });
method_names!(LatMethod { L1 => "L1", L2 => "L2" });

impl MemMethod {
    pub fn uses_fingerprints(self) -> bool {
        self != MemMethod::M1
    }
}

impl LatMethod {
    pub fn uses_fingerprints(self) -> bool {
        self == LatMethod::L2
    }
}

/// Per-compression memory decomposition. `w`, `a` and `a_p` are absent for M3,
/// which never solves for them; `mem_base` is then the (1,1) estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionEstimate {
    pub compression: Compression,
    pub w: Option<f64>,
    pub a: Option<f64>,
    pub a_p: Option<f64>,
    pub mem_base: Option<f64>,
    pub failure: Option<String>,
}

impl CompressionEstimate {
    fn components(&self) -> Option<MemoryComponents> {
        Some(MemoryComponents {
            w: self.w?,
            a: self.a?,
            a_p: self.a_p?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub cfg: DeployConfig,
    pub est_ttft: Option<f64>,
    pub est_tpot: Option<f64>,
    pub est_mem_total: Option<f64>,
    pub est_mem_base: Option<f64>,
    pub est_mem_per_gpu_balanced: Option<f64>,
    pub failure: Option<String>,
}

impl ConfigRecord {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryPrediction {
    pub total: f64,
    pub per_gpu_balanced: f64,
    pub mem_base: f64,
}

/// Estimated latency and memory for every configuration of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigMap {
    pub schema_version: u32,
    pub model_id: String,
    pub num_layers: u32,
    pub num_gpus: u32,
    pub mem_method: MemMethod,
    pub lat_method: LatMethod,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub compressions: Vec<CompressionEstimate>,
    /// In enumeration order.
    pub records: Vec<ConfigRecord>,
    pub profiling_cost: ProfilingCost,
}

impl ConfigMap {
    pub fn record(&self, cfg: &DeployConfig) -> Result<&ConfigRecord, ProfileError> {
        self.records
            .iter()
            .find(|r| r.cfg == *cfg)
            .ok_or(ProfileError::UnknownConfig(*cfg))
    }

    pub fn configs(&self) -> impl Iterator<Item = DeployConfig> + '_ {
        self.records.iter().map(|r| r.cfg)
    }

    pub fn complete_records(&self) -> impl Iterator<Item = &ConfigRecord> {
        self.records.iter().filter(|r| r.is_complete())
    }

    /// Latency estimate of `cfg`; available even when the entry's memory
    /// estimate failed.
    pub fn latency_params(&self, cfg: &DeployConfig) -> Result<LatencyParams, ProfileError> {
        let r = self.record(cfg)?;
        match (r.est_ttft, r.est_tpot) {
            (Some(ttft), Some(tpot)) => Ok(LatencyParams { ttft, tpot }),
            _ => Err(self.failed(r, "latency")),
        }
    }

    pub fn predict_latency(
        &self,
        cfg: &DeployConfig,
        output_len: u32,
    ) -> Result<f64, ProfileError> {
        if output_len == 0 {
            return Err(OracleError::ZeroOutputLength.into());
        }
        Ok(self.latency_params(cfg)?.latency(output_len))
    }

    /// Reconstructs memory from `W`/`A`/`A_p` for M1 and M2; M3 maps are a
    /// direct lookup. Available even when the entry's latency estimate failed.
    pub fn predict_memory(&self, cfg: &DeployConfig) -> Result<MemoryPrediction, ProfileError> {
        let r = self.record(cfg)?;
        let (total, mem_base) = match self.mem_method {
            MemMethod::M3 => match (r.est_mem_total, r.est_mem_base) {
                (Some(t), Some(b)) => (t, b),
                _ => return Err(self.failed(r, "memory")),
            },
            MemMethod::M1 | MemMethod::M2 => {
                let c = self
                    .compressions
                    .iter()
                    .find(|e| e.compression == cfg.compression())
                    .and_then(CompressionEstimate::components)
                    .ok_or_else(|| self.failed(r, "memory"))?;
                (c.total(cfg.tp, cfg.pp), c.base())
            }
        };
        Ok(MemoryPrediction {
            total,
            per_gpu_balanced: max_balanced(total, mem_base, self.num_layers, cfg),
            mem_base,
        })
    }

    fn failed(&self, r: &ConfigRecord, what: &str) -> ProfileError {
        ProfileError::EntryFailed {
            cfg: r.cfg,
            reason: r
                .failure
                .clone()
                .unwrap_or_else(|| format!("{what} estimate missing")),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config maps always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let map: ConfigMap =
            serde_json::from_str(text).map_err(|e| ProfileError::Json(e.to_string()))?;
        if map.schema_version != SCHEMA_VERSION {
            return Err(ProfileError::SchemaVersion(map.schema_version));
        }
        Ok(map)
    }
}

fn max_balanced(total: f64, base: f64, num_layers: u32, cfg: &DeployConfig) -> f64 {
    balanced_per_gpu(total, base, num_layers, cfg.tp, cfg.pp)
        .into_iter()
        .fold(f64::MIN, f64::max)
}

/// Knobs shared by every profiling run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileOptions {
    /// GPUs in the target configuration space.
    pub num_gpus: u32,
    pub lengths: (u32, u32),
    pub load: LoadCostModel,
    pub resources: Option<ProfilingResources>,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            num_gpus: 8,
            lengths: DEFAULT_LENGTHS,
            load: LoadCostModel::default(),
            resources: None,
        }
    }
}

/// A built map plus the profiling deployments it took.
#[derive(Debug, Clone)]
pub struct ProfileOutcome {
    pub map: ConfigMap,
    pub sessions: Vec<ProfileSession>,
}

/// Builds a map over the default 8-GPU space against the cost oracle.
pub fn build_config_map(
    model: &ModelArchitecture,
    mem: MemMethod,
    lat: LatMethod,
    noise: NoiseSpec,
    seed: u64,
) -> Result<ConfigMap, ProfileError> {
    profile_model(model, mem, lat, noise, seed, &ProfileOptions::default()).map(|o| o.map)
}

pub fn profile_model(
    model: &ModelArchitecture,
    mem: MemMethod,
    lat: LatMethod,
    noise: NoiseSpec,
    seed: u64,
    options: &ProfileOptions,
) -> Result<ProfileOutcome, ProfileError> {
    model.validate()?;
    let mut obs = OracleObserver::new(model, noise, seed, options.load, options.resources);
    let mut map = build_with_observer(model, mem, lat, options, &mut obs)?;
    let sessions = obs.into_sessions();
    map.noise = noise;
    map.seed = seed;
    map.profiling_cost = ProfilingCost::from_sessions(&sessions);
    Ok(ProfileOutcome { map, sessions })
}

/// Runs the chosen estimators against any observer. Noise, seed and cost are
/// left at their defaults for the caller to fill in.
pub fn build_with_observer<O: Observer + ?Sized>(
    model: &ModelArchitecture,
    mem: MemMethod,
    lat: LatMethod,
    options: &ProfileOptions,
    obs: &mut O,
) -> Result<ConfigMap, ProfileError> {
    let configs = enumerate_configs(model, options.num_gpus);
    log::info!(
        "profiling {} ({} configs) with {mem}/{lat}",
        model.model_id,
        configs.len()
    );

    let (compressions, per_config_mem): (Vec<CompressionEstimate>, _) = match mem {
        MemMethod::M1 | MemMethod::M2 => {
            let solved = if mem == MemMethod::M1 {
                estimate_memory_m1(model, obs)?
            } else {
                estimate_memory_m2(model, obs)?
            };
            let compressions = solved
                .into_iter()
                .map(|(c, est)| component_entry(c, est))
                .collect();
            (compressions, None)
        }
        MemMethod::M3 => {
            let totals = estimate_memory_m3(model, &configs, obs)?;
            let compressions = model
                .compressions()
                .into_iter()
                .map(|c| {
                    let base = &totals[&DeployConfig::new(1, 1, c)];
                    CompressionEstimate {
                        compression: c,
                        w: None,
                        a: None,
                        a_p: None,
                        mem_base: base.as_ref().ok().copied(),
                        failure: base.as_ref().err().map(|f| f.reason.clone()),
                    }
                })
                .collect();
            (compressions, Some(totals))
        }
    };
    let latency = match lat {
        LatMethod::L1 => estimate_latency_l1(&configs, options.lengths, obs)?,
        LatMethod::L2 => estimate_latency_l2(model, &configs, options.lengths, obs)?,
    };

    let by_compression: BTreeMap<Compression, &CompressionEstimate> = compressions
        .iter()
        .map(|e: &CompressionEstimate| (e.compression, e))
        .collect();
    let records = configs
        .iter()
        .map(|cfg| {
            let entry = by_compression[&cfg.compression()];
            let mut failures = Vec::new();
            let (total, base) = match &per_config_mem {
                None => match entry.components() {
                    Some(c) => (Some(c.total(cfg.tp, cfg.pp)), Some(c.base())),
                    None => {
                        failures.push(format!(
                            "memory: {}",
                            entry.failure.as_deref().unwrap_or("missing")
                        ));
                        (None, None)
                    }
                },
                Some(totals) => {
                    let total = match &totals[cfg] {
                        Ok(t) => Some(*t),
                        Err(f) => {
                            failures.push(format!("memory: {}", f.reason));
                            None
                        }
                    };
                    if total.is_some() && entry.mem_base.is_none() {
                        failures.push("memory: no (1,1) base estimate".to_string());
                    }
                    (total, entry.mem_base)
                }
            };
            let (ttft, tpot) = match &latency[cfg] {
                Ok(p) => (Some(p.ttft), Some(p.tpot)),
                Err(f) => {
                    failures.push(format!("latency: {}", f.reason));
                    (None, None)
                }
            };
            let per_gpu = match (total, base) {
                (Some(t), Some(b)) => Some(max_balanced(t, b, model.num_layers, cfg)),
                _ => None,
            };
            ConfigRecord {
                cfg: *cfg,
                est_ttft: ttft,
                est_tpot: tpot,
                est_mem_total: total,
                est_mem_base: base,
                est_mem_per_gpu_balanced: per_gpu,
                failure: (!failures.is_empty()).then(|| failures.join("; ")),
            }
        })
        .collect::<Vec<_>>();

    let failed = records.iter().filter(|r| !r.is_complete()).count();
    if failed > 0 {
        log::warn!(
            "{failed} of {} entries for {} failed",
            records.len(),
            model.model_id
        );
    }
    Ok(ConfigMap {
        schema_version: SCHEMA_VERSION,
        model_id: model.model_id.clone(),
        num_layers: model.num_layers,
        num_gpus: options.num_gpus,
        mem_method: mem,
        lat_method: lat,
        noise: NoiseSpec::None,
        seed: 0,
        compressions,
        records,
        profiling_cost: ProfilingCost::default(),
    })
}

fn component_entry(c: Compression, est: Estimate<MemoryComponents>) -> CompressionEstimate {
    match est {
        Ok(m) => CompressionEstimate {
            compression: c,
            w: Some(m.w),
            a: Some(m.a),
            a_p: Some(m.a_p),
            mem_base: Some(m.base()),
            failure: None,
        },
        Err(f) => CompressionEstimate {
            compression: c,
            w: None,
            a: None,
            a_p: None,
            mem_base: None,
            failure: Some(f.reason),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{true_latency_params, true_memory};
    use crate::presets;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn noiseless_maps_match_oracle() {
        let m = presets::preset("llama2-13b").unwrap();
        for (mem, lat) in [
            (MemMethod::M1, LatMethod::L1),
            (MemMethod::M2, LatMethod::L2),
            (MemMethod::M3, LatMethod::L2),
        ] {
            let map = build_config_map(&m, mem, lat, NoiseSpec::None, 3).unwrap();
            assert_eq!(map.records.len(), enumerate_configs(&m, 8).len());
            for cfg in map.configs() {
                let truth = true_memory(&m, &cfg).unwrap();
                let pred = map.predict_memory(&cfg).unwrap();
                assert!(rel(pred.total, truth.total) < 1e-9, "{mem} {cfg}");
                let max_true = truth.per_gpu.iter().copied().fold(0.0, f64::max);
                assert!(rel(pred.per_gpu_balanced, max_true) < 1e-9);
                let lp = true_latency_params(&m, &cfg).unwrap();
                assert!(rel(map.predict_latency(&cfg, 100).unwrap(), lp.latency(100)) < 1e-9);
            }
        }
    }

    #[test]
    fn predict_latency_examples() {
        let m = presets::preset("gptj-6b").unwrap();
        let mut map =
            build_config_map(&m, MemMethod::M1, LatMethod::L1, NoiseSpec::None, 0).unwrap();
        let cfg = map.records[0].cfg;
        map.records[0].est_ttft = Some(2.0);
        map.records[0].est_tpot = Some(0.1);
        assert!((map.predict_latency(&cfg, 100).unwrap() - 12.0).abs() < 1e-12);
        assert!((map.predict_latency(&cfg, 1).unwrap() - 2.1).abs() < 1e-12);
        let unknown = cfg.with_parallelism(8, 2);
        assert!(matches!(
            map.predict_latency(&unknown, 1),
            Err(ProfileError::UnknownConfig(_))
        ));
    }

    #[test]
    fn predict_memory_from_components() {
        let m = presets::preset("gptj-6b").unwrap();
        let mut map =
            build_config_map(&m, MemMethod::M1, LatMethod::L1, NoiseSpec::None, 0).unwrap();
        let e = &mut map.compressions[0];
        assert_eq!(e.compression, Compression::IDENTITY);
        (e.w, e.a, e.a_p) = (Some(8.0), Some(2.0), Some(0.3));
        let p = map
            .predict_memory(&DeployConfig::baseline().with_parallelism(2, 2))
            .unwrap();
        assert!((p.total - 13.2).abs() < 1e-12);
        assert!(
            (map.predict_memory(&DeployConfig::baseline()).unwrap().total - 10.0).abs() < 1e-12
        );
    }

    #[test]
    fn json_round_trip() {
        let m = presets::preset("falcon-7b").unwrap();
        let map = build_config_map(
            &m,
            MemMethod::M3,
            LatMethod::L2,
            NoiseSpec::multiplicative(0.02),
            9,
        )
        .unwrap();
        let back = ConfigMap::from_json(&map.to_json()).unwrap();
        assert_eq!(back, map);
        let bumped = map
            .to_json()
            .replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
        assert!(matches!(
            ConfigMap::from_json(&bumped),
            Err(ProfileError::SchemaVersion(99))
        ));
    }

    #[test]
    fn same_seed_same_map() {
        let m = presets::preset("llama2-7b").unwrap();
        let noise = NoiseSpec::multiplicative(0.05);
        let a = build_config_map(&m, MemMethod::M2, LatMethod::L2, noise, 11).unwrap();
        let b = build_config_map(&m, MemMethod::M2, LatMethod::L2, noise, 11).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("m2".parse::<MemMethod>().unwrap(), MemMethod::M2);
        assert_eq!(LatMethod::L1.to_string(), "L1");
        assert!("M4".parse::<MemMethod>().is_err());
    }
}
