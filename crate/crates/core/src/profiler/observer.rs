//! Observation sources for the estimators and profiling cost accounting.

use std::collections::HashMap;
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{
    generate_fingerprint, DeployConfig, Fingerprint, LayerStack, ModelArchitecture,
};
use crate::oracle::{self, NoiseSpec};

use super::ProfileError;

/// What gets deployed for an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Full,
    Fingerprint(u32),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Full => f.write_str("full"),
            Subject::Fingerprint(k) => write!(f, "fp{k}"),
        }
    }
}

/// The estimators' only window onto the model's behaviour.
pub trait Observer {
    /// Peak memory (GB) of `subject` deployed under `cfg`.
    fn observe_memory(&mut self, subject: Subject, cfg: &DeployConfig)
        -> Result<f64, ProfileError>;
    /// End-to-end latency (s) of one request generating `output_len` tokens.
    fn observe_latency(
        &mut self,
        subject: Subject,
        cfg: &DeployConfig,
        output_len: u32,
    ) -> Result<f64, ProfileError>;
}

/// Simulated load time: `fixed_s + footprint_gb / gb_per_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadCostModel {
    pub fixed_s: f64,
    pub gb_per_s: f64,
}

impl Default for LoadCostModel {
    fn default() -> Self {
        LoadCostModel {
            fixed_s: 2.0,
            gb_per_s: 2.0,
        }
    }
}

impl LoadCostModel {
    pub fn load_time(&self, footprint_gb: f64) -> f64 {
        self.fixed_s + footprint_gb / self.gb_per_s
    }
}

/// GPUs available to the profiler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilingResources {
    pub num_gpus: u32,
    pub gpu_capacity_gb: f64,
}

/// One deployment made for profiling. All observations of the same subject
/// under the same configuration share a single load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSession {
    pub subject: Subject,
    pub cfg: DeployConfig,
    pub gpus: u32,
    pub memory_gb: f64,
    pub per_gpu_gb: f64,
    pub load_s: f64,
    pub run_s: f64,
    pub observations: u32,
}

impl ProfileSession {
    pub fn duration(&self) -> f64 {
        self.load_s + self.run_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProfilingCost {
    /// Largest footprint of any single profiling deployment (GB).
    pub peak_gpu_mem: f64,
    /// Simulated seconds, sessions run back to back.
    pub wall_time: f64,
    pub gpu_hours: f64,
    pub sessions: usize,
    pub observations: usize,
}

impl ProfilingCost {
    pub fn from_sessions(sessions: &[ProfileSession]) -> Self {
        ProfilingCost {
            peak_gpu_mem: sessions.iter().map(|s| s.memory_gb).fold(0.0, f64::max),
            wall_time: sessions.iter().map(ProfileSession::duration).sum(),
            gpu_hours: sessions
                .iter()
                .map(|s| s.duration() * f64::from(s.gpus))
                .sum::<f64>()
                / 3600.0,
            sessions: sessions.len(),
            observations: sessions.iter().map(|s| s.observations as usize).sum(),
        }
    }
}

/// Observes the cost oracle, drawing one fresh seed per observation from a
/// stream rooted at the profiling seed.
pub struct OracleObserver {
    model: ModelArchitecture,
    fingerprints: [Fingerprint; 2],
    noise: NoiseSpec,
    seeds: ChaCha8Rng,
    load: LoadCostModel,
    resources: Option<ProfilingResources>,
    sessions: Vec<ProfileSession>,
    index: HashMap<(Subject, DeployConfig), usize>,
}

impl OracleObserver {
    pub fn new(
        model: &ModelArchitecture,
        noise: NoiseSpec,
        seed: u64,
        load: LoadCostModel,
        resources: Option<ProfilingResources>,
    ) -> Self {
        let fp = |k| generate_fingerprint(model, k).expect("depth 1 and 2 are valid");
        OracleObserver {
            model: model.clone(),
            fingerprints: [fp(1), fp(2)],
            noise,
            seeds: ChaCha8Rng::seed_from_u64(seed),
            load,
            resources,
            sessions: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn sessions(&self) -> &[ProfileSession] {
        &self.sessions
    }

    pub fn into_sessions(self) -> Vec<ProfileSession> {
        self.sessions
    }

    fn subject(&self, subject: Subject) -> Result<&dyn LayerStack, ProfileError> {
        match subject {
            Subject::Full => Ok(&self.model),
            Subject::Fingerprint(k @ 1..=2) => Ok(&self.fingerprints[k as usize - 1]),
            Subject::Fingerprint(k) => {
                Err(crate::catalog::CatalogError::InvalidFingerprintDepth(k).into())
            }
        }
    }

    fn session(&mut self, subject: Subject, cfg: &DeployConfig) -> Result<usize, ProfileError> {
        if let Some(&i) = self.index.get(&(subject, *cfg)) {
            return Ok(i);
        }
        let mem = oracle::true_memory(self.subject(subject)?, cfg)?;
        let per_gpu = mem.per_gpu.iter().copied().fold(0.0, f64::max);
        if let Some(r) = self.resources {
            if cfg.num_gpus() > r.num_gpus || per_gpu > r.gpu_capacity_gb {
                return Err(ProfileError::InsufficientResources {
                    subject,
                    cfg: *cfg,
                    needed_per_gpu: per_gpu,
                    capacity: r.gpu_capacity_gb,
                });
            }
        }
        self.sessions.push(ProfileSession {
            subject,
            cfg: *cfg,
            gpus: cfg.num_gpus(),
            memory_gb: mem.total,
            per_gpu_gb: per_gpu,
            load_s: self.load.load_time(mem.total),
            run_s: 0.0,
            observations: 0,
        });
        let i = self.sessions.len() - 1;
        self.index.insert((subject, *cfg), i);
        Ok(i)
    }
}

impl Observer for OracleObserver {
    fn observe_memory(
        &mut self,
        subject: Subject,
        cfg: &DeployConfig,
    ) -> Result<f64, ProfileError> {
        let i = self.session(subject, cfg)?;
        let seed = self.seeds.next_u64();
        let value = oracle::observe_peak_memory(self.subject(subject)?, cfg, &self.noise, seed)?;
        self.sessions[i].observations += 1;
        Ok(value)
    }

    fn observe_latency(
        &mut self,
        subject: Subject,
        cfg: &DeployConfig,
        output_len: u32,
    ) -> Result<f64, ProfileError> {
        let i = self.session(subject, cfg)?;
        let seed = self.seeds.next_u64();
        let value =
            oracle::observe_latency(self.subject(subject)?, cfg, output_len, &self.noise, seed)?;
        let s = &mut self.sessions[i];
        s.observations += 1;
        s.run_s += value.max(0.0);
        Ok(value)
    }
}
