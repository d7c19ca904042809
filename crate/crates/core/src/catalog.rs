//! Model descriptors, fingerprints and the deployment configuration space.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::OracleParams;

/// Tensor-parallel degrees the planner considers.
pub const TP_DEGREES: [u32; 4] = [1, 2, 4, 8];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CatalogError {
    #[error("model `{0}` is already registered")]
    DuplicateId(String),
    #[error("invalid architecture: `{field}` {reason}")]
    InvalidArchitecture { field: String, reason: String },
    #[error("fingerprints have 1 or 2 hidden layers, got {0}")]
    InvalidFingerprintDepth(u32),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
}

fn invalid(field: &str, reason: impl Into<String>) -> CatalogError {
    CatalogError::InvalidArchitecture {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Numeric format applied to weights or to the KV cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum QuantKind {
    Fp16,
    Int8,
    Int4,
    Gptq4,
}

impl QuantKind {
    pub const ALL: [QuantKind; 4] = [
        QuantKind::Fp16,
        QuantKind::Int8,
        QuantKind::Int4,
        QuantKind::Gptq4,
    ];
    pub const KV: [QuantKind; 2] = [QuantKind::Fp16, QuantKind::Int8];

    /// Weight memory multiplier relative to FP16.
    pub fn mem_factor(self) -> f64 {
        match self {
            QuantKind::Fp16 => 1.0,
            QuantKind::Int8 => 0.5,
            QuantKind::Int4 | QuantKind::Gptq4 => 0.25,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            QuantKind::Fp16 => "fp16",
            QuantKind::Int8 => "int8",
            QuantKind::Int4 => "int4",
            QuantKind::Gptq4 => "gptq4",
        }
    }

    fn from_label(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|q| q.label().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PruneKind {
    None,
    Wanda24,
    #[serde(rename = "LLMPruner25")]
    LlmPruner25,
    Wanda48,
    #[serde(rename = "SparseGPT")]
    SparseGpt,
}

impl PruneKind {
    pub const ALL: [PruneKind; 5] = [
        PruneKind::None,
        PruneKind::Wanda24,
        PruneKind::LlmPruner25,
        PruneKind::Wanda48,
        PruneKind::SparseGpt,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PruneKind::None => "none",
            PruneKind::Wanda24 => "wanda24",
            PruneKind::LlmPruner25 => "llmpruner25",
            PruneKind::Wanda48 => "wanda48",
            PruneKind::SparseGpt => "sparsegpt",
        }
    }

    fn from_label(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.label().eq_ignore_ascii_case(s))
    }
}

/// The compression half of a deployment configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Compression {
    pub weight_quant: QuantKind,
    pub kv_quant: QuantKind,
    pub prune: PruneKind,
}

impl Compression {
    pub const IDENTITY: Compression = Compression {
        weight_quant: QuantKind::Fp16,
        kv_quant: QuantKind::Fp16,
        prune: PruneKind::None,
    };

    /// Pruning replaces the quantization path entirely.
    pub fn is_consistent(&self) -> bool {
        self.prune == PruneKind::None
            || (self.weight_quant == QuantKind::Fp16 && self.kv_quant == QuantKind::Fp16)
    }
}

/// One point of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeployConfig {
    pub tp: u32,
    pub pp: u32,
    pub weight_quant: QuantKind,
    pub kv_quant: QuantKind,
    pub prune: PruneKind,
}

impl DeployConfig {
    pub fn new(tp: u32, pp: u32, compression: Compression) -> Self {
        DeployConfig {
            tp,
            pp,
            weight_quant: compression.weight_quant,
            kv_quant: compression.kv_quant,
            prune: compression.prune,
        }
    }

    /// Unparallelised FP16 deployment.
    pub fn baseline() -> Self {
        Self::new(1, 1, Compression::IDENTITY)
    }

    pub fn compression(&self) -> Compression {
        Compression {
            weight_quant: self.weight_quant,
            kv_quant: self.kv_quant,
            prune: self.prune,
        }
    }

    pub fn num_gpus(&self) -> u32 {
        self.tp * self.pp
    }

    pub fn with_parallelism(&self, tp: u32, pp: u32) -> Self {
        DeployConfig { tp, pp, ..*self }
    }
}

impl fmt::Display for DeployConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tp{}-pp{}-w{}-kv{}-{}",
            self.tp,
            self.pp,
            self.weight_quant.label(),
            self.kv_quant.label(),
            self.prune.label()
        )
    }
}

impl FromStr for DeployConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('-').collect();
        let [tp, pp, w, kv, prune] = parts.as_slice() else {
            return Err(format!("expected tpN-ppM-wQ-kvQ-PRUNE, got `{s}`"));
        };
        let num = |p: &str, prefix: &str| -> Result<u32, String> {
            p.strip_prefix(prefix)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format!("bad `{prefix}` field in `{s}`"))
        };
        let quant = |p: &str, prefix: &str| -> Result<QuantKind, String> {
            p.strip_prefix(prefix)
                .and_then(QuantKind::from_label)
                .ok_or_else(|| format!("bad `{prefix}` field in `{s}`"))
        };
        Ok(DeployConfig {
            tp: num(tp, "tp")?,
            pp: num(pp, "pp")?,
            weight_quant: quant(w, "w")?,
            kv_quant: quant(kv, "kv")?,
            prune: PruneKind::from_label(prune).ok_or_else(|| format!("bad prune in `{s}`"))?,
        })
    }
}

/// An LLM descriptor. The hidden oracle parameters stand in for the real
/// hardware behaviour of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchitecture {
    pub model_id: String,
    pub family: String,
    pub num_layers: u32,
    pub supported_weight_quants: BTreeSet<QuantKind>,
    pub supported_kv_quants: BTreeSet<QuantKind>,
    pub supported_prunes: BTreeSet<PruneKind>,
    pub oracle_params: OracleParams,
}

impl ModelArchitecture {
    pub fn validate(&self) -> Result<(), CatalogError> {
        if self.model_id.trim().is_empty() {
            return Err(invalid("model_id", "must not be empty"));
        }
        if self.num_layers < 3 {
            return Err(invalid(
                "num_layers",
                format!("must be at least 3, got {}", self.num_layers),
            ));
        }
        if !self.supported_weight_quants.contains(&QuantKind::Fp16) {
            return Err(invalid("supported_weight_quants", "must contain FP16"));
        }
        if !self.supported_kv_quants.contains(&QuantKind::Fp16) {
            return Err(invalid("supported_kv_quants", "must contain FP16"));
        }
        if let Some(q) = self
            .supported_kv_quants
            .iter()
            .find(|q| !QuantKind::KV.contains(q))
        {
            return Err(invalid(
                "supported_kv_quants",
                format!("{q:?} is not a KV-cache format"),
            ));
        }
        if !self.supported_prunes.contains(&PruneKind::None) {
            return Err(invalid("supported_prunes", "must contain None"));
        }
        self.oracle_params
            .validate()
            .map_err(|(field, reason)| invalid(&format!("oracle_params.{field}"), reason))
    }

    /// Compression combinations in enumeration order: every weight/KV
    /// quantization pair first, then each pruning strategy on FP16.
    pub fn compressions(&self) -> Vec<Compression> {
        let mut out = Vec::new();
        for &weight_quant in &self.supported_weight_quants {
            for &kv_quant in &self.supported_kv_quants {
                out.push(Compression {
                    weight_quant,
                    kv_quant,
                    prune: PruneKind::None,
                });
            }
        }
        for &prune in self
            .supported_prunes
            .iter()
            .filter(|p| **p != PruneKind::None)
        {
            out.push(Compression {
                prune,
                ..Compression::IDENTITY
            });
        }
        out
    }

    pub fn supports(&self, c: &Compression) -> bool {
        c.is_consistent()
            && self.supported_weight_quants.contains(&c.weight_quant)
            && self.supported_kv_quants.contains(&c.kv_quant)
            && self.supported_prunes.contains(&c.prune)
    }
}

/// A copy of a model cut down to one or two hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub base_model_id: String,
    pub num_layers: u32,
    base: Arc<ModelArchitecture>,
}

impl Fingerprint {
    pub fn base(&self) -> &ModelArchitecture {
        &self.base
    }
}

pub fn generate_fingerprint(
    model: &ModelArchitecture,
    k: u32,
) -> Result<Fingerprint, CatalogError> {
    if !(1..=2).contains(&k) {
        return Err(CatalogError::InvalidFingerprintDepth(k));
    }
    Ok(Fingerprint {
        base_model_id: model.model_id.clone(),
        num_layers: k,
        base: Arc::new(model.clone()),
    })
}

/// Anything the oracle can evaluate: a full model or one of its fingerprints.
pub trait LayerStack {
    fn num_layers(&self) -> u32;
    fn architecture(&self) -> &ModelArchitecture;
}

impl LayerStack for ModelArchitecture {
    fn num_layers(&self) -> u32 {
        self.num_layers
    }
    fn architecture(&self) -> &ModelArchitecture {
        self
    }
}

impl LayerStack for Fingerprint {
    fn num_layers(&self) -> u32 {
        self.num_layers
    }
    fn architecture(&self) -> &ModelArchitecture {
        &self.base
    }
}

/// `(tp, pp)` pairs with `tp` a power of two up to 8 and `tp * pp <= num_gpus`.
pub fn parallelism_options(num_gpus: u32, max_pp: u32) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for tp in TP_DEGREES.into_iter().filter(|tp| *tp <= num_gpus) {
        for pp in 1..=(num_gpus / tp).min(max_pp) {
            out.push((tp, pp));
        }
    }
    out
}

/// Ordered by tp, then pp, then compression enumeration order.
pub fn enumerate_configs(model: &ModelArchitecture, num_gpus: u32) -> Vec<DeployConfig> {
    let compressions = model.compressions();
    parallelism_options(num_gpus, model.num_layers)
        .into_iter()
        .flat_map(|(tp, pp)| {
            compressions
                .iter()
                .map(move |c| DeployConfig::new(tp, pp, *c))
        })
        .collect()
}

/// Registry of models. Reads and registrations may interleave across threads.
#[derive(Debug, Default)]
pub struct Catalog {
    models: RwLock<BTreeMap<String, Arc<ModelArchitecture>>>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_model(&self, spec: ModelArchitecture) -> Result<String, CatalogError> {
        spec.validate()?;
        let mut models = self.models.write().expect("catalog lock poisoned");
        if models.contains_key(&spec.model_id) {
            return Err(CatalogError::DuplicateId(spec.model_id));
        }
        let id = spec.model_id.clone();
        models.insert(id.clone(), Arc::new(spec));
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Result<Arc<ModelArchitecture>, CatalogError> {
        self.models
            .read()
            .expect("catalog lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| CatalogError::UnknownModel(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.models
            .read()
            .expect("catalog lock poisoned")
            .keys()
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.models.read().expect("catalog lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
