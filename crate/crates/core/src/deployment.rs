//! The deployment controller: rank configurations by intent, check memory
//! feasibility by packing layer blocks, then pick concrete GPUs.
//!
//! Every step is a pure function of a cluster snapshot. [`deploy`] returns a
//! record and [`commit`] applies it, so callers can dry-run plans.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Compression, DeployConfig};
use crate::oracle::even_stage_split;
use crate::profiler::ConfigMap;
use crate::simulator::{ClusterState, SimError};

pub const DEFAULT_BUFFER: f64 = 0.10;
pub const DEFAULT_REFERENCE_LEN: u32 = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeployError {
    #[error("config map for `{0}` has no usable entries")]
    EmptyMap(String),
    #[error("invalid intent: {0}")]
    InvalidIntent(String),
    #[error("invalid placement policy: {0}")]
    InvalidPolicy(String),
    #[error("buffer size {0} outside [0, 0.5]")]
    InvalidBuffer(f64),
    #[error("{num_layers} layers do not fit stage capacities {capacities:?}")]
    CannotFit {
        num_layers: u32,
        capacities: Vec<u32>,
    },
    #[error("no {k} GPUs can host the assignment under {policy}")]
    NoPlacement { k: usize, policy: PolicyKind },
    #[error("cluster cannot host `{model}` under any configuration")]
    NoFeasibleConfig { model: String },
    #[error(transparent)]
    Cluster(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntentKind {
    MinLatency,
    MinCost,
    MinMemory,
    MinGpuHours,
    LatencySlo,
    CostSlo,
    /// Baseline: FP16, tp=1 and the deepest pipeline the map offers.
    MaxPp,
    /// Baseline: FP16, pp=1 and the widest tensor parallelism the map offers.
    MaxTp,
    /// Baseline: lowest latency among uncompressed configurations.
    Fp16Only,
}

impl IntentKind {
    pub fn is_slo(self) -> bool {
        matches!(self, IntentKind::LatencySlo | IntentKind::CostSlo)
    }
}

impl fmt::Display for IntentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for IntentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        Ok(match norm.to_ascii_lowercase().as_str() {
            "minlatency" => IntentKind::MinLatency,
            "mincost" => IntentKind::MinCost,
            "minmemory" => IntentKind::MinMemory,
            "mingpuhours" => IntentKind::MinGpuHours,
            "latencyslo" => IntentKind::LatencySlo,
            "costslo" => IntentKind::CostSlo,
            "maxpp" => IntentKind::MaxPp,
            "maxtp" => IntentKind::MaxTp,
            "fp16only" | "fp16" => IntentKind::Fp16Only,
            _ => return Err(format!("unknown intent `{s}`")),
        })
    }
}

/// What the user wants from a deployment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub kind: IntentKind,
    /// Seconds for `LatencySlo`, GB·s for `CostSlo`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default = "default_reference_len")]
    pub reference_output_len: u32,
}

fn default_reference_len() -> u32 {
    DEFAULT_REFERENCE_LEN
}

impl Intent {
    pub fn new(kind: IntentKind) -> Self {
        Intent {
            kind,
            target: None,
            reference_output_len: DEFAULT_REFERENCE_LEN,
        }
    }

    pub fn with_target(kind: IntentKind, target: f64) -> Self {
        Intent {
            target: Some(target),
            ..Self::new(kind)
        }
    }

    pub fn validate(&self) -> Result<(), DeployError> {
        let bad = |m: String| Err(DeployError::InvalidIntent(m));
        match (self.kind.is_slo(), self.target) {
            (true, None) => return bad(format!("{} needs a target", self.kind)),
            (false, Some(_)) => return bad(format!("{} takes no target", self.kind)),
            (true, Some(t)) if !(t > 0.0 && t.is_finite()) => {
                return bad(format!("target must be positive, got {t}"))
            }
            _ => {}
        }
        if self.reference_output_len == 0 {
            return bad("reference_output_len must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    LeastLoaded,
    Packing,
    Hybrid,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace(['-', '_'], "").to_ascii_lowercase().as_str() {
            "leastloaded" => Ok(PolicyKind::LeastLoaded),
            "packing" => Ok(PolicyKind::Packing),
            "hybrid" => Ok(PolicyKind::Hybrid),
            _ => Err(format!("unknown placement policy `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementPolicy {
    pub kind: PolicyKind,
    /// Load threshold below which a GPU counts as packable (Hybrid only).
    #[serde(default)]
    pub theta: f64,
}

impl PlacementPolicy {
    pub const LEAST_LOADED: PlacementPolicy = PlacementPolicy {
        kind: PolicyKind::LeastLoaded,
        theta: 0.0,
    };
    pub const PACKING: PlacementPolicy = PlacementPolicy {
        kind: PolicyKind::Packing,
        theta: 0.0,
    };

    pub fn hybrid(theta: f64) -> Self {
        PlacementPolicy {
            kind: PolicyKind::Hybrid,
            theta,
        }
    }

    pub fn validate(&self) -> Result<(), DeployError> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(DeployError::InvalidPolicy(format!(
                "theta {} outside [0, 1]",
                self.theta
            )));
        }
        Ok(())
    }
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        Self::LEAST_LOADED
    }
}

/// Predicted quantities a ranking can be built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigMetrics {
    pub cfg: DeployConfig,
    pub latency: f64,
    pub memory: f64,
    /// GB·s: memory × latency.
    pub cost: f64,
    /// Device-seconds per request: latency × GPUs.
    pub gpu_seconds: f64,
    pub index: usize,
}

impl ConfigMetrics {
    fn primary(&self, kind: IntentKind) -> f64 {
        match kind {
            IntentKind::MinLatency | IntentKind::LatencySlo | IntentKind::Fp16Only => self.latency,
            IntentKind::MinCost | IntentKind::CostSlo => self.cost,
            IntentKind::MinMemory => self.memory,
            IntentKind::MinGpuHours => self.gpu_seconds,
            IntentKind::MaxPp | IntentKind::MaxTp => self.latency,
        }
    }

    fn tie_break(&self, other: &Self) -> Ordering {
        self.cfg
            .num_gpus()
            .cmp(&other.cfg.num_gpus())
            .then(self.memory.total_cmp(&other.memory))
            .then(self.index.cmp(&other.index))
    }
}

/// Predicted metrics for every complete entry of the map, in map order.
pub fn config_metrics(map: &ConfigMap, reference_output_len: u32) -> Vec<ConfigMetrics> {
    map.records
        .iter()
        .enumerate()
        .filter_map(|(index, r)| {
            let latency = map.predict_latency(&r.cfg, reference_output_len).ok()?;
            let memory = map.predict_memory(&r.cfg).ok()?.total;
            Some(ConfigMetrics {
                cfg: r.cfg,
                latency,
                memory,
                cost: memory * latency,
                gpu_seconds: latency * f64::from(r.cfg.num_gpus()),
                index,
            })
        })
        .collect()
}

fn baseline_candidates(kind: IntentKind, metrics: Vec<ConfigMetrics>) -> Vec<ConfigMetrics> {
    let uncompressed: Vec<_> = metrics
        .into_iter()
        .filter(|m| is_uncompressed(&m.cfg))
        .collect();
    match kind {
        IntentKind::MaxPp => {
            let max_pp = uncompressed
                .iter()
                .filter(|m| m.cfg.tp == 1)
                .map(|m| m.cfg.pp)
                .max();
            uncompressed
                .into_iter()
                .filter(|m| m.cfg.tp == 1 && Some(m.cfg.pp) == max_pp)
                .collect()
        }
        IntentKind::MaxTp => {
            let max_tp = uncompressed
                .iter()
                .filter(|m| m.cfg.pp == 1)
                .map(|m| m.cfg.tp)
                .max();
            uncompressed
                .into_iter()
                .filter(|m| m.cfg.pp == 1 && Some(m.cfg.tp) == max_tp)
                .collect()
        }
        _ => uncompressed,
    }
}

/// Orders the map's configurations from most to least preferred under
/// `intent`, with their predicted metrics.
pub fn rank_with_metrics(
    map: &ConfigMap,
    intent: &Intent,
) -> Result<Vec<ConfigMetrics>, DeployError> {
    intent.validate()?;
    let mut metrics = config_metrics(map, intent.reference_output_len);
    if matches!(
        intent.kind,
        IntentKind::MaxPp | IntentKind::MaxTp | IntentKind::Fp16Only
    ) {
        metrics = baseline_candidates(intent.kind, metrics);
    }
    if metrics.is_empty() {
        return Err(DeployError::EmptyMap(map.model_id.clone()));
    }
    let kind = intent.kind;
    let by = |key: fn(&ConfigMetrics) -> f64| {
        move |a: &ConfigMetrics, b: &ConfigMetrics| {
            key(a).total_cmp(&key(b)).then_with(|| a.tie_break(b))
        }
    };
    match (kind, intent.target) {
        (IntentKind::LatencySlo | IntentKind::CostSlo, Some(target)) => {
            let (mut ok, mut missed): (Vec<_>, Vec<_>) =
                metrics.into_iter().partition(|m| m.primary(kind) <= target);
            // survivors ordered by the complementary objective
            if kind == IntentKind::LatencySlo {
                ok.sort_by(by(|m| m.cost));
            } else {
                ok.sort_by(by(|m| m.latency));
            }
            missed.sort_by(|a, b| {
                (a.primary(kind) - target)
                    .total_cmp(&(b.primary(kind) - target))
                    .then_with(|| a.tie_break(b))
            });
            ok.extend(missed);
            Ok(ok)
        }
        _ => {
            metrics.sort_by(|a, b| {
                a.primary(kind)
                    .total_cmp(&b.primary(kind))
                    .then_with(|| a.tie_break(b))
            });
            Ok(metrics)
        }
    }
}

pub fn rank_configs(map: &ConfigMap, intent: &Intent) -> Result<Vec<DeployConfig>, DeployError> {
    Ok(rank_with_metrics(map, intent)?
        .into_iter()
        .map(|m| m.cfg)
        .collect())
}

/// Memory of one layer shard.
pub fn compute_mem_block(mem_base: f64, tp: u32, num_layers: u32) -> f64 {
    mem_base / (f64::from(tp) * f64::from(num_layers))
}

/// How many layers fit in `usable` GB at `mem_block` GB each.
fn layer_capacity(usable: f64, mem_block: f64) -> u32 {
    if usable <= 0.0 {
        return 0;
    }
    let n = (usable / mem_block + 1e-12).floor();
    if n >= f64::from(u32::MAX) {
        u32::MAX
    } else {
        n as u32
    }
}

/// Splits `num_layers` into `pp` contiguous stages whose per-GPU memory stays
/// within `usable_per_stage` (GB per GPU of each stage, overhead already
/// removed). Starts from the even split and moves excess layers to the
/// nearest stages with room.
pub fn assign_layers(
    num_layers: u32,
    pp: u32,
    usable_per_stage: &[f64],
    mem_block: f64,
) -> Result<Vec<u32>, DeployError> {
    let caps: Vec<u32> = usable_per_stage
        .iter()
        .map(|&u| layer_capacity(u, mem_block))
        .collect();
    let cannot = || DeployError::CannotFit {
        num_layers,
        capacities: caps.clone(),
    };
    if pp == 0 || caps.len() != pp as usize || pp > num_layers {
        return Err(cannot());
    }
    let total: u64 = caps.iter().map(|&c| u64::from(c)).sum();
    if caps.contains(&0) || total < u64::from(num_layers) {
        return Err(cannot());
    }
    let mut layers = even_stage_split(num_layers, pp);
    while let Some(s) = (0..layers.len()).find(|&s| layers[s] > caps[s]) {
        let excess = layers[s] - caps[s];
        // nearest stage with spare room, earlier stages first on ties
        let target = (1..layers.len())
            .flat_map(|d| [s.checked_sub(d), Some(s + d)])
            .flatten()
            .find(|&t| t < layers.len() && layers[t] < caps[t])
            .expect("total capacity covers every layer");
        let moved = excess.min(caps[target] - layers[target]);
        layers[s] -= moved;
        layers[target] += moved;
    }
    Ok(layers)
}

/// A memory-feasible layout of one configuration over specific GPUs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAssignment {
    pub cfg: DeployConfig,
    /// Stage-major: GPUs `[s·tp, (s+1)·tp)` form stage `s`.
    pub gpu_ids: Vec<usize>,
    /// Layer shards held by each GPU.
    pub blocks_per_gpu: Vec<u32>,
    pub layers_per_stage: Vec<u32>,
    pub mem_per_gpu: Vec<f64>,
    pub mem_block: f64,
    /// Parallelism overhead reserved on every GPU.
    pub overhead_per_gpu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct MemoryPlan {
    cfg: DeployConfig,
    num_layers: u32,
    mem_block: f64,
    overhead: f64,
}

impl MemoryPlan {
    fn new(cfg: &DeployConfig, map: &ConfigMap) -> Option<Self> {
        let pred = map.predict_memory(cfg).ok()?;
        let k = f64::from(cfg.num_gpus());
        Some(MemoryPlan {
            cfg: *cfg,
            num_layers: map.num_layers,
            mem_block: compute_mem_block(pred.mem_base, cfg.tp, map.num_layers),
            overhead: (pred.total - pred.mem_base).max(0.0) / k,
        })
    }

    fn k(&self) -> usize {
        self.cfg.num_gpus() as usize
    }

    /// Whether a GPU with `usable` GB could hold at least one stage layer.
    fn can_host(&self, usable: f64) -> bool {
        layer_capacity(usable - self.overhead, self.mem_block) >= 1
    }

    /// Packs onto exactly these GPUs: the roomiest `tp` form the first stage
    /// and so on, which maximises the total stage capacity.
    fn pack(&self, cluster: &ClusterState, gpus: &[usize], buffer: f64) -> Option<BlockAssignment> {
        let (tp, pp) = (self.cfg.tp as usize, self.cfg.pp);
        let mut ordered: Vec<(usize, f64)> = gpus
            .iter()
            .map(|&id| (id, cluster.gpus[id].usable_free(buffer)))
            .collect();
        ordered.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let usable: Vec<f64> = ordered
            .chunks(tp)
            .map(|stage| stage.iter().map(|g| g.1).fold(f64::INFINITY, f64::min) - self.overhead)
            .collect();
        let layers = assign_layers(self.num_layers, pp, &usable, self.mem_block).ok()?;
        let blocks_per_gpu: Vec<u32> = layers
            .iter()
            .flat_map(|&l| std::iter::repeat_n(l, tp))
            .collect();
        let mem_per_gpu = blocks_per_gpu
            .iter()
            .map(|&b| f64::from(b) * self.mem_block + self.overhead)
            .collect();
        Some(BlockAssignment {
            cfg: self.cfg,
            gpu_ids: ordered.iter().map(|g| g.0).collect(),
            blocks_per_gpu,
            layers_per_stage: layers,
            mem_per_gpu,
            mem_block: self.mem_block,
            overhead_per_gpu: self.overhead,
        })
    }
}

fn check_buffer(buffer: f64) -> Result<(), DeployError> {
    if (0.0..=0.5).contains(&buffer) {
        Ok(())
    } else {
        Err(DeployError::InvalidBuffer(buffer))
    }
}

/// Tries to fit `cfg` onto the `tp·pp` GPUs with the most usable free memory.
/// Returns `None` when no set of GPUs in the cluster could host it.
pub fn check_feasible(
    cfg: &DeployConfig,
    map: &ConfigMap,
    cluster: &ClusterState,
    buffer: f64,
) -> Option<BlockAssignment> {
    let plan = MemoryPlan::new(cfg, map)?;
    if plan.k() > cluster.len() {
        return None;
    }
    let mut ids: Vec<usize> = (0..cluster.len()).collect();
    ids.sort_by(|&a, &b| {
        cluster.gpus[b]
            .usable_free(buffer)
            .total_cmp(&cluster.gpus[a].usable_free(buffer))
            .then(a.cmp(&b))
    });
    ids.truncate(plan.k());
    if ids
        .iter()
        .any(|&i| cluster.gpus[i].usable_free(buffer) <= 0.0)
    {
        return None;
    }
    plan.pack(cluster, &ids, buffer)
}

fn policy_order(
    cluster: &ClusterState,
    loads: &[f64],
    candidates: &[usize],
    kind: PolicyKind,
) -> Vec<usize> {
    let mut ids = candidates.to_vec();
    match kind {
        PolicyKind::Packing => ids.sort_by(|&a, &b| {
            loads[b]
                .total_cmp(&loads[a])
                .then(
                    cluster.gpus[b]
                        .allocated
                        .total_cmp(&cluster.gpus[a].allocated),
                )
                .then(a.cmp(&b))
        }),
        _ => ids.sort_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(a.cmp(&b))),
    }
    ids
}

/// Takes the first `k` hostable GPUs in policy order; while they cannot hold
/// the model, swaps the tightest chosen GPU for the next candidate with more
/// room. Succeeds whenever the candidates' roomiest `k` GPUs would.
fn choose(
    plan: &MemoryPlan,
    cluster: &ClusterState,
    order: &[usize],
    buffer: f64,
) -> Option<BlockAssignment> {
    let mut eligible = order
        .iter()
        .copied()
        .filter(|&i| plan.can_host(cluster.gpus[i].usable_free(buffer)));
    let mut chosen: Vec<usize> = eligible.by_ref().take(plan.k()).collect();
    if chosen.len() < plan.k() {
        return None;
    }
    loop {
        if let Some(a) = plan.pack(cluster, &chosen, buffer) {
            return Some(a);
        }
        let free = |i: usize| cluster.gpus[i].usable_free(buffer);
        let (slot, tightest) = chosen
            .iter()
            .enumerate()
            .min_by(|a, b| free(*a.1).total_cmp(&free(*b.1)).then(b.0.cmp(&a.0)))
            .map(|(s, &g)| (s, g))?;
        let next = eligible.find(|&c| free(c) > free(tightest))?;
        chosen[slot] = next;
    }
}

/// Maps a feasible configuration onto concrete GPUs under `policy`.
pub fn place_llm(
    assignment: &BlockAssignment,
    policy: &PlacementPolicy,
    cluster: &ClusterState,
    buffer: f64,
    now: f64,
) -> Result<BlockAssignment, DeployError> {
    policy.validate()?;
    let plan = MemoryPlan {
        cfg: assignment.cfg,
        num_layers: assignment.layers_per_stage.iter().sum(),
        mem_block: assignment.mem_block,
        overhead: assignment.overhead_per_gpu,
    };
    let loads: Vec<f64> = (0..cluster.len())
        .map(|i| cluster.gpu_load(i, now))
        .collect::<Result<_, _>>()?;
    let all: Vec<usize> = (0..cluster.len()).collect();
    let placed = match policy.kind {
        PolicyKind::LeastLoaded | PolicyKind::Packing => choose(
            &plan,
            cluster,
            &policy_order(cluster, &loads, &all, policy.kind),
            buffer,
        ),
        PolicyKind::Hybrid => {
            let packable: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&i| loads[i] < policy.theta)
                .collect();
            choose(
                &plan,
                cluster,
                &policy_order(cluster, &loads, &packable, PolicyKind::Packing),
                buffer,
            )
            .or_else(|| {
                choose(
                    &plan,
                    cluster,
                    &policy_order(cluster, &loads, &all, PolicyKind::LeastLoaded),
                    buffer,
                )
            })
        }
    };
    placed.ok_or(DeployError::NoPlacement {
        k: plan.k(),
        policy: policy.kind,
    })
}

/// Outcome of a successful deployment decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub model_id: String,
    pub cfg: DeployConfig,
    pub gpu_ids: Vec<usize>,
    pub layers_per_stage: Vec<u32>,
    pub blocks_per_gpu: Vec<u32>,
    pub mem_per_gpu: Vec<f64>,
    pub predicted_ttft: f64,
    pub predicted_tpot: f64,
    /// Position of the committed configuration in the intent ranking.
    pub rank: usize,
    pub intent: Intent,
    pub policy: PlacementPolicy,
    pub timestamp: f64,
}

/// Walks the ranking and returns the first configuration that fits, placed
/// on GPUs. Does not modify the cluster.
pub fn deploy(
    map: &ConfigMap,
    intent: &Intent,
    policy: &PlacementPolicy,
    cluster: &ClusterState,
    buffer: f64,
    now: f64,
) -> Result<DeploymentRecord, DeployError> {
    check_buffer(buffer)?;
    policy.validate()?;
    for (rank, cfg) in rank_configs(map, intent)?.into_iter().enumerate() {
        let Some(feasible) = check_feasible(&cfg, map, cluster, buffer) else {
            continue;
        };
        let placed = place_llm(&feasible, policy, cluster, buffer, now)?;
        let lat = map
            .latency_params(&cfg)
            .expect("ranked configs have estimates");
        return Ok(DeploymentRecord {
            model_id: map.model_id.clone(),
            cfg,
            gpu_ids: placed.gpu_ids,
            layers_per_stage: placed.layers_per_stage,
            blocks_per_gpu: placed.blocks_per_gpu,
            mem_per_gpu: placed.mem_per_gpu,
            predicted_ttft: lat.ttft,
            predicted_tpot: lat.tpot,
            rank,
            intent: *intent,
            policy: *policy,
            timestamp: now,
        });
    }
    Err(DeployError::NoFeasibleConfig {
        model: map.model_id.clone(),
    })
}

/// Reserves the record's memory on its GPUs.
pub fn commit(cluster: &mut ClusterState, record: &DeploymentRecord) -> Result<(), DeployError> {
    for (&gpu, &gb) in record.gpu_ids.iter().zip(&record.mem_per_gpu) {
        cluster.allocate(gpu, gb)?;
    }
    Ok(())
}

/// Releases what [`commit`] reserved.
pub fn release(cluster: &mut ClusterState, record: &DeploymentRecord) -> Result<(), DeployError> {
    for (&gpu, &gb) in record.gpu_ids.iter().zip(&record.mem_per_gpu) {
        cluster.release(gpu, gb)?;
    }
    Ok(())
}

/// True if `cfg` keeps weights and KV cache at FP16 and is unpruned.
pub fn is_uncompressed(cfg: &DeployConfig) -> bool {
    cfg.compression() == Compression::IDENTITY
}
