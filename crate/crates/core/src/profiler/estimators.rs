//! The five estimation methods. Each one talks to the hardware only through an
//! [`Observer`], so the same code runs against the noiseless oracle, a noisy
//! oracle or a recorded fixture.
//!
//! A solve that comes out non-positive (or with a degenerate slope) is retried
//! once with fresh observations; a second failure marks the entry as failed
//! rather than clamping it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catalog::{Compression, DeployConfig, ModelArchitecture};
use crate::oracle::{LatencyParams, MemoryComponents};

use super::observer::{Observer, Subject};
use super::solve::{
    extrapolate_layers, solve_latency_pair, solve_layer_decomposition, solve_memory_system,
};
use super::ProfileError;

/// Output lengths (tokens) used for the two-point latency solves.
pub const DEFAULT_LENGTHS: (u32, u32) = (8, 64);

/// Why an entry of the map could not be estimated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryFailure {
    pub reason: String,
}

pub type Estimate<T> = Result<T, EntryFailure>;

fn with_retry<T>(
    mut attempt: impl FnMut() -> Result<T, ProfileError>,
) -> Result<Estimate<T>, ProfileError> {
    let mut last = None;
    for _ in 0..2 {
        match attempt() {
            Ok(v) => return Ok(Ok(v)),
            Err(e) if e.is_soft() => {
                log::debug!("retrying after soft failure: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    let reason = last.map(|e| e.to_string()).unwrap_or_default();
    Ok(Err(EntryFailure { reason }))
}

/// The three parallelism points of the memory system.
const MEMORY_POINTS: [(u32, u32); 3] = [(1, 1), (1, 2), (2, 1)];

fn memory_points<O: Observer + ?Sized>(
    obs: &mut O,
    c: Compression,
    mut observe: impl FnMut(&mut O, &DeployConfig) -> Result<f64, ProfileError>,
) -> Result<MemoryComponents, ProfileError> {
    let mut m = [0.0; 3];
    for (slot, (tp, pp)) in m.iter_mut().zip(MEMORY_POINTS) {
        *slot = observe(obs, &DeployConfig::new(tp, pp, c))?;
    }
    solve_memory_system(m[0], m[1], m[2])
}

fn extrapolated<O: Observer + ?Sized>(
    obs: &mut O,
    cfg: &DeployConfig,
    num_layers: u32,
) -> Result<f64, ProfileError> {
    let m1 = obs.observe_memory(Subject::Fingerprint(1), cfg)?;
    let m2 = obs.observe_memory(Subject::Fingerprint(2), cfg)?;
    extrapolate_layers(m1, m2, num_layers)
}

/// M1: observe the full model at (1,1), (1,2) and (2,1) per compression and
/// solve for `W`, `A`, `A_p`.
pub fn estimate_memory_m1<O: Observer + ?Sized>(
    model: &ModelArchitecture,
    obs: &mut O,
) -> Result<BTreeMap<Compression, Estimate<MemoryComponents>>, ProfileError> {
    let mut out = BTreeMap::new();
    for c in model.compressions() {
        let est =
            with_retry(|| memory_points(obs, c, |o, cfg| o.observe_memory(Subject::Full, cfg)))?;
        out.insert(c, est);
    }
    Ok(out)
}

/// M2: as M1, but each full-model footprint is extrapolated from the one- and
/// two-layer fingerprints.
pub fn estimate_memory_m2<O: Observer + ?Sized>(
    model: &ModelArchitecture,
    obs: &mut O,
) -> Result<BTreeMap<Compression, Estimate<MemoryComponents>>, ProfileError> {
    let layers = model.num_layers;
    let mut out = BTreeMap::new();
    for c in model.compressions() {
        let est = with_retry(|| memory_points(obs, c, |o, cfg| extrapolated(o, cfg, layers)))?;
        out.insert(c, est);
    }
    Ok(out)
}

/// M3: extrapolate the fingerprints under every configuration directly.
pub fn estimate_memory_m3<O: Observer + ?Sized>(
    model: &ModelArchitecture,
    configs: &[DeployConfig],
    obs: &mut O,
) -> Result<BTreeMap<DeployConfig, Estimate<f64>>, ProfileError> {
    let mut out = BTreeMap::new();
    for cfg in configs {
        let est = with_retry(|| extrapolated(obs, cfg, model.num_layers))?;
        out.insert(*cfg, est);
    }
    Ok(out)
}

fn latency_pair<O: Observer + ?Sized>(
    obs: &mut O,
    subject: Subject,
    cfg: &DeployConfig,
    (l1, l2): (u32, u32),
) -> Result<LatencyParams, ProfileError> {
    if l1 == l2 {
        return Err(ProfileError::IdenticalLengths(l1));
    }
    let lat1 = obs.observe_latency(subject, cfg, l1)?;
    let lat2 = obs.observe_latency(subject, cfg, l2)?;
    solve_latency_pair(l1, lat1, l2, lat2)
}

/// Copies the per-(tp, compression) estimates onto every pipeline depth.
fn replicate(
    configs: &[DeployConfig],
    solved: &BTreeMap<DeployConfig, Estimate<LatencyParams>>,
) -> BTreeMap<DeployConfig, Estimate<LatencyParams>> {
    configs
        .iter()
        .map(|cfg| {
            let est = solved
                .get(&cfg.with_parallelism(cfg.tp, 1))
                .cloned()
                .unwrap_or_else(|| {
                    Err(EntryFailure {
                        reason: format!("no pp=1 profile for {cfg}"),
                    })
                });
            (*cfg, est)
        })
        .collect()
}

/// L1: observe the full model at two output lengths for every pp=1 config.
pub fn estimate_latency_l1<O: Observer + ?Sized>(
    configs: &[DeployConfig],
    lengths: (u32, u32),
    obs: &mut O,
) -> Result<BTreeMap<DeployConfig, Estimate<LatencyParams>>, ProfileError> {
    let mut solved = BTreeMap::new();
    for cfg in configs.iter().filter(|c| c.pp == 1) {
        let est = with_retry(|| latency_pair(obs, Subject::Full, cfg, lengths))?;
        solved.insert(*cfg, est);
    }
    Ok(replicate(configs, &solved))
}

/// L2: observe both fingerprints at two output lengths and decompose latency
/// into per-layer and non-layer terms.
pub fn estimate_latency_l2<O: Observer + ?Sized>(
    model: &ModelArchitecture,
    configs: &[DeployConfig],
    lengths: (u32, u32),
    obs: &mut O,
) -> Result<BTreeMap<DeployConfig, Estimate<LatencyParams>>, ProfileError> {
    let mut solved = BTreeMap::new();
    for cfg in configs.iter().filter(|c| c.pp == 1) {
        let est = with_retry(|| {
            let fp1 = latency_pair(obs, Subject::Fingerprint(1), cfg, lengths)?;
            let fp2 = latency_pair(obs, Subject::Fingerprint(2), cfg, lengths)?;
            Ok(solve_layer_decomposition(fp1, fp2)?.scale_to(model.num_layers))
        })?;
        solved.insert(*cfg, est);
    }
    Ok(replicate(configs, &solved))
}
