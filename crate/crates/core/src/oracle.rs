//! Synthetic ground truth for memory footprint and latency.
//!
//! Memory follows the parallelism overhead model: with effective weights
//! `W`, activations `A` and pipeline activations `A_p`,
//!
//! ```text
//! total(tp, pp) = W + tp·A                 (pp = 1)
//! total(tp, pp) = W + tp·A + tp·pp·A_p     (pp > 1)
//! ```
//!
//! Latency decomposes over hidden layers: `ttft = layers·TTFT_layer + TTFT_other`
//! (same for TPOT), with a power-law TP speedup plus a linear sync cost per
//! layer. Both are affine in the number of hidden layers, which is what makes
//! fingerprint extrapolation exact in the absence of noise.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{DeployConfig, LayerStack, PruneKind, QuantKind, TP_DEGREES};

/// Largest per-stage latency overhead accepted for pipeline parallelism.
pub const MAX_PP_LAT_OVERHEAD: f64 = 0.0005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("configuration {cfg} is invalid for `{model}`: {reason}")]
    InvalidConfig {
        model: String,
        cfg: DeployConfig,
        reason: String,
    },
    #[error("output length must be at least 1")]
    ZeroOutputLength,
}

/// Hidden per-model parameters. Memory in GB, latency in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub w_layer: f64,
    pub w_other: f64,
    pub a_act: f64,
    pub a_pp: f64,
    pub ttft_layer_base: f64,
    pub ttft_other: f64,
    pub tpot_layer_base: f64,
    pub tpot_other: f64,
    pub tp_speedup_exponent: f64,
    pub tp_sync_cost: f64,
    /// Missing entries are neutral (1.0).
    #[serde(default)]
    pub quant_lat_factor: BTreeMap<QuantKind, f64>,
    #[serde(default)]
    pub prune_mem_factor: BTreeMap<PruneKind, f64>,
    #[serde(default)]
    pub prune_lat_factor: BTreeMap<PruneKind, f64>,
    #[serde(default)]
    pub kv_mem_factor: BTreeMap<QuantKind, f64>,
    #[serde(default)]
    pub pp_lat_overhead_frac: f64,
}

impl OracleParams {
    /// Returns the offending field and reason on failure.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let positive = [
            ("w_layer", self.w_layer),
            ("w_other", self.w_other),
            ("a_act", self.a_act),
            ("a_pp", self.a_pp),
            ("ttft_layer_base", self.ttft_layer_base),
            ("ttft_other", self.ttft_other),
            ("tpot_layer_base", self.tpot_layer_base),
            ("tpot_other", self.tpot_other),
            ("tp_speedup_exponent", self.tp_speedup_exponent),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err((field.into(), format!("must be > 0, got {v}")));
            }
        }
        if !(self.tp_sync_cost.is_finite() && self.tp_sync_cost >= 0.0) {
            return Err(("tp_sync_cost".into(), "must be >= 0".into()));
        }
        if !(0.0..=MAX_PP_LAT_OVERHEAD).contains(&self.pp_lat_overhead_frac) {
            return Err((
                "pp_lat_overhead_frac".into(),
                format!("must lie in [0, {MAX_PP_LAT_OVERHEAD}]"),
            ));
        }
        let factors = self
            .quant_lat_factor
            .iter()
            .map(|(k, v)| (format!("quant_lat_factor.{k:?}"), *v))
            .chain(
                self.kv_mem_factor
                    .iter()
                    .map(|(k, v)| (format!("kv_mem_factor.{k:?}"), *v)),
            )
            .chain(
                self.prune_mem_factor
                    .iter()
                    .map(|(k, v)| (format!("prune_mem_factor.{k:?}"), *v)),
            )
            .chain(
                self.prune_lat_factor
                    .iter()
                    .map(|(k, v)| (format!("prune_lat_factor.{k:?}"), *v)),
            );
        for (field, v) in factors {
            if !(v.is_finite() && v > 0.0) {
                return Err((field, format!("must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    fn quant_lat(&self, q: QuantKind) -> f64 {
        self.quant_lat_factor.get(&q).copied().unwrap_or(1.0)
    }
    fn kv_mem(&self, q: QuantKind) -> f64 {
        self.kv_mem_factor.get(&q).copied().unwrap_or(1.0)
    }
    fn prune_mem(&self, p: PruneKind) -> f64 {
        self.prune_mem_factor.get(&p).copied().unwrap_or(1.0)
    }
    fn prune_lat(&self, p: PruneKind) -> f64 {
        self.prune_lat_factor.get(&p).copied().unwrap_or(1.0)
    }
}

/// Effective memory components under a configuration's compression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryComponents {
    pub w: f64,
    pub a: f64,
    pub a_p: f64,
}

impl MemoryComponents {
    /// Footprint without parallelism, `W + A`.
    pub fn base(&self) -> f64 {
        self.w + self.a
    }

    pub fn total(&self, tp: u32, pp: u32) -> f64 {
        let tp_f = f64::from(tp);
        let pp_term = if pp > 1 {
            tp_f * f64::from(pp) * self.a_p
        } else {
            0.0
        };
        self.w + tp_f * self.a + pp_term
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub w: f64,
    pub a: f64,
    pub a_p: f64,
    pub total: f64,
    pub per_gpu: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    pub ttft: f64,
    pub tpot: f64,
}

impl LatencyParams {
    pub fn latency(&self, output_len: u32) -> f64 {
        self.ttft + f64::from(output_len) * self.tpot
    }
}

/// Measurement noise applied to observations. `sigma` is relative for the
/// multiplicative kind and in the observation's unit for the additive kind.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    #[default]
    None,
    Multiplicative {
        sigma: f64,
    },
    Additive {
        sigma: f64,
    },
}

impl NoiseSpec {
    pub fn multiplicative(sigma: f64) -> Self {
        NoiseSpec::Multiplicative { sigma }
    }

    pub fn is_none(&self) -> bool {
        match *self {
            NoiseSpec::None => true,
            NoiseSpec::Multiplicative { sigma } | NoiseSpec::Additive { sigma } => sigma == 0.0,
        }
    }

    /// Applies one Gaussian draw seeded by `seed`.
    pub fn apply(&self, value: f64, seed: u64) -> f64 {
        let (sigma, multiplicative) = match *self {
            NoiseSpec::None => return value,
            NoiseSpec::Multiplicative { sigma } => (sigma, true),
            NoiseSpec::Additive { sigma } => (sigma, false),
        };
        if sigma <= 0.0 {
            return value;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = Normal::new(0.0, sigma)
            .expect("sigma is finite and positive")
            .sample(&mut rng);
        if multiplicative {
            value * (1.0 + eps)
        } else {
            value + eps
        }
    }
}

fn check_config<S: LayerStack + ?Sized>(
    subject: &S,
    cfg: &DeployConfig,
) -> Result<(), OracleError> {
    let arch = subject.architecture();
    let fail = |reason: String| OracleError::InvalidConfig {
        model: arch.model_id.clone(),
        cfg: *cfg,
        reason,
    };
    if !TP_DEGREES.contains(&cfg.tp) {
        return Err(fail(format!("tp must be one of {TP_DEGREES:?}")));
    }
    if cfg.pp == 0 {
        return Err(fail("pp must be at least 1".into()));
    }
    if !arch.supports(&cfg.compression()) {
        return Err(fail("compression not supported by the model".into()));
    }
    Ok(())
}

/// Layers per pipeline stage: as even as possible, earlier stages take the
/// remainder. Stages may be empty only when `pp > num_layers`.
pub fn even_stage_split(num_layers: u32, pp: u32) -> Vec<u32> {
    let base = num_layers / pp;
    let rem = num_layers % pp;
    (0..pp).map(|s| base + u32::from(s < rem)).collect()
}

/// Per-GPU memory for a balanced deployment: the base footprint follows the
/// layer split (divided across the TP group), the parallelism overhead is
/// spread evenly over all GPUs. Stage-major order.
pub fn balanced_per_gpu(total: f64, base: f64, num_layers: u32, tp: u32, pp: u32) -> Vec<f64> {
    let gpus = f64::from(tp * pp);
    let overhead = (total - base).max(0.0) / gpus;
    let mut out = Vec::with_capacity((tp * pp) as usize);
    for layers in even_stage_split(num_layers, pp) {
        let share = base * f64::from(layers) / (f64::from(num_layers) * f64::from(tp));
        out.extend(std::iter::repeat_n(share + overhead, tp as usize));
    }
    // the base share is distributed exactly; fold any float residue into GPU 0
    let residue = total - out.iter().sum::<f64>();
    out[0] += residue;
    out
}

pub fn effective_components<S: LayerStack + ?Sized>(
    subject: &S,
    cfg: &DeployConfig,
) -> Result<MemoryComponents, OracleError> {
    check_config(subject, cfg)?;
    let p = &subject.architecture().oracle_params;
    let layers = f64::from(subject.num_layers());
    let w =
        (p.w_layer * layers + p.w_other) * cfg.weight_quant.mem_factor() * p.prune_mem(cfg.prune);
    Ok(MemoryComponents {
        w,
        a: p.a_act * p.kv_mem(cfg.kv_quant),
        a_p: p.a_pp,
    })
}

pub fn true_memory<S: LayerStack + ?Sized>(
    subject: &S,
    cfg: &DeployConfig,
) -> Result<MemoryBreakdown, OracleError> {
    let c = effective_components(subject, cfg)?;
    let total = c.total(cfg.tp, cfg.pp);
    Ok(MemoryBreakdown {
        w: c.w,
        a: c.a,
        a_p: c.a_p,
        total,
        per_gpu: balanced_per_gpu(total, c.base(), subject.num_layers(), cfg.tp, cfg.pp),
    })
}

pub fn true_latency_params<S: LayerStack + ?Sized>(
    subject: &S,
    cfg: &DeployConfig,
) -> Result<LatencyParams, OracleError> {
    check_config(subject, cfg)?;
    let p = &subject.architecture().oracle_params;
    let layers = f64::from(subject.num_layers());
    let tp = f64::from(cfg.tp);
    let compress = p.quant_lat(cfg.weight_quant) * p.prune_lat(cfg.prune);
    let speedup = tp.powf(p.tp_speedup_exponent);
    let sync = p.tp_sync_cost * (tp - 1.0);
    let pp_scale = 1.0 + p.pp_lat_overhead_frac * f64::from(cfg.pp - 1);
    let ttft_layer = p.ttft_layer_base * compress / speedup + sync;
    let tpot_layer = p.tpot_layer_base * compress / speedup + sync;
    Ok(LatencyParams {
        ttft: (layers * ttft_layer + p.ttft_other) * pp_scale,
        tpot: (layers * tpot_layer + p.tpot_other) * pp_scale,
    })
}

/// End-to-end latency of one request, `(ttft + len·tpot)` under noise.
pub fn observe_latency<S: LayerStack + ?Sized>(
    subject: &S,
    cfg: &DeployConfig,
    output_len: u32,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<f64, OracleError> {
    if output_len == 0 {
        return Err(OracleError::ZeroOutputLength);
    }
    let lat = true_latency_params(subject, cfg)?.latency(output_len);
    Ok(noise.apply(lat, seed))
}

pub fn observe_peak_memory<S: LayerStack + ?Sized>(
    subject: &S,
    cfg: &DeployConfig,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<f64, OracleError> {
    Ok(noise.apply(true_memory(subject, cfg)?.total, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_fingerprint, Compression, ModelArchitecture};
    use crate::presets;
    use proptest::prelude::*;

    /// W = 6·1 + 2 = 8, A = 2, A_p = 0.3.
    fn toy() -> ModelArchitecture {
        let mut m = presets::preset("llama2-7b").unwrap();
        m.num_layers = 6;
        let p = &mut m.oracle_params;
        p.w_layer = 1.0;
        p.w_other = 2.0;
        p.a_act = 2.0;
        p.a_pp = 0.3;
        p.ttft_layer_base = 0.5;
        p.ttft_other = 0.2;
        p.tpot_layer_base = 0.05;
        p.tpot_other = 0.01;
        p.tp_speedup_exponent = 1.0;
        p.tp_sync_cost = 0.05;
        p.quant_lat_factor.clear();
        p.prune_lat_factor.clear();
        p.pp_lat_overhead_frac = 0.0;
        m
    }

    fn cfg(tp: u32, pp: u32) -> DeployConfig {
        DeployConfig::baseline().with_parallelism(tp, pp)
    }

    #[test]
    fn memory_closed_forms() {
        let m = toy();
        let total = |tp, pp| true_memory(&m, &cfg(tp, pp)).unwrap().total;
        assert!((total(1, 1) - 10.0).abs() < 1e-12);
        assert!((total(2, 1) - 12.0).abs() < 1e-12);
        assert!((total(1, 2) - 10.6).abs() < 1e-12);
        assert!((total(2, 2) - 13.2).abs() < 1e-12);
    }

    #[test]
    fn int8_halves_weights_only() {
        let m = toy();
        let c = DeployConfig::new(
            1,
            1,
            Compression {
                weight_quant: QuantKind::Int8,
                ..Compression::IDENTITY
            },
        );
        let mem = true_memory(&m, &c).unwrap();
        assert!((mem.w - 4.0).abs() < 1e-12);
        assert!((mem.a - 2.0).abs() < 1e-12);
        assert!((mem.total - 6.0).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_latency_examples() {
        let m = toy();
        let fp = generate_fingerprint(&m, 1).unwrap();
        let lat = true_latency_params(&fp, &cfg(1, 1)).unwrap();
        assert!((lat.ttft - 0.7).abs() < 1e-12);
        // TTFT_layer at tp=2 is 0.5/2 + 0.05 = 0.30
        let lat2 = true_latency_params(&fp, &cfg(2, 1)).unwrap();
        assert!((lat2.ttft - (0.30 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn pipeline_is_latency_neutral_by_default() {
        let m = presets::preset("llama2-70b").unwrap();
        let a = true_latency_params(&m, &cfg(1, 1)).unwrap();
        let b = true_latency_params(&m, &cfg(1, 8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pipeline_overhead_fraction() {
        let mut m = toy();
        m.oracle_params.pp_lat_overhead_frac = 0.0005;
        let a = true_latency_params(&m, &cfg(1, 1)).unwrap();
        let b = true_latency_params(&m, &cfg(1, 3)).unwrap();
        assert!((b.ttft / a.ttft - 1.001).abs() < 1e-12);
        m.oracle_params.pp_lat_overhead_frac = 0.01;
        assert!(m.validate().is_err());
    }

    #[test]
    fn observation_examples() {
        // ttft = 2, tpot = 0.1 via a zero-sync, single-layer-free setup
        let mut m = toy();
        let p = &mut m.oracle_params;
        p.ttft_layer_base = 0.3;
        p.ttft_other = 0.2;
        p.tpot_layer_base = 0.015;
        p.tpot_other = 0.01;
        let c = cfg(1, 1);
        let lat = true_latency_params(&m, &c).unwrap();
        assert!((lat.ttft - 2.0).abs() < 1e-12 && (lat.tpot - 0.1).abs() < 1e-12);
        let none = NoiseSpec::None;
        assert!((observe_latency(&m, &c, 10, &none, 1).unwrap() - 3.0).abs() < 1e-12);
        assert!((observe_latency(&m, &c, 20, &none, 1).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(
            observe_latency(&m, &c, 0, &none, 1),
            Err(OracleError::ZeroOutputLength)
        );

        let noisy = NoiseSpec::multiplicative(0.02);
        let v = observe_latency(&m, &c, 10, &noisy, 42).unwrap();
        assert_eq!(v, observe_latency(&m, &c, 10, &noisy, 42).unwrap());
        assert!((v - 3.0).abs() <= 3.0 * 0.02 * 3.0);
        assert_ne!(v, observe_latency(&m, &c, 10, &noisy, 43).unwrap());
    }

    #[test]
    fn memory_observation_noise() {
        let m = toy();
        let c = cfg(2, 2);
        let truth = true_memory(&m, &c).unwrap().total;
        assert_eq!(
            observe_peak_memory(&m, &c, &NoiseSpec::None, 9).unwrap(),
            truth
        );
        let zero = NoiseSpec::Additive { sigma: 0.0 };
        assert_eq!(observe_peak_memory(&m, &c, &zero, 9).unwrap(), truth);
        let noisy = NoiseSpec::multiplicative(0.05);
        assert_eq!(
            observe_peak_memory(&m, &c, &noisy, 5).unwrap(),
            observe_peak_memory(&m, &c, &noisy, 5).unwrap()
        );
    }

    #[test]
    fn rejects_unsupported_configs() {
        let m = presets::preset("falcon-7b").unwrap();
        let bad = DeployConfig::new(
            1,
            1,
            Compression {
                weight_quant: QuantKind::Gptq4,
                ..Compression::IDENTITY
            },
        );
        assert!(matches!(
            true_memory(&m, &bad),
            Err(OracleError::InvalidConfig { .. })
        ));
        assert!(true_latency_params(&m, &cfg(3, 1)).is_err());
    }

    #[test]
    fn even_split_remainder_first() {
        assert_eq!(even_stage_split(30, 4), vec![8, 8, 7, 7]);
        assert_eq!(even_stage_split(32, 4), vec![8, 8, 8, 8]);
        assert_eq!(even_stage_split(1, 3), vec![1, 0, 0]);
    }

    fn arb_model() -> impl Strategy<Value = ModelArchitecture> {
        (
            3u32..120,
            0.05f64..3.0,
            0.05f64..3.0,
            0.01f64..2.0,
            0.001f64..0.5,
            0.3f64..1.2,
            0.0f64..0.01,
        )
            .prop_map(|(layers, wl, wo, a, ap, exp, sync)| {
                let mut m = presets::preset("llama2-70b").unwrap();
                m.num_layers = layers;
                let p = &mut m.oracle_params;
                p.w_layer = wl;
                p.w_other = wo;
                p.a_act = a;
                p.a_pp = ap;
                p.tp_speedup_exponent = exp;
                p.tp_sync_cost = sync;
                m
            })
    }

    proptest! {
        #[test]
        fn closed_forms_hold_for_random_params(m in arb_model()) {
            let p = m.oracle_params.clone();
            let w = p.w_layer * f64::from(m.num_layers) + p.w_other;
            let (a, ap) = (p.a_act, p.a_pp);
            for &(tp, pp, expect) in &[
                (1, 1, w + a),
                (4, 1, w + 4.0 * a),
                (1, 3, w + a + 3.0 * ap),
                (2, 4, w + 2.0 * a + 8.0 * ap),
            ] {
                let got = true_memory(&m, &cfg(tp, pp)).unwrap();
                prop_assert!((got.total - expect).abs() <= 1e-9 * expect);
                prop_assert!((got.per_gpu.iter().sum::<f64>() - got.total).abs() < 1e-9);
                prop_assert_eq!(got.per_gpu.len() as u32, tp * pp);
            }
        }

        #[test]
        fn affine_in_layers(m in arb_model(), ci in 0usize..180) {
            let configs = crate::catalog::enumerate_configs(&m, 8);
            let c = configs[ci % configs.len()];
            let f1 = generate_fingerprint(&m, 1).unwrap();
            let f2 = generate_fingerprint(&m, 2).unwrap();
            let m1 = true_memory(&f1, &c).unwrap().total;
            let m2 = true_memory(&f2, &c).unwrap().total;
            let full = true_memory(&m, &c).unwrap().total;
            let slope = m2 - m1;
            prop_assert!((m1 + f64::from(m.num_layers - 1) * slope - full).abs() <= 1e-9 * full);
            let l1 = true_latency_params(&f1, &c).unwrap();
            let l2 = true_latency_params(&f2, &c).unwrap();
            let lf = true_latency_params(&m, &c).unwrap();
            let n = f64::from(m.num_layers - 1);
            prop_assert!((l1.ttft + n * (l2.ttft - l1.ttft) - lf.ttft).abs() <= 1e-9 * lf.ttft);
            prop_assert!((l1.tpot + n * (l2.tpot - l1.tpot) - lf.tpot).abs() <= 1e-9 * lf.tpot);
        }

        #[test]
        fn memory_monotone_in_parallelism(m in arb_model()) {
            for tp in [1u32, 2, 4] {
                for pp in 1u32..8 {
                    let here = true_memory(&m, &cfg(tp, pp)).unwrap().total;
                    prop_assert!(true_memory(&m, &cfg(tp * 2, pp)).unwrap().total >= here);
                    prop_assert!(true_memory(&m, &cfg(tp, pp + 1)).unwrap().total >= here);
                }
            }
        }

        #[test]
        fn zero_noise_is_exact(m in arb_model(), seed in any::<u64>(), len in 1u32..500) {
            let c = cfg(2, 2);
            prop_assert_eq!(
                observe_latency(&m, &c, len, &NoiseSpec::None, seed).unwrap(),
                true_latency_params(&m, &c).unwrap().latency(len)
            );
            prop_assert_eq!(
                observe_peak_memory(&m, &c, &NoiseSpec::multiplicative(0.0), seed).unwrap(),
                true_memory(&m, &c).unwrap().total
            );
        }
    }
}
