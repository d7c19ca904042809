//! Closed-form solutions of the small linear systems behind the estimators.

use crate::oracle::{LatencyParams, MemoryComponents};

use super::ProfileError;

fn positive(component: &'static str, value: f64) -> Result<f64, ProfileError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(ProfileError::NonPositiveSolution { component, value })
    }
}

/// Solves the three-point memory system
///
/// ```text
/// m_base = W + A            (tp=1, pp=1)
/// m_pp2  = W + A + 2·A_p    (tp=1, pp=2)
/// m_tp2  = W + 2·A          (tp=2, pp=1)
/// ```
pub fn solve_memory_system(
    m_base: f64,
    m_pp2: f64,
    m_tp2: f64,
) -> Result<MemoryComponents, ProfileError> {
    let a = positive("A", m_tp2 - m_base)?;
    let a_p = positive("A_p", (m_pp2 - m_base) / 2.0)?;
    let w = positive("W", m_base - a)?;
    Ok(MemoryComponents { w, a, a_p })
}

/// Extends the two-fingerprint slope to the full layer count.
pub fn extrapolate_layers(m_k1: f64, m_k2: f64, num_layers: u32) -> Result<f64, ProfileError> {
    if m_k2 <= m_k1 {
        return Err(ProfileError::DegenerateSlope { k1: m_k1, k2: m_k2 });
    }
    Ok(m_k1 + f64::from(num_layers - 1) * (m_k2 - m_k1))
}

/// Solves `lat = ttft + len·tpot` from two output lengths.
pub fn solve_latency_pair(
    len1: u32,
    lat1: f64,
    len2: u32,
    lat2: f64,
) -> Result<LatencyParams, ProfileError> {
    if len1 == len2 {
        return Err(ProfileError::IdenticalLengths(len1));
    }
    let tpot = (lat2 - lat1) / (f64::from(len2) - f64::from(len1));
    let ttft = lat1 - f64::from(len1) * tpot;
    Ok(LatencyParams {
        ttft: positive("TTFT", ttft)?,
        tpot: positive("TPOT", tpot)?,
    })
}

/// Per-layer and non-layer latency terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerLatency {
    pub ttft_layer: f64,
    pub ttft_other: f64,
    pub tpot_layer: f64,
    pub tpot_other: f64,
}

impl LayerLatency {
    pub fn scale_to(&self, num_layers: u32) -> LatencyParams {
        let n = f64::from(num_layers);
        LatencyParams {
            ttft: n * self.ttft_layer + self.ttft_other,
            tpot: n * self.tpot_layer + self.tpot_other,
        }
    }
}

/// Solves the four-unknown system from the one- and two-layer fingerprints:
/// `ttft_k = k·TTFT_layer + TTFT_other` and likewise for TPOT, k ∈ {1, 2}.
pub fn solve_layer_decomposition(
    fp1: LatencyParams,
    fp2: LatencyParams,
) -> Result<LayerLatency, ProfileError> {
    let ttft_layer = positive("TTFT_layer", fp2.ttft - fp1.ttft)?;
    let tpot_layer = positive("TPOT_layer", fp2.tpot - fp1.tpot)?;
    Ok(LayerLatency {
        ttft_layer,
        ttft_other: positive("TTFT_other", fp1.ttft - ttft_layer)?,
        tpot_layer,
        tpot_other: positive("TPOT_other", fp1.tpot - tpot_layer)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn memory_system_example() {
        let c = solve_memory_system(10.0, 10.6, 12.0).unwrap();
        assert!(close(c.w, 8.0) && close(c.a, 2.0) && close(c.a_p, 0.3));
    }

    #[test]
    fn memory_system_rejects_negative_activation() {
        match solve_memory_system(10.0, 10.6, 9.9) {
            Err(ProfileError::NonPositiveSolution { component, value }) => {
                assert_eq!(component, "A");
                assert!(close(value, -0.1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extrapolation_example() {
        assert!(close(extrapolate_layers(1.0, 1.1, 80).unwrap(), 8.9));
        assert!(matches!(
            extrapolate_layers(1.0, 1.0, 80),
            Err(ProfileError::DegenerateSlope { .. })
        ));
    }

    #[test]
    fn latency_pair_example() {
        let p = solve_latency_pair(10, 3.0, 20, 4.0).unwrap();
        assert!(close(p.ttft, 2.0) && close(p.tpot, 0.1));
        assert!(matches!(
            solve_latency_pair(10, 3.0, 10, 4.0),
            Err(ProfileError::IdenticalLengths(10))
        ));
        assert!(matches!(
            solve_latency_pair(10, 4.0, 20, 3.0),
            Err(ProfileError::NonPositiveSolution {
                component: "TPOT",
                ..
            })
        ));
    }

    #[test]
    fn layer_decomposition_example() {
        let fp1 = LatencyParams {
            ttft: 0.7,
            tpot: 0.03,
        };
        let fp2 = LatencyParams {
            ttft: 1.2,
            tpot: 0.05,
        };
        let d = solve_layer_decomposition(fp1, fp2).unwrap();
        assert!(close(d.ttft_layer, 0.5) && close(d.ttft_other, 0.2));
        assert!(close(d.tpot_layer, 0.02) && close(d.tpot_other, 0.01));
        assert!(close(d.scale_to(80).ttft, 40.2));
        // slope larger than the one-layer total leaves a negative remainder
        let bad = LatencyParams {
            ttft: 1.5,
            tpot: 0.05,
        };
        assert!(matches!(
            solve_layer_decomposition(fp1, bad),
            Err(ProfileError::NonPositiveSolution {
                component: "TTFT_other",
                ..
            })
        ));
    }
}
