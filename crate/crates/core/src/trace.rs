//! Request traces: CSV ingestion, rate scaling, Poisson synthesis and model
//! assignment.
//!
//! A trace file has the header `timestamp_ms,input_tokens,output_tokens` and
//! an optional `model_id` column. Timestamps are shifted so the first request
//! arrives at zero.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prompts longer than this are truncated.
pub const MAX_INPUT_LEN: u32 = 1024;
/// Default discretisation interval for rate scaling, in seconds.
pub const DEFAULT_INTERVAL_S: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("cannot read trace: {0}")]
    Io(String),
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("trace has no requests")]
    EmptyTrace,
    #[error("no base latency for model `{0}`")]
    MissingModel(String),
    #[error("{0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Seconds since the first request.
    pub timestamp: f64,
    pub input_len: u32,
    pub output_len: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
    pub source: String,
    pub rate_scale: f64,
}

impl Trace {
    /// Sorts (stably) and shifts timestamps to start at zero.
    pub fn new(mut entries: Vec<TraceEntry>, source: impl Into<String>) -> Self {
        entries.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        if let Some(t0) = entries.first().map(|e| e.timestamp) {
            for e in &mut entries {
                e.timestamp -= t0;
            }
        }
        Trace {
            entries,
            source: source.into(),
            rate_scale: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.timestamp)
    }

    /// Drops requests arriving at or after `end` seconds.
    pub fn truncate_at(&mut self, end: f64) {
        self.entries.retain(|e| e.timestamp < end);
    }

    pub fn clamp_output(&mut self, max_output: u32) {
        for e in &mut self.entries {
            e.output_len = e.output_len.min(max_output.max(1));
        }
    }

    /// Per-interval request counts from time zero to the last arrival.
    pub fn interval_counts(&self, interval: f64) -> Vec<usize> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        let n = (self.duration() / interval).floor() as usize + 1;
        let mut counts = vec![0; n];
        for e in &self.entries {
            counts[((e.timestamp / interval).floor() as usize).min(n - 1)] += 1;
        }
        counts
    }

    pub fn to_csv(&self) -> String {
        let with_model = self.entries.iter().any(|e| e.model_id.is_some());
        let mut out = String::from("timestamp_ms,input_tokens,output_tokens");
        if with_model {
            out.push_str(",model_id");
        }
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{:.3},{},{}",
                e.timestamp * 1000.0,
                e.input_len,
                e.output_len
            ));
            if with_model {
                out.push(',');
                out.push_str(e.model_id.as_deref().unwrap_or(""));
            }
            out.push('\n');
        }
        out
    }
}

pub fn parse_trace(path: &Path) -> Result<Trace, TraceError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TraceError::Io(format!("{}: {e}", path.display())))?;
    parse_trace_str(&text, &path.display().to_string())
}

pub fn parse_trace_str(text: &str, source: &str) -> Result<Trace, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| TraceError::Parse {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| {
        column(name).ok_or_else(|| TraceError::Parse {
            line: 1,
            reason: format!("missing column `{name}`"),
        })
    };
    let (ts_col, in_col, out_col) = (
        required("timestamp_ms")?,
        required("input_tokens")?,
        required("output_tokens")?,
    );
    let model_col = column("model_id");

    let mut entries = Vec::new();
    let mut clamped = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| TraceError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let fail = |reason: String| TraceError::Parse { line, reason };
        let ts: f64 = field(ts_col)
            .parse()
            .map_err(|_| fail(format!("timestamp_ms `{}` is not a number", field(ts_col))))?;
        if !ts.is_finite() {
            return Err(fail("timestamp_ms must be finite".into()));
        }
        let tokens = |i: usize, name: &str| -> Result<u32, TraceError> {
            let v: i64 = field(i)
                .parse()
                .map_err(|_| fail(format!("{name} `{}` is not an integer", field(i))))?;
            if v < 1 {
                return Err(fail(format!("{name} must be at least 1, got {v}")));
            }
            u32::try_from(v).map_err(|_| fail(format!("{name} {v} is too large")))
        };
        let input = tokens(in_col, "input_tokens")?;
        let output = tokens(out_col, "output_tokens")?;
        if input > MAX_INPUT_LEN {
            clamped += 1;
        }
        entries.push(TraceEntry {
            timestamp: ts / 1000.0,
            input_len: input.min(MAX_INPUT_LEN),
            output_len: output,
            model_id: model_col
                .map(|c| field(c).to_string())
                .filter(|m| !m.is_empty()),
        });
    }
    if entries.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    if clamped > 0 {
        log::info!("{source}: truncated {clamped} prompts to {MAX_INPUT_LEN} tokens");
    }
    Ok(Trace::new(entries, source))
}

/// Rescales request counts per `interval` by `rate_factor`, keeping the
/// burst pattern. Each interval gets `round(count × factor)` requests spaced
/// uniformly, with lengths drawn from that interval's originals. When the
/// count is unchanged the originals are kept in order.
pub fn scale_trace(
    trace: &Trace,
    rate_factor: f64,
    interval: f64,
    seed: u64,
) -> Result<Trace, TraceError> {
    if !(rate_factor > 0.0 && rate_factor.is_finite()) {
        return Err(TraceError::InvalidArgument(format!(
            "rate factor must be positive, got {rate_factor}"
        )));
    }
    if !(interval > 0.0 && interval.is_finite()) {
        return Err(TraceError::InvalidArgument(format!(
            "interval must be positive, got {interval}"
        )));
    }
    let mut buckets: Vec<Vec<&TraceEntry>> =
        vec![Vec::new(); trace.interval_counts(interval).len()];
    for e in &trace.entries {
        let i = ((e.timestamp / interval).floor() as usize).min(buckets.len() - 1);
        buckets[i].push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (i, originals) in buckets.iter().enumerate() {
        let count = (originals.len() as f64 * rate_factor).round() as usize;
        let start = i as f64 * interval;
        for j in 0..count {
            let src = if count == originals.len() {
                originals[j]
            } else {
                originals
                    .choose(&mut rng)
                    .expect("count > 0 implies originals")
            };
            entries.push(TraceEntry {
                timestamp: start + j as f64 * interval / count as f64,
                ..src.clone()
            });
        }
    }
    Ok(Trace {
        entries,
        source: trace.source.clone(),
        rate_scale: trace.rate_scale * rate_factor,
    })
}

/// Request length distribution for synthetic traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Fixed {
        input: u32,
        output: u32,
    },
    LogNormal {
        input_median: f64,
        output_median: f64,
        sigma: f64,
    },
}

impl LengthDist {
    fn sample<R: Rng>(&self, rng: &mut R) -> (u32, u32) {
        match *self {
            LengthDist::Fixed { input, output } => (input.clamp(1, MAX_INPUT_LEN), output.max(1)),
            LengthDist::LogNormal {
                input_median,
                output_median,
                sigma,
            } => {
                let draw = |median: f64, rng: &mut R| {
                    let d = LogNormal::new(median.ln(), sigma).expect("valid log-normal");
                    d.sample(rng).round().max(1.0)
                };
                let input = draw(input_median, rng).min(f64::from(MAX_INPUT_LEN)) as u32;
                let output = draw(output_median, rng).min(f64::from(u32::MAX)) as u32;
                (input, output)
            }
        }
    }
}

/// A rate that applies from `start` seconds until the next segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSegment {
    pub start: f64,
    pub rate: f64,
}

pub fn synth_poisson(
    rate: f64,
    duration: f64,
    lengths: LengthDist,
    seed: u64,
) -> Result<Trace, TraceError> {
    synth_poisson_schedule(&[RateSegment { start: 0.0, rate }], duration, lengths, seed)
}

/// Poisson arrivals with a piecewise-constant rate.
pub fn synth_poisson_schedule(
    schedule: &[RateSegment],
    duration: f64,
    lengths: LengthDist,
    seed: u64,
) -> Result<Trace, TraceError> {
    if schedule.is_empty() || schedule.iter().all(|s| s.rate <= 0.0) {
        return Err(TraceError::InvalidArgument(
            "need at least one positive rate".into(),
        ));
    }
    if schedule.iter().any(|s| s.rate < 0.0 || !s.rate.is_finite()) {
        return Err(TraceError::InvalidArgument(
            "rates must be finite and non-negative".into(),
        ));
    }
    if schedule.windows(2).any(|w| w[1].start <= w[0].start) {
        return Err(TraceError::InvalidArgument(
            "segments must start in increasing order".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (i, seg) in schedule.iter().enumerate() {
        let end = schedule
            .get(i + 1)
            .map_or(duration, |n| n.start)
            .min(duration);
        if seg.rate <= 0.0 || seg.start >= end {
            continue;
        }
        let gap = Exp::new(seg.rate).expect("positive rate");
        let mut t = seg.start;
        loop {
            t += gap.sample(&mut rng);
            if t >= end {
                break;
            }
            let (input_len, output_len) = lengths.sample(&mut rng);
            entries.push(TraceEntry {
                timestamp: t,
                input_len,
                output_len,
                model_id: None,
            });
        }
    }
    let source = format!("poisson(seed={seed})");
    // keep absolute times: the schedule defines where arrivals fall
    Ok(Trace {
        entries,
        source,
        rate_scale: 1.0,
    })
}

/// Assigns every request to one of `model_ids`, uniformly at random.
pub fn assign_models(trace: &Trace, model_ids: &[String], seed: u64) -> Result<Trace, TraceError> {
    if model_ids.is_empty() {
        return Err(TraceError::InvalidArgument("no models to assign".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = trace.clone();
    for e in &mut out.entries {
        e.model_id = Some(model_ids[rng.random_range(0..model_ids.len())].clone());
    }
    Ok(out)
}

/// Per-model SLO: `multiple` × the model's single-request latency under the
/// simplest configuration.
pub fn derive_slos(
    base_latency: &BTreeMap<String, f64>,
    model_ids: &[String],
    multiple: f64,
) -> Result<BTreeMap<String, f64>, TraceError> {
    // also rejects NaN
    if multiple.is_nan() || multiple <= 0.0 {
        return Err(TraceError::InvalidArgument(format!(
            "SLO multiple must be positive, got {multiple}"
        )));
    }
    model_ids
        .iter()
        .map(|m| {
            base_latency
                .get(m)
                .map(|b| (m.clone(), b * multiple))
                .ok_or_else(|| TraceError::MissingModel(m.clone()))
        })
        .collect()
}

/// Pearson correlation coefficient; `None` if either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let mean = |x: &[f64]| x[..n].iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Bundled Azure-shaped sample traces.
pub mod samples {
    use super::*;

    /// Steady, conversation-like: about 1.5 req/s with a gentle per-minute
    /// swell, long answers.
    pub fn conversation(seed: u64) -> Trace {
        let schedule: Vec<RateSegment> = (0..30)
            .map(|m| RateSegment {
                start: f64::from(m) * 60.0,
                rate: 1.5 * (1.0 + 0.15 * (f64::from(m) * 0.7).sin()),
            })
            .collect();
        let lengths = LengthDist::LogNormal {
            input_median: 700.0,
            output_median: 120.0,
            sigma: 0.6,
        };
        let mut t = synth_poisson_schedule(&schedule, 1800.0, lengths, seed)
            .expect("static schedule is valid");
        t.source = "sample:conversation".into();
        t
    }

    /// Per-minute multipliers of the bursty trace's base rate.
    pub const CODE_BURSTS: [f64; 30] = [
        1.0, 1.2, 0.8, 4.0, 3.5, 1.0, 0.6, 0.9, 1.1, 5.0, 1.3, 0.7, 0.8, 1.0, 3.0, 4.5, 1.2, 0.9,
        0.6, 1.0, 1.4, 6.0, 2.0, 0.8, 1.0, 0.7, 1.1, 3.8, 1.0, 0.9,
    ];

    /// Bursty, code-like: a 2 req/s base with minute-long spikes up to 6×,
    /// long prompts and short completions.
    pub fn code(seed: u64) -> Trace {
        let schedule: Vec<RateSegment> = CODE_BURSTS
            .iter()
            .enumerate()
            .map(|(m, k)| RateSegment {
                start: m as f64 * 60.0,
                rate: 2.0 * k,
            })
            .collect();
        let lengths = LengthDist::LogNormal {
            input_median: 900.0,
            output_median: 40.0,
            sigma: 0.5,
        };
        let mut t = synth_poisson_schedule(&schedule, 1800.0, lengths, seed)
            .expect("static schedule is valid");
        t.source = "sample:code".into();
        t
    }

    pub fn by_name(name: &str, seed: u64) -> Option<Trace> {
        match name {
            "conversation" => Some(conversation(seed)),
            "code" => Some(code(seed)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entries_at(times: &[f64]) -> Trace {
        Trace::new(
            times
                .iter()
                .map(|&t| TraceEntry {
                    timestamp: t,
                    input_len: 10,
                    output_len: 5,
                    model_id: None,
                })
                .collect(),
            "test",
        )
    }

    #[test]
    fn parse_valid_file() {
        let t = parse_trace_str(
            "timestamp_ms,input_tokens,output_tokens\n1000,10,5\n1500,20,6\n2500,2000,7\n",
            "x",
        )
        .unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.entries[0].timestamp, 0.0);
        assert!((t.entries[2].timestamp - 1.5).abs() < 1e-12);
        assert_eq!(t.entries[2].input_len, MAX_INPUT_LEN);
    }

    #[test]
    fn parse_errors() {
        let err = parse_trace_str(
            "timestamp_ms,input_tokens,output_tokens\n0,10,5\n5,-3,4\n",
            "x",
        )
        .unwrap_err();
        assert!(matches!(err, TraceError::Parse { line: 3, .. }), "{err:?}");
        assert_eq!(
            parse_trace_str("timestamp_ms,input_tokens,output_tokens\n", "x").unwrap_err(),
            TraceError::EmptyTrace
        );
        assert!(parse_trace_str("ts,input_tokens\n1,2\n", "x").is_err());
    }

    #[test]
    fn unsorted_rows_sort_stably() {
        let t = parse_trace_str(
            "timestamp_ms,input_tokens,output_tokens,model_id\n500,1,1,b\n100,2,2,a\n500,3,3,c\n",
            "x",
        )
        .unwrap();
        let ids: Vec<_> = t
            .entries
            .iter()
            .map(|e| e.model_id.clone().unwrap())
            .collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn csv_round_trip() {
        let t = assign_models(&samples::code(1), &["m".into()], 2).unwrap();
        let back = parse_trace_str(&t.to_csv(), "rt").unwrap();
        assert_eq!(back.len(), t.len());
        assert_eq!(back.entries[5].model_id.as_deref(), Some("m"));
        // parsing re-bases the first arrival to zero
        let offset = t.entries[0].timestamp;
        assert!((back.entries[5].timestamp - (t.entries[5].timestamp - offset)).abs() < 2e-6);
    }

    #[test]
    fn scaling_examples() {
        let mut times = Vec::new();
        for (i, n) in [10, 40, 10].into_iter().enumerate() {
            times.extend((0..n).map(|j| i as f64 * 60.0 + j as f64));
        }
        let t = entries_at(&times);
        assert_eq!(
            scale_trace(&t, 1.0, 60.0, 0).unwrap().interval_counts(60.0),
            vec![10, 40, 10]
        );
        let half = scale_trace(&t, 0.5, 60.0, 0).unwrap();
        assert_eq!(half.interval_counts(60.0), vec![5, 20, 5]);
        assert_eq!(half.rate_scale, 0.5);
        assert!(scale_trace(&t, 0.0, 60.0, 0).is_err());
    }

    #[test]
    fn identity_scale_keeps_lengths() {
        let t = samples::conversation(4);
        let s = scale_trace(&t, 1.0, 60.0, 9).unwrap();
        let lens = |t: &Trace| {
            t.entries
                .iter()
                .map(|e| (e.input_len, e.output_len))
                .collect::<Vec<_>>()
        };
        assert_eq!(lens(&s), lens(&t));
    }

    #[test]
    fn poisson_count_and_determinism() {
        let d = LengthDist::Fixed {
            input: 10,
            output: 10,
        };
        let t = synth_poisson(1.0, 1000.0, d, 42).unwrap();
        assert!((900..=1100).contains(&t.len()), "{}", t.len());
        assert_eq!(t, synth_poisson(1.0, 1000.0, d, 42).unwrap());
        let sched = [
            RateSegment {
                start: 0.0,
                rate: 0.2,
            },
            RateSegment {
                start: 300.0,
                rate: 2.0,
            },
        ];
        let t = synth_poisson_schedule(&sched, 600.0, d, 7).unwrap();
        let first = t.entries.iter().filter(|e| e.timestamp < 300.0).count();
        assert!(t.len() - first > 5 * first);
    }

    #[test]
    fn model_assignment() {
        let d = LengthDist::Fixed {
            input: 1,
            output: 1,
        };
        let t = synth_poisson(10.0, 1000.0, d, 1).unwrap();
        let t = t.entries[..10_000.min(t.len())].to_vec();
        let t = Trace::new(t, "x");
        let one = assign_models(&t, &["a".into()], 3).unwrap();
        assert!(one
            .entries
            .iter()
            .all(|e| e.model_id.as_deref() == Some("a")));
        let two = assign_models(&t, &["a".into(), "b".into()], 3).unwrap();
        let a = two
            .entries
            .iter()
            .filter(|e| e.model_id.as_deref() == Some("a"))
            .count();
        let half = t.len() / 2;
        assert!(a.abs_diff(half) <= 300, "{a} of {}", t.len());
        assert_eq!(
            two,
            assign_models(&t, &["a".into(), "b".into()], 3).unwrap()
        );
    }

    #[test]
    fn slo_derivation() {
        let base = BTreeMap::from([("m".to_string(), 2.0)]);
        assert_eq!(derive_slos(&base, &["m".into()], 5.0).unwrap()["m"], 10.0);
        assert_eq!(
            derive_slos(&base, &["x".into()], 5.0).unwrap_err(),
            TraceError::MissingModel("x".into())
        );
    }

    proptest! {
        #[test]
        fn scaled_counts_are_rounded_products(factor in 0.05f64..1.0, seed in 0u64..1000) {
            let t = samples::code(seed % 7);
            let orig = t.interval_counts(60.0);
            let scaled = scale_trace(&t, factor, 60.0, seed).unwrap();
            let mut got = scaled.interval_counts(60.0);
            got.resize(orig.len(), 0);
            for (o, s) in orig.iter().zip(&got) {
                prop_assert_eq!(*s, (*o as f64 * factor).round() as usize);
            }
            prop_assert!(scaled.entries.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        }
    }
}
