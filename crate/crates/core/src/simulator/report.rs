//! Aggregate metrics and the CSV/JSON artifacts of a run.

use serde::{Deserialize, Serialize};

use crate::deployment::DeploymentRecord;
use crate::SCHEMA_VERSION;

use super::ClusterState;

/// How `gpu_throughput` is computed, stamped into every report.
pub const THROUGHPUT_DEFINITION: &str =
    "completed requests / (distinct GPUs that hosted a model x makespan seconds)";

/// One request's fate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLog {
    pub id: usize,
    pub arrival: f64,
    /// `None` for dropped requests.
    pub start: Option<f64>,
    pub finish: Option<f64>,
    pub model: String,
    pub instance: Option<String>,
    pub config: Option<String>,
    pub slo: f64,
    pub slo_met: bool,
    pub dropped: Option<String>,
    /// Σ GB held on the serving GPUs.
    pub mem_gb: f64,
}

impl RequestLog {
    pub fn latency(&self) -> Option<f64> {
        self.finish.map(|f| f - self.arrival)
    }

    pub fn service_time(&self) -> Option<f64> {
        Some(self.finish? - self.start?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub time: f64,
    pub model: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileJobReport {
    pub model: String,
    pub mem_method: String,
    pub lat_method: String,
    pub start: f64,
    pub end: f64,
    pub sessions: usize,
    /// Largest footprint of a single profiling session (GB).
    pub peak_memory_gb: f64,
    /// The full model's unparallelised FP16 footprint, for comparison.
    pub full_model_memory_gb: f64,
    pub gpu_hours: f64,
}

/// Run-level facts the request log alone does not carry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub makespan: f64,
    pub busy_seconds: f64,
    pub peak_allocated_gb: f64,
    pub max_concurrent_hosting_gpus: usize,
    pub distinct_hosting_gpus: usize,
    pub max_allocation_excess_gb: f64,
    pub deployments: Vec<DeploymentRecord>,
    pub failures: Vec<FailureRecord>,
    pub profile_jobs: Vec<ProfileJobReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub gpu_throughput_definition: String,
    pub requests_total: usize,
    pub requests_completed: usize,
    pub requests_dropped: usize,
    pub slo_attainment: f64,
    pub latency_p50: Option<f64>,
    pub latency_p95: Option<f64>,
    pub latency_p99: Option<f64>,
    pub gpu_throughput: f64,
    pub gpus_used: usize,
    pub distinct_gpus_used: usize,
    pub total_memory: f64,
    pub cost: f64,
    pub gpu_hours: f64,
    pub makespan: f64,
    pub max_allocation_excess_gb: f64,
    pub deployments: Vec<DeploymentRecord>,
    pub failures: Vec<FailureRecord>,
    pub profile_jobs: Vec<ProfileJobReport>,
    #[serde(skip)]
    pub requests: Vec<RequestLog>,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn compute_report(requests: Vec<RequestLog>, stats: RunStats) -> MetricsReport {
    let completed: Vec<&RequestLog> = requests.iter().filter(|r| r.finish.is_some()).collect();
    let mut latencies: Vec<f64> = completed.iter().filter_map(|r| r.latency()).collect();
    latencies.sort_by(f64::total_cmp);
    let met = requests.iter().filter(|r| r.slo_met).count();
    let attainment = if requests.is_empty() {
        1.0
    } else {
        met as f64 / requests.len() as f64
    };
    let cost = completed
        .iter()
        .map(|r| r.mem_gb * r.service_time().unwrap_or(0.0))
        .sum();
    let denom = stats.distinct_hosting_gpus as f64 * stats.makespan;
    MetricsReport {
        schema_version: SCHEMA_VERSION,
        gpu_throughput_definition: THROUGHPUT_DEFINITION.into(),
        requests_total: requests.len(),
        requests_completed: completed.len(),
        requests_dropped: requests.len() - completed.len(),
        slo_attainment: attainment,
        latency_p50: percentile(&latencies, 50.0),
        latency_p95: percentile(&latencies, 95.0),
        latency_p99: percentile(&latencies, 99.0),
        gpu_throughput: if denom > 0.0 {
            completed.len() as f64 / denom
        } else {
            0.0
        },
        gpus_used: stats.max_concurrent_hosting_gpus,
        distinct_gpus_used: stats.distinct_hosting_gpus,
        total_memory: stats.peak_allocated_gb,
        cost,
        gpu_hours: stats.busy_seconds / 3600.0,
        makespan: stats.makespan,
        max_allocation_excess_gb: stats.max_allocation_excess_gb,
        deployments: stats.deployments,
        failures: stats.failures,
        profile_jobs: stats.profile_jobs,
        requests,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    /// Per-request log: `arrival_s,start_s,finish_s,model,config,slo_met`,
    /// preceded by a schema comment line. Dropped requests have empty
    /// start/finish/config fields.
    pub fn requests_csv(&self) -> String {
        let mut out = format!(
            "# schema_version={SCHEMA_VERSION}\narrival_s,start_s,finish_s,model,config,slo_met\n"
        );
        for r in &self.requests {
            out.push_str(&format!(
                "{:.6},{},{},{},{},{}\n",
                r.arrival,
                opt(r.start),
                opt(r.finish),
                r.model,
                r.config.as_deref().unwrap_or(""),
                r.slo_met
            ));
        }
        out
    }

    /// Per-minute attainment (by arrival minute) and the load of every GPU at
    /// the end of that minute.
    pub fn plot_csv(&self, cluster: &ClusterState) -> String {
        let minutes = (self.makespan / 60.0).ceil().max(1.0) as usize;
        let mut header =
            format!("# schema_version={SCHEMA_VERSION}\nminute,requests,slo_attainment");
        for g in &cluster.gpus {
            header.push_str(&format!(",load_gpu{}", g.id));
        }
        let mut out = header + "\n";
        let mut per_minute = vec![(0usize, 0usize); minutes];
        for r in &self.requests {
            let m = ((r.arrival / 60.0).floor() as usize).min(minutes - 1);
            per_minute[m].0 += 1;
            per_minute[m].1 += usize::from(r.slo_met);
        }
        for (m, (n, met)) in per_minute.into_iter().enumerate() {
            let att = if n == 0 { 1.0 } else { met as f64 / n as f64 };
            out.push_str(&format!("{m},{n},{att:.6}"));
            let t = (m + 1) as f64 * 60.0;
            for g in &cluster.gpus {
                let load = cluster.gpu_load(g.id, t).unwrap_or(0.0);
                out.push_str(&format!(",{load:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn served(arrival: f64, finish: f64, slo_met: bool) -> RequestLog {
        RequestLog {
            id: 0,
            arrival,
            start: Some(arrival),
            finish: Some(finish),
            model: "m".into(),
            instance: Some("m#1".into()),
            config: Some("tp1-pp1-wFP16-kvFP16-None".into()),
            slo: 10.0,
            slo_met,
            dropped: None,
            mem_gb: 2.0,
        }
    }

    #[test]
    fn attainment_and_percentiles() {
        let logs = vec![
            served(0.0, 1.0, true),
            served(0.0, 2.0, true),
            served(0.0, 3.0, true),
            served(0.0, 20.0, false),
        ];
        let r = compute_report(logs, RunStats::default());
        assert_eq!(r.slo_attainment, 0.75);
        assert_eq!(r.latency_p50, Some(2.0));
        assert_eq!(r.latency_p95, Some(20.0));
        assert!(r.latency_p50 <= r.latency_p95 && r.latency_p95 <= r.latency_p99);
        // cost: Σ mem × service
        assert!((r.cost - 2.0 * 26.0).abs() < 1e-12);
    }

    #[test]
    fn empty_log_is_vacuously_met() {
        let r = compute_report(Vec::new(), RunStats::default());
        assert_eq!(r.slo_attainment, 1.0);
        assert_eq!(r.latency_p50, None);
        assert_eq!(r.gpu_throughput, 0.0);
    }

    #[test]
    fn csv_has_schema_line_and_header() {
        let r = compute_report(vec![served(1.0, 2.5, true)], RunStats::default());
        let csv = r.requests_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("# schema_version=1"));
        assert_eq!(
            lines.next(),
            Some("arrival_s,start_s,finish_s,model,config,slo_met")
        );
        assert_eq!(
            lines.next(),
            Some("1.000000,1.000000,2.500000,m,tp1-pp1-wFP16-kvFP16-None,true")
        );
    }
}
