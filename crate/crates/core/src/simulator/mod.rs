//! Deterministic discrete-event replay of deployments and request traces.
//!
//! Every deployed model instance serves one request at a time, and each GPU
//! runs one piece of work at a time. Work waiting for a GPU is started
//! strictly in arrival order: a blocked item reserves its GPUs so that later
//! arrivals cannot overtake it. Service times come from the cost oracle under
//! the deployed configuration, while planning uses the profiled estimates.

mod cluster;
mod report;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{DeployConfig, ModelArchitecture};
use crate::deployment::{
    self, DeployError, DeploymentRecord, Intent, PlacementPolicy, DEFAULT_BUFFER,
};
use crate::oracle::{self, NoiseSpec};
use crate::profiler::{
    self, ConfigMap, LatMethod, MemMethod, ProfileOptions, ProfileSession, ProfilingCost,
};
use crate::trace::Trace;

pub use cluster::{ClusterState, Gpu, DEFAULT_WINDOW_S};
pub use report::{
    compute_report, percentile, FailureRecord, MetricsReport, ProfileJobReport, RequestLog,
    RunStats, THROUGHPUT_DEFINITION,
};

/// Default pause applied to a model's queue while it loads.
pub const DEFAULT_LOAD_PAUSE_S: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("no GPU with id {0}")]
    UnknownGpu(usize),
    #[error("GPU {gpu} cannot take {requested:.3} GB ({free:.3} GB free)")]
    OutOfMemory {
        gpu: usize,
        requested: f64,
        free: f64,
    },
    #[error("invalid scenario at {event}: {reason}")]
    ScenarioInvalid { event: String, reason: String },
    #[error("no {gpus} GPUs have {needed_gb:.2} GB free for profiling `{model}` under {cfg}")]
    InsufficientMemoryForFingerprint {
        model: String,
        cfg: DeployConfig,
        gpus: u32,
        needed_gb: f64,
    },
}

fn invalid(event: impl Into<String>, reason: impl Into<String>) -> SimError {
    SimError::ScenarioInvalid {
        event: event.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploySpec {
    #[serde(rename = "time_s", alias = "time")]
    pub time: f64,
    pub model: String,
    pub intent: Intent,
    #[serde(default)]
    pub policy: PlacementPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalSpec {
    #[serde(rename = "time_s", alias = "time")]
    pub time: f64,
    pub model: String,
}

/// Profiling a model on the serving fleet itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileJobSpec {
    #[serde(rename = "time_s", alias = "time")]
    pub time: f64,
    pub model: String,
    pub mem_method: MemMethod,
    pub lat_method: LatMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub buffer: f64,
    pub load_pause_s: f64,
    /// Per-instance waiting-queue cap; `None` is unbounded.
    pub queue_cap: Option<usize>,
    pub seed: u64,
    /// Noise on service times; the default serves at oracle truth.
    pub service_noise: NoiseSpec,
    /// Observation noise for on-fleet profiling jobs.
    pub profile_noise: NoiseSpec,
    pub profile_options: ProfileOptions,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            buffer: DEFAULT_BUFFER,
            load_pause_s: DEFAULT_LOAD_PAUSE_S,
            queue_cap: None,
            seed: 0,
            service_noise: NoiseSpec::None,
            profile_noise: NoiseSpec::None,
            profile_options: ProfileOptions::default(),
        }
    }
}

/// Everything a run needs.
#[derive(Debug, Clone)]
pub struct SimInput {
    pub cluster: ClusterState,
    pub models: BTreeMap<String, ModelArchitecture>,
    /// Maps available before the run starts.
    pub maps: BTreeMap<String, ConfigMap>,
    pub deployments: Vec<DeploySpec>,
    pub removals: Vec<RemovalSpec>,
    pub profile_jobs: Vec<ProfileJobSpec>,
    pub trace: Trace,
    /// Per-model end-to-end latency SLO, seconds.
    pub slos: BTreeMap<String, f64>,
    pub options: SimOptions,
}

impl SimInput {
    /// Schedules profiling of `model` on the fleet at `start_time`.
    pub fn inject_profile_job(
        &mut self,
        model: &str,
        mem_method: MemMethod,
        lat_method: LatMethod,
        start_time: f64,
    ) -> Result<(), SimError> {
        if !self.models.contains_key(model) {
            return Err(invalid(
                format!("profile job at {start_time}s"),
                format!("unknown model `{model}`"),
            ));
        }
        self.profile_jobs.push(ProfileJobSpec {
            time: start_time,
            model: model.to_string(),
            mem_method,
            lat_method,
        });
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let time_ok = |t: f64| t.is_finite() && t >= 0.0;
        if !(0.0..=0.5).contains(&self.options.buffer) {
            return Err(invalid(
                "options",
                format!("buffer {} outside [0, 0.5]", self.options.buffer),
            ));
        }
        if !time_ok(self.options.load_pause_s) {
            return Err(invalid("options", "load pause must be non-negative"));
        }
        for j in &self.profile_jobs {
            let ev = format!("profile job `{}` at {}s", j.model, j.time);
            if !time_ok(j.time) {
                return Err(invalid(ev, "time must be non-negative"));
            }
            if !self.models.contains_key(&j.model) {
                return Err(invalid(ev, "unknown model"));
            }
        }
        for d in &self.deployments {
            let ev = format!("deploy `{}` at {}s", d.model, d.time);
            if !time_ok(d.time) {
                return Err(invalid(ev, "time must be non-negative"));
            }
            if !self.models.contains_key(&d.model) {
                return Err(invalid(ev, "unknown model"));
            }
            let profiled_in_time = self
                .profile_jobs
                .iter()
                .any(|j| j.model == d.model && j.time <= d.time);
            if !self.maps.contains_key(&d.model) && !profiled_in_time {
                return Err(invalid(
                    ev,
                    "model has no config map and no earlier profile job",
                ));
            }
            if !self.slos.contains_key(&d.model) {
                return Err(invalid(ev, "model has no SLO"));
            }
            d.intent
                .validate()
                .map_err(|e| invalid(format!("deploy `{}`", d.model), e.to_string()))?;
            d.policy
                .validate()
                .map_err(|e| invalid(format!("deploy `{}`", d.model), e.to_string()))?;
        }
        for r in &self.removals {
            let ev = format!("remove `{}` at {}s", r.model, r.time);
            if !time_ok(r.time) {
                return Err(invalid(ev, "time must be non-negative"));
            }
            if !self.models.contains_key(&r.model) {
                return Err(invalid(ev, "unknown model"));
            }
        }
        for (i, e) in self.trace.entries.iter().enumerate() {
            let ev = format!("request {i} at {}s", e.timestamp);
            if !time_ok(e.timestamp) {
                return Err(invalid(ev, "arrival must be non-negative"));
            }
            if e.output_len == 0 {
                return Err(invalid(ev, "output length must be at least 1"));
            }
            if let Some(m) = &e.model_id {
                if !self.models.contains_key(m) {
                    return Err(invalid(ev, format!("unknown model `{m}`")));
                }
            }
        }
        Ok(())
    }
}

/// Result of a run: the report and the final cluster (for load plots).
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: MetricsReport,
    pub cluster: ClusterState,
    pub maps: BTreeMap<String, ConfigMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Deploy(usize),
    Remove(usize),
    ProfileStart(usize),
    Arrival(usize),
    RequestDone(usize),
    SessionDone(usize),
    Wake,
}

#[derive(Debug)]
struct Scheduled {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap, we want the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

struct Instance {
    name: String,
    model: String,
    record: DeploymentRecord,
    mem_total: f64,
    queue: VecDeque<usize>,
    in_flight: Option<usize>,
    paused_until: f64,
    retiring: bool,
    released: bool,
}

impl Instance {
    fn active(&self) -> bool {
        !self.retiring && !self.released
    }
}

struct ProfileRun {
    spec: ProfileJobSpec,
    map: ConfigMap,
    sessions: Vec<ProfileSession>,
    next: usize,
    /// GPUs and per-GPU GB held by the current session.
    holding: Option<(Vec<usize>, f64)>,
    waiting_since: Option<f64>,
    start: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Work {
    Request(usize),
    Session(usize),
}

struct Engine<'a> {
    input: &'a SimInput,
    cluster: ClusterState,
    maps: BTreeMap<String, ConfigMap>,
    events: BinaryHeap<Scheduled>,
    seq: u64,
    now: f64,
    gpu_free_at: Vec<f64>,
    instances: Vec<Instance>,
    instance_counter: BTreeMap<String, usize>,
    runs: Vec<ProfileRun>,
    waiting_deploys: BTreeMap<String, Vec<usize>>,
    logs: Vec<RequestLog>,
    rng: ChaCha8Rng,
    stats: RunStats,
    ever_hosting: Vec<bool>,
}

impl<'a> Engine<'a> {
    fn new(input: &'a SimInput) -> Self {
        let n = input.cluster.len();
        Engine {
            input,
            cluster: input.cluster.clone(),
            maps: input.maps.clone(),
            events: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            gpu_free_at: vec![0.0; n],
            instances: Vec::new(),
            instance_counter: BTreeMap::new(),
            runs: Vec::new(),
            waiting_deploys: BTreeMap::new(),
            logs: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(input.options.seed),
            stats: RunStats::default(),
            ever_hosting: vec![false; n],
        }
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Scheduled {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn fail(&mut self, model: &str, kind: &str, message: String) {
        log::warn!("t={:.3}s {model}: {message}", self.now);
        self.stats.failures.push(FailureRecord {
            time: self.now,
            model: model.to_string(),
            kind: kind.to_string(),
            message,
        });
    }

    fn note_memory(&mut self) {
        let buffer = self.input.options.buffer;
        for g in &self.cluster.gpus {
            let excess = g.allocated - g.capacity * (1.0 - buffer);
            if excess > self.stats.max_allocation_excess_gb {
                self.stats.max_allocation_excess_gb = excess;
            }
        }
        self.stats.peak_allocated_gb = self
            .stats
            .peak_allocated_gb
            .max(self.cluster.total_allocated());
        let mut hosting = vec![false; self.cluster.len()];
        for inst in self.instances.iter().filter(|i| !i.released) {
            for &g in &inst.record.gpu_ids {
                hosting[g] = true;
                self.ever_hosting[g] = true;
            }
        }
        let now_hosting = hosting.iter().filter(|h| **h).count();
        self.stats.max_concurrent_hosting_gpus =
            self.stats.max_concurrent_hosting_gpus.max(now_hosting);
    }

    fn run(mut self) -> SimOutcome {
        let input = self.input;
        // deploys and removals precede arrivals at the same instant
        for (i, j) in input.profile_jobs.iter().enumerate() {
            self.push(j.time, EventKind::ProfileStart(i));
        }
        for (i, d) in input.deployments.iter().enumerate() {
            self.push(d.time, EventKind::Deploy(i));
        }
        for (i, r) in input.removals.iter().enumerate() {
            self.push(r.time, EventKind::Remove(i));
        }
        for (i, e) in input.trace.entries.iter().enumerate() {
            self.logs.push(RequestLog {
                id: i,
                arrival: e.timestamp,
                start: None,
                finish: None,
                model: e.model_id.clone().unwrap_or_default(),
                instance: None,
                config: None,
                slo: e
                    .model_id
                    .as_ref()
                    .and_then(|m| input.slos.get(m))
                    .copied()
                    .unwrap_or(f64::INFINITY),
                slo_met: false,
                dropped: None,
                mem_gb: 0.0,
            });
            self.push(e.timestamp, EventKind::Arrival(i));
        }

        while let Some(ev) = self.events.pop() {
            self.now = ev.time;
            self.cluster.now = ev.time;
            match ev.kind {
                EventKind::Deploy(i) => self.on_deploy(i),
                EventKind::Remove(i) => self.on_remove(i),
                EventKind::ProfileStart(i) => self.on_profile_start(i),
                EventKind::Arrival(i) => self.on_arrival(i),
                EventKind::RequestDone(i) => self.on_request_done(i),
                EventKind::SessionDone(i) => self.on_session_done(i),
                EventKind::Wake => {}
            }
            self.dispatch();
        }
        for (model, pending) in std::mem::take(&mut self.waiting_deploys) {
            for _ in pending {
                self.fail(&model, "deploy", "config map never became available".into());
            }
        }

        self.stats.makespan = self.now;
        self.stats.busy_seconds = self.cluster.busy_seconds();
        self.stats.distinct_hosting_gpus = self.ever_hosting.iter().filter(|h| **h).count();
        self.stats.deployments = self.instances.iter().map(|i| i.record.clone()).collect();
        let report = compute_report(
            std::mem::take(&mut self.logs),
            std::mem::take(&mut self.stats),
        );
        SimOutcome {
            report,
            cluster: self.cluster,
            maps: self.maps,
        }
    }

    fn on_deploy(&mut self, i: usize) {
        let spec = &self.input.deployments[i];
        let Some(map) = self.maps.get(&spec.model) else {
            log::info!(
                "t={:.3}s deploy of {} waits for its config map",
                self.now,
                spec.model
            );
            self.waiting_deploys
                .entry(spec.model.clone())
                .or_default()
                .push(i);
            return;
        };
        let result = deployment::deploy(
            map,
            &spec.intent,
            &spec.policy,
            &self.cluster,
            self.input.options.buffer,
            self.now,
        );
        let record = match result {
            Ok(r) => r,
            Err(e) => {
                let kind = if matches!(e, DeployError::NoFeasibleConfig { .. }) {
                    "oom"
                } else {
                    "deploy"
                };
                let model = spec.model.clone();
                self.fail(&model, kind, e.to_string());
                return;
            }
        };
        if let Err(e) = deployment::commit(&mut self.cluster, &record) {
            let model = spec.model.clone();
            self.fail(&model, "deploy", e.to_string());
            return;
        }
        let n = self.instance_counter.entry(spec.model.clone()).or_insert(0);
        *n += 1;
        let name = format!("{}#{}", spec.model, n);
        log::info!(
            "t={:.3}s deployed {name} as {} on {:?}",
            self.now,
            record.cfg,
            record.gpu_ids
        );
        let paused_until = self.now + self.input.options.load_pause_s;
        self.instances.push(Instance {
            name,
            model: spec.model.clone(),
            mem_total: record.mem_per_gpu.iter().sum(),
            record,
            queue: VecDeque::new(),
            in_flight: None,
            paused_until,
            retiring: false,
            released: false,
        });
        self.note_memory();
        self.push(paused_until, EventKind::Wake);
    }

    fn on_remove(&mut self, i: usize) {
        let model = &self.input.removals[i].model;
        let Some(idx) = self
            .instances
            .iter()
            .position(|inst| inst.active() && &inst.model == model)
        else {
            let model = model.clone();
            self.fail(&model, "remove", "no active instance to remove".into());
            return;
        };
        self.instances[idx].retiring = true;
        self.maybe_release(idx);
    }

    fn maybe_release(&mut self, idx: usize) {
        let inst = &self.instances[idx];
        if !inst.retiring || inst.released || inst.in_flight.is_some() || !inst.queue.is_empty() {
            return;
        }
        let record = inst.record.clone();
        deployment::release(&mut self.cluster, &record).expect("instance GPUs exist");
        self.instances[idx].released = true;
        log::info!("t={:.3}s released {}", self.now, self.instances[idx].name);
        self.note_memory();
    }

    fn route(&mut self, model: Option<&str>) -> Option<usize> {
        let model = match model {
            Some(m) => m.to_string(),
            None => {
                let mut models: Vec<&str> = self
                    .instances
                    .iter()
                    .filter(|i| i.active())
                    .map(|i| i.model.as_str())
                    .collect();
                models.dedup();
                models.sort_unstable();
                models.dedup();
                if models.is_empty() {
                    return None;
                }
                models[self.rng.random_range(0..models.len())].to_string()
            }
        };
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.active() && i.model == model)
            .min_by_key(|(idx, i)| (i.queue.len() + usize::from(i.in_flight.is_some()), *idx))
            .map(|(idx, _)| idx)
    }

    fn on_arrival(&mut self, i: usize) {
        let model = self.input.trace.entries[i].model_id.clone();
        let Some(idx) = self.route(model.as_deref()) else {
            self.logs[i].dropped = Some("no_model_deployed".into());
            return;
        };
        let inst = &self.instances[idx];
        if model.is_none() {
            self.logs[i].model = inst.model.clone();
            self.logs[i].slo = self
                .input
                .slos
                .get(&inst.model)
                .copied()
                .unwrap_or(f64::INFINITY);
        }
        if let Some(cap) = self.input.options.queue_cap {
            if inst.queue.len() >= cap {
                self.logs[i].dropped = Some("queue_full".into());
                return;
            }
        }
        self.instances[idx].queue.push_back(i);
    }

    fn on_request_done(&mut self, idx: usize) {
        let inst = &mut self.instances[idx];
        let req = inst
            .in_flight
            .take()
            .expect("completion for an in-flight request");
        let log = &mut self.logs[req];
        log.slo_met = log.latency().is_some_and(|l| l <= log.slo + 1e-9);
        self.maybe_release(idx);
    }

    fn gpu_idle(&self, gpus: &[usize], reserved: &[bool]) -> bool {
        gpus.iter()
            .all(|&g| !reserved[g] && self.gpu_free_at[g] <= self.now + 1e-12)
    }

    /// Starts every piece of waiting work whose GPUs are free, in FCFS order.
    fn dispatch(&mut self) {
        let mut ready: Vec<(f64, usize, Work)> = Vec::new();
        for (idx, inst) in self.instances.iter().enumerate() {
            if inst.released || inst.in_flight.is_some() || inst.paused_until > self.now + 1e-12 {
                continue;
            }
            if let Some(&head) = inst.queue.front() {
                ready.push((self.logs[head].arrival, head, Work::Request(idx)));
            }
        }
        for (j, run) in self.runs.iter().enumerate() {
            if let Some(since) = run.waiting_since {
                ready.push((since, usize::MAX, Work::Session(j)));
            }
        }
        ready.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut reserved = vec![false; self.cluster.len()];
        for (_, _, work) in ready {
            let gpus = match work {
                Work::Request(idx) => self.instances[idx].record.gpu_ids.clone(),
                Work::Session(j) => self.runs[j]
                    .holding
                    .as_ref()
                    .expect("waiting session holds GPUs")
                    .0
                    .clone(),
            };
            if !self.gpu_idle(&gpus, &reserved) {
                for g in gpus {
                    reserved[g] = true;
                }
                continue;
            }
            match work {
                Work::Request(idx) => self.start_request(idx),
                Work::Session(j) => self.start_session(j),
            }
        }
    }

    fn occupy(&mut self, gpus: &[usize], duration: f64) -> f64 {
        let end = self.now + duration;
        for &g in gpus {
            self.cluster
                .mark_busy(g, self.now, end)
                .expect("GPU exists");
            self.gpu_free_at[g] = end;
        }
        end
    }

    fn start_request(&mut self, idx: usize) {
        let req = self.instances[idx]
            .queue
            .pop_front()
            .expect("ready instance has a head");
        let entry = &self.input.trace.entries[req];
        let inst = &self.instances[idx];
        let arch = &self.input.models[&inst.model];
        let seed = self.input.options.seed ^ (req as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let service = oracle::observe_latency(
            arch,
            &inst.record.cfg,
            entry.output_len,
            &self.input.options.service_noise,
            seed,
        )
        .expect("deployed configs are valid")
        .max(0.0);
        let gpus = inst.record.gpu_ids.clone();
        let (name, cfg, mem) = (
            inst.name.clone(),
            inst.record.cfg.to_string(),
            inst.mem_total,
        );
        let end = self.occupy(&gpus, service);
        let log = &mut self.logs[req];
        log.start = Some(self.now);
        log.finish = Some(end);
        log.instance = Some(name);
        log.config = Some(cfg);
        log.mem_gb = mem;
        self.instances[idx].in_flight = Some(req);
        self.push(end, EventKind::RequestDone(idx));
    }

    fn on_profile_start(&mut self, i: usize) {
        let spec = self.input.profile_jobs[i].clone();
        let arch = &self.input.models[&spec.model];
        let seed = self.input.options.seed.wrapping_add(i as u64 + 1);
        let outcome = profiler::profile_model(
            arch,
            spec.mem_method,
            spec.lat_method,
            self.input.options.profile_noise,
            seed,
            &self.input.options.profile_options,
        );
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                self.fail(&spec.model, "profiling", e.to_string());
                self.abandon_waiting(&spec.model);
                return;
            }
        };
        log::info!(
            "t={:.3}s profiling {} on the fleet: {} sessions",
            self.now,
            spec.model,
            outcome.sessions.len()
        );
        self.runs.push(ProfileRun {
            spec,
            map: outcome.map,
            sessions: outcome.sessions,
            next: 0,
            holding: None,
            waiting_since: None,
            start: self.now,
        });
        let j = self.runs.len() - 1;
        self.next_session(j);
    }

    fn abandon_waiting(&mut self, model: &str) {
        for _ in self.waiting_deploys.remove(model).unwrap_or_default() {
            self.fail(model, "deploy", "config map unavailable".into());
        }
    }

    /// Reserves memory for the run's next session on the least-loaded GPUs,
    /// or completes the run.
    fn next_session(&mut self, j: usize) {
        let run = &self.runs[j];
        let Some(session) = run.sessions.get(run.next) else {
            self.finish_run(j);
            return;
        };
        let k = session.gpus as usize;
        let need = session.per_gpu_gb;
        let buffer = self.input.options.buffer;
        let loads = self.cluster.loads();
        let mut ids: Vec<usize> = (0..self.cluster.len())
            .filter(|&g| self.cluster.gpus[g].usable_free(buffer) >= need)
            .collect();
        ids.sort_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(a.cmp(&b)));
        if ids.len() < k {
            let err = SimError::InsufficientMemoryForFingerprint {
                model: run.spec.model.clone(),
                cfg: session.cfg,
                gpus: session.gpus,
                needed_gb: need,
            };
            let model = run.spec.model.clone();
            self.fail(&model, "profiling", err.to_string());
            self.runs[j].waiting_since = None;
            self.abandon_waiting(&model);
            return;
        }
        ids.truncate(k);
        for &g in &ids {
            self.cluster.allocate(g, need).expect("checked free memory");
        }
        self.note_memory();
        let run = &mut self.runs[j];
        run.holding = Some((ids, need));
        run.waiting_since = Some(self.now);
    }

    fn start_session(&mut self, j: usize) {
        let run = &mut self.runs[j];
        run.waiting_since = None;
        let duration = run.sessions[run.next].duration();
        let gpus = run.holding.as_ref().expect("session holds GPUs").0.clone();
        let end = self.occupy(&gpus, duration);
        self.push(end, EventKind::SessionDone(j));
    }

    fn on_session_done(&mut self, j: usize) {
        if let Some((gpus, gb)) = self.runs[j].holding.take() {
            for g in gpus {
                self.cluster.release(g, gb).expect("GPU exists");
            }
        }
        self.runs[j].next += 1;
        self.next_session(j);
    }

    fn finish_run(&mut self, j: usize) {
        let run = &self.runs[j];
        let model = run.spec.model.clone();
        let arch = &self.input.models[&model];
        let full = oracle::true_memory(arch, &DeployConfig::baseline())
            .map(|m| m.total)
            .unwrap_or(f64::NAN);
        let cost = ProfilingCost::from_sessions(&run.sessions);
        self.stats.profile_jobs.push(ProfileJobReport {
            model: model.clone(),
            mem_method: run.spec.mem_method.to_string(),
            lat_method: run.spec.lat_method.to_string(),
            start: run.start,
            end: self.now,
            sessions: run.sessions.len(),
            peak_memory_gb: cost.peak_gpu_mem,
            full_model_memory_gb: full,
            gpu_hours: cost.gpu_hours,
        });
        log::info!("t={:.3}s config map for {model} is ready", self.now);
        self.maps.insert(model.clone(), run.map.clone());
        for i in self.waiting_deploys.remove(&model).unwrap_or_default() {
            self.on_deploy(i);
        }
    }
}

/// Runs the scenario to completion: until the trace is exhausted and every
/// queue has drained.
pub fn run(input: &SimInput) -> Result<SimOutcome, SimError> {
    input.validate()?;
    Ok(Engine::new(input).run())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Compression, QuantKind};
    use crate::deployment::IntentKind;
    use crate::oracle::OracleParams;
    use crate::profiler::build_config_map;
    use crate::trace::TraceEntry;

    /// ttft 2 s and tpot 0.1 s at (1,1), tiny memory.
    fn toy_model() -> ModelArchitecture {
        let p = OracleParams {
            w_layer: 0.5,
            w_other: 0.5,
            a_act: 0.1,
            a_pp: 0.01,
            ttft_layer_base: 0.5,
            ttft_other: 0.5,
            tpot_layer_base: 0.025,
            tpot_other: 0.025,
            tp_speedup_exponent: 1.0,
            tp_sync_cost: 0.0,
            quant_lat_factor: Default::default(),
            prune_mem_factor: Default::default(),
            prune_lat_factor: Default::default(),
            kv_mem_factor: Default::default(),
            pp_lat_overhead_frac: 0.0,
        };
        ModelArchitecture {
            model_id: "toy".into(),
            family: "toy".into(),
            num_layers: 3,
            supported_weight_quants: [QuantKind::Fp16].into(),
            supported_kv_quants: [QuantKind::Fp16].into(),
            supported_prunes: [crate::PruneKind::None].into(),
            oracle_params: p,
        }
    }

    fn single_model_input(arrivals: &[f64], output_len: u32) -> SimInput {
        let m = toy_model();
        let map = build_config_map(&m, MemMethod::M1, LatMethod::L1, NoiseSpec::None, 0).unwrap();
        let trace = Trace::new(
            arrivals
                .iter()
                .map(|&t| TraceEntry {
                    timestamp: t,
                    input_len: 8,
                    output_len,
                    model_id: Some("toy".into()),
                })
                .collect(),
            "test",
        );
        SimInput {
            cluster: ClusterState::new(1, 48.0),
            models: BTreeMap::from([("toy".into(), m)]),
            maps: BTreeMap::from([("toy".into(), map)]),
            deployments: vec![DeploySpec {
                time: 0.0,
                model: "toy".into(),
                intent: Intent::new(IntentKind::MinLatency),
                policy: PlacementPolicy::default(),
            }],
            removals: Vec::new(),
            profile_jobs: Vec::new(),
            trace,
            slos: BTreeMap::from([("toy".into(), 15.0)]),
            options: SimOptions {
                load_pause_s: 0.0,
                ..SimOptions::default()
            },
        }
    }

    #[test]
    fn fcfs_queueing_example() {
        let input = single_model_input(&[0.0, 0.0], 10);
        let out = run(&input).unwrap();
        let r = &out.report.requests;
        assert_eq!(r[0].finish, Some(3.0));
        assert_eq!(r[1].start, Some(3.0));
        assert_eq!(r[1].finish, Some(6.0));
        assert_eq!(out.report.slo_attainment, 1.0);
        assert_eq!(
            out.report.deployments[0].cfg.compression(),
            Compression::IDENTITY
        );
        assert!((out.report.gpu_hours - 6.0 / 3600.0).abs() < 1e-12);
    }

    #[test]
    fn load_pause_delays_service() {
        let mut input = single_model_input(&[0.0], 10);
        input.options.load_pause_s = 60.0;
        let out = run(&input).unwrap();
        assert_eq!(out.report.requests[0].start, Some(60.0));
        assert_eq!(out.report.requests[0].finish, Some(63.0));
    }

    #[test]
    fn drops_without_deployment() {
        let mut input = single_model_input(&[0.0, 1.0], 10);
        input.deployments[0].time = 0.5;
        let out = run(&input).unwrap();
        assert_eq!(
            out.report.requests[0].dropped.as_deref(),
            Some("no_model_deployed")
        );
        assert_eq!(out.report.requests_completed, 1);
        assert_eq!(out.report.slo_attainment, 0.5);
    }

    #[test]
    fn queue_cap_drops_overflow() {
        let mut input = single_model_input(&[0.0, 0.0, 0.0, 0.0], 10);
        input.options.queue_cap = Some(1);
        let out = run(&input).unwrap();
        let dropped = out
            .report
            .requests
            .iter()
            .filter(|r| r.dropped.is_some())
            .count();
        assert_eq!(dropped, 2);
    }

    #[test]
    fn removal_drains_then_frees() {
        let mut input = single_model_input(&[0.0, 0.0, 10.0], 10);
        input.removals.push(RemovalSpec {
            time: 1.0,
            model: "toy".into(),
        });
        let out = run(&input).unwrap();
        let r = &out.report.requests;
        assert_eq!(r[1].finish, Some(6.0));
        assert_eq!(r[2].dropped.as_deref(), Some("no_model_deployed"));
        assert!(out.cluster.gpus[0].allocated.abs() < 1e-12);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut input = single_model_input(&[0.0], 10);
        input.deployments[0].model = "ghost".into();
        assert!(matches!(run(&input), Err(SimError::ScenarioInvalid { .. })));
        let mut input = single_model_input(&[0.0], 10);
        input.maps.clear();
        assert!(matches!(run(&input), Err(SimError::ScenarioInvalid { .. })));
    }

    #[test]
    fn on_fleet_profiling_provides_the_map() {
        let mut input = single_model_input(&[0.0, 1000.0], 10);
        input.maps.clear();
        input.cluster = ClusterState::new(8, 48.0);
        input
            .inject_profile_job("toy", MemMethod::M2, LatMethod::L2, 0.0)
            .unwrap();
        let out = run(&input).unwrap();
        let job = &out.report.profile_jobs[0];
        assert!(job.end > 0.0);
        let dep = &out.report.deployments[0];
        assert!((dep.timestamp - job.end).abs() < 1e-9);
        assert_eq!(
            out.report.requests[0].dropped.as_deref(),
            Some("no_model_deployed")
        );
        assert_eq!(out.report.requests_completed, 1);
        assert!(out.cluster.total_allocated() > 0.0);
    }
}
