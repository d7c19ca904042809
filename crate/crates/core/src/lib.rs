//! Intent-based LLM deployment planning on a simulated GPU cluster.
//!
//! The crate is organised the way a deployment request flows through the
//! system:
//!
//! ```text
//!  catalog ──▶ profiler ──▶ deployment ──▶ simulator ──▶ report
//!     │           │  ▲                        ▲
//!     ▼           ▼  │                        │
//!  fingerprints  oracle (synthetic GPUs)     trace
//! ```
//!
//! * [`catalog`] holds model descriptors, fingerprints and the configuration
//!   space.
//! * [`oracle`] is the synthetic ground truth that stands in for real GPUs.
//! * [`profiler`] estimates per-configuration latency and memory from a few
//!   oracle observations and produces a [`profiler::ConfigMap`].
//! * [`deployment`] ranks configurations by intent, packs memory blocks and
//!   chooses GPUs.
//! * [`simulator`] replays traces against the cluster and computes metrics.
//! * [`trace`] ingests, scales and synthesises request traces.
//! * [`scenario`] is the JSON scenario schema tying everything together.

pub mod catalog;
pub mod deployment;
pub mod oracle;
pub mod presets;
pub mod profiler;
pub mod scenario;
pub mod simulator;
pub mod trace;

pub use catalog::{Catalog, DeployConfig, ModelArchitecture, PruneKind, QuantKind};
pub use deployment::{Intent, IntentKind, PlacementPolicy, PolicyKind};
pub use profiler::{ConfigMap, LatMethod, MemMethod};
pub use simulator::{ClusterState, MetricsReport};
pub use trace::Trace;

/// Version stamped into every JSON/CSV artifact this crate writes.
pub const SCHEMA_VERSION: u32 = 1;
