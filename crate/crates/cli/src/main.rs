use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iserve_core::deployment::{Intent, IntentKind, PlacementPolicy, PolicyKind};
use iserve_core::profiler::{LatMethod, MemMethod};
use iserve_sim::{
    cmd_compare, cmd_plan, cmd_profile, cmd_run, cmd_sweep, load_maps, load_scenario, read_map,
    summarize, write_atomic, CliError, CliResult, PolicySpec, Sweep,
};

#[derive(Debug, Parser)]
#[command(
    name = "iserve-sim",
    version,
    about = "Intent-based LLM deployment planner and cluster simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides every seed in the scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Print machine-readable JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Profile a model and write its config map.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Model id as defined in the scenario.
        #[arg(long)]
        model: String,
        /// Memory estimation method (M1, M2, M3).
        #[arg(long, default_value = "M2")]
        mem: MemMethod,
        /// Latency estimation method (L1, L2).
        #[arg(long, default_value = "L2")]
        lat: LatMethod,
    },
    /// Rank a model's configurations for an intent (dry run of a deployment).
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: String,
        /// MinLatency, MinCost, MinMemory, MinGpuHours, LatencySlo, CostSlo,
        /// MaxPp, MaxTp or Fp16Only.
        #[arg(long, default_value = "MinLatency")]
        intent: IntentKind,
        /// Target for SLO intents (seconds or GB*s).
        #[arg(long)]
        target: Option<f64>,
        /// LeastLoaded, Packing or Hybrid.
        #[arg(long, default_value = "LeastLoaded")]
        policy: PolicyKind,
        /// Load threshold for Hybrid placement.
        #[arg(long, default_value_t = 0.5)]
        theta: f64,
        /// Use this config map instead of profiling.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Number of ranked rows to show.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Run a scenario and write the report, request log and plot data.
    Run {
        #[command(flatten)]
        common: Common,
        /// Re-run for each value: rate, seed, buffer or slo, e.g. rate=0.1,0.2,0.4.
        #[arg(long)]
        sweep: Option<Sweep>,
        /// Directory of `<model>.configmap.json` files to reuse.
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Run a scenario once per policy and tabulate the outcomes.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated intents, each optionally `@Placement[:theta]`.
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<PolicySpec>,
        #[arg(long)]
        maps: Option<PathBuf>,
    },
}

fn emit<T: serde::Serialize>(json: bool, value: &T, table: impl FnOnce() -> String) {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(value).expect("outputs serialize")
        );
    } else {
        print!("{}", table());
    }
}

fn maps_from(
    dir: Option<&Path>,
    scenario: &iserve_core::scenario::Scenario,
) -> CliResult<BTreeMap<String, iserve_core::ConfigMap>> {
    dir.map_or_else(|| Ok(BTreeMap::new()), |d| load_maps(d, scenario))
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Profile {
            common,
            model,
            mem,
            lat,
        } => {
            let scenario = load_scenario(&common.scenario, common.seed)?;
            let out = common.out.unwrap_or_else(|| scenario.base_dir.join("maps"));
            let summary = cmd_profile(&scenario, &model, mem, lat, &out)?;
            emit(common.json, &summary, || summary.render());
        }
        Command::Plan {
            common,
            model,
            intent,
            target,
            policy,
            theta,
            map,
            top,
        } => {
            let scenario = load_scenario(&common.scenario, common.seed)?;
            let map = match map {
                Some(p) => read_map(&p)?,
                None => {
                    let models = scenario.resolve_models()?;
                    let arch = models.get(&model).ok_or_else(|| {
                        CliError::validation(format!(
                            "model `{model}` is not defined in the scenario"
                        ))
                    })?;
                    scenario.profile(arch)?
                }
            };
            let intent = match target {
                Some(t) => Intent::with_target(intent, t),
                None => Intent::new(intent),
            };
            let policy = PlacementPolicy {
                kind: policy,
                theta,
            };
            let plan = cmd_plan(&scenario, &map, &intent, &policy, top)?;
            emit(common.json, &plan, || plan.render());
            if let Some(out) = common.out {
                write_atomic(
                    &out.join(format!("{model}.plan.json")),
                    &serde_json::to_string_pretty(&plan).expect("plans serialize"),
                )?;
            }
        }
        Command::Run {
            common,
            sweep,
            maps,
        } => {
            let scenario = load_scenario(&common.scenario, common.seed)?;
            let maps = maps_from(maps.as_deref(), &scenario)?;
            match sweep {
                None => {
                    let report = cmd_run(&scenario, &maps, common.out.as_deref())?;
                    emit(common.json, &report, || summarize(&report) + "\n");
                }
                Some(sweep) => {
                    let out = common.out.unwrap_or_else(|| scenario.base_dir.join("out"));
                    let mut first_error: Option<CliError> = None;
                    for (name, result) in cmd_sweep(&scenario, &maps, &sweep, &out) {
                        match result {
                            Ok(report) => println!("{name}: {}", summarize(&report)),
                            Err(e) => {
                                println!("{name}: error: {e}");
                                first_error.get_or_insert(e);
                            }
                        }
                    }
                    if let Some(e) = first_error {
                        return Err(e);
                    }
                }
            }
        }
        Command::Compare {
            common,
            policies,
            maps,
        } => {
            let scenario = load_scenario(&common.scenario, common.seed)?;
            let maps = maps_from(maps.as_deref(), &scenario)?;
            let table = cmd_compare(&scenario, &maps, &policies)?;
            emit(common.json, &table, || table.render());
            if let Some(out) = common.out {
                write_atomic(
                    &out.join("compare.json"),
                    &serde_json::to_string_pretty(&table).expect("tables serialize"),
                )?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ISERVE_SIM_LOG")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
