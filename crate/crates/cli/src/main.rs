use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use jigsaw_cli::verify::{run_suite, VerifyConfig};
use jigsaw_core::cost_model::CostModel;
use jigsaw_core::oracle::optimal_makespan;
use jigsaw_core::par::{map_slice, Exec};
use jigsaw_core::scheduler::{validate_schedule, JobSpec, PriorityDims, SchedulerConfig};
use jigsaw_core::sim::{self, ClusterConfig, Policy, SimConfig};
use jigsaw_core::trace::{self, GenConfig};

#[derive(Parser)]
#[command(
    name = "jigsaw",
    version,
    about = "SPB-aware GPU cluster scheduling simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a trace under one or more scheduling policies.
    Sim(SimArgs),
    /// Run the SPB invariant checks.
    Verify(VerifyArgs),
    /// Exact optimum of a tiny trace (debugging aid).
    #[command(hide = true)]
    Oracle(OracleArgs),
}

#[derive(Args)]
struct SimArgs {
    /// Trace CSV to replay.
    #[arg(long, conflicts_with = "gen_trace")]
    trace: Option<PathBuf>,
    /// Generate a trace from `key=value` settings (seed, n, interarrival, mix, iters, models, spb).
    #[arg(long, num_args = 0.., value_name = "KEY=VALUE")]
    gen_trace: Option<Vec<String>>,
    #[arg(long, default_value_t = 45)]
    gpus: usize,
    #[arg(long, default_value_t = 16.0)]
    mem_gb: f64,
    /// Comma-separated: jigsaw, gang, las, packing, random.
    #[arg(long, default_value = "jigsaw,gang,las,packing")]
    policy: String,
    #[arg(long, default_value_t = 60.0)]
    interval_s: f64,
    #[arg(long, default_value_t = 0.8)]
    gamma_ms_per_mb: f64,
    /// Profile CSV replacing the built-in table.
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Iteration range for generated traces, `lo-hi`.
    #[arg(long)]
    iters_range: Option<String>,
    /// PS communication time per MB of gradient.
    #[arg(long, default_value_t = 0.0)]
    comm_ms_per_mb: f64,
    /// Let the gang baselines use SPB demands as well.
    #[arg(long)]
    baseline_spb: bool,
    /// Priority product: `mcd` (memory × compute × duration) or `md`.
    #[arg(long, default_value = "mcd")]
    priority: String,
    #[arg(long)]
    max_coresident: Option<usize>,
    /// Write `plan_<policy>.csv` with every executed task.
    #[arg(long)]
    plan: bool,
    /// Check every plan for capacity, dependency, coverage and migration violations.
    #[arg(long)]
    validate: bool,
    /// Run the policies one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long = "B", visible_alias = "batch", default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    /// Directory for `checks.csv` and the SGD trajectory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 2)]
    gpus: usize,
    #[arg(long, default_value_t = 16.0)]
    mem_gb: f64,
    #[arg(long, default_value_t = 0.8)]
    gamma_ms_per_mb: f64,
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Write the optimal plan here.
    #[arg(long)]
    plan: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Sim(a) => cmd_sim(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Oracle(a) => cmd_oracle(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cost_model(profiles: Option<&Path>) -> Result<CostModel> {
    Ok(match profiles {
        Some(p) => CostModel::load(p)?,
        None => CostModel::builtin(),
    })
}

fn seconds_to_us(s: f64, what: &str) -> Result<u64> {
    if !(s > 0.0 && s.is_finite()) {
        bail!("{what} must be positive");
    }
    Ok((s * 1e6).round() as u64)
}

fn cmd_sim(a: SimArgs) -> Result<bool> {
    let cost = cost_model(a.profiles.as_deref())?;
    let cluster = ClusterConfig::new(a.gpus, a.mem_gb)?;
    let priority_dims = match a.priority.as_str() {
        "mcd" => PriorityDims::MemComputeDuration,
        "md" => PriorityDims::MemDuration,
        other => bail!("unknown priority `{other}` (mcd or md)"),
    };
    let cfg = SimConfig {
        sched: SchedulerConfig {
            interval: seconds_to_us(a.interval_s, "interval")?,
            gamma_ms_per_mb: a.gamma_ms_per_mb,
            priority_dims,
            max_coresident: a.max_coresident,
        },
        comm_ms_per_mb: a.comm_ms_per_mb,
        baseline_spb: a.baseline_spb,
        record_history: a.plan || a.validate,
        util_bucket: None,
    };
    let policies = Policy::parse_list(&a.policy, a.seed)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    let dags = match (&a.trace, &a.gen_trace) {
        (Some(path), _) => {
            if a.iters_range.is_some() {
                bail!("--iters-range only applies to generated traces");
            }
            trace::load(path, &cost)?
        }
        (None, settings) => {
            let mut gen = GenConfig::default();
            let mut seed = a.seed;
            if let Some(r) = &a.iters_range {
                gen.iters_range = trace::parse_range(r)?;
            }
            for kv in settings.iter().flatten() {
                let (k, v) = kv
                    .split_once('=')
                    .with_context(|| format!("expected key=value, got `{kv}`"))?;
                match k {
                    "seed" => seed = v.parse().with_context(|| format!("bad seed `{v}`"))?,
                    _ => gen.set(k, v)?,
                }
            }
            let records = trace::generate(seed, &gen, &cost)?;
            trace::save(&a.out_dir.join("trace.csv"), &records)?;
            trace::to_dags(&records)?
        }
    };

    let exec = if a.sequential {
        Exec::Sequential
    } else {
        Exec::Auto
    };
    let outputs = map_slice(exec, &policies, |&p| {
        sim::run(&dags, &cluster, p, &cfg, &cost)
    });
    let outputs = outputs
        .into_iter()
        .collect::<jigsaw_core::Result<Vec<_>>>()?;

    let mut ok = true;
    let machines = cluster.machines();
    for out in &outputs {
        let name = &out.report.policy;
        if a.plan {
            out.history
                .write_plan_csv(&a.out_dir.join(format!("plan_{name}.csv")))?;
        }
        if a.validate {
            let v = validate_schedule(&out.history, &machines, &out.jobs, &cfg.sched);
            if !v.is_empty() {
                ok = false;
                eprintln!("{name}: {} violations, first: {:?}", v.len(), v[0]);
            }
        }
        for (job, why) in &out.report.failed {
            ok = false;
            eprintln!("{name}: job {job} failed: {why}");
        }
    }
    let reports: Vec<_> = outputs.into_iter().map(|o| o.report).collect();
    sim::write_reports(&a.out_dir, &reports)?;

    println!(
        "{:<8} {:>14} {:>14} {:>14} {:>14} {:>7}",
        "policy", "makespan_s", "mean_jct_s", "p50_jct_s", "p95_jct_s", "failed"
    );
    for r in &reports {
        println!(
            "{:<8} {:>14.1} {:>14.1} {:>14.1} {:>14.1} {:>7}",
            r.policy,
            r.makespan as f64 / 1e6,
            r.mean_jct() / 1e6,
            r.jct_quantile(0.5) as f64 / 1e6,
            r.jct_quantile(0.95) as f64 / 1e6,
            r.failed.len()
        );
    }
    Ok(ok)
}

fn cmd_verify(a: VerifyArgs) -> Result<bool> {
    if a.k == 0 || a.batch < a.k || !a.batch.is_multiple_of(a.k) {
        bail!("--B must be a positive multiple of --k");
    }
    let cfg = VerifyConfig {
        workers: a.k,
        batch: a.batch,
        trials: a.trials,
        iterations: a.iters,
        seed: a.seed,
        exec: if a.sequential {
            Exec::Sequential
        } else {
            Exec::Auto
        },
    };
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let checks = run_suite(&cfg, a.out_dir.as_deref())?;
    for c in &checks {
        println!(
            "{} {:<24} {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if let Some(dir) = &a.out_dir {
        jigsaw_core::io::write_csv(&dir.join("checks.csv"), |w| {
            w.write_record(["check", "pass", "detail"])?;
            for c in &checks {
                w.write_record([
                    c.name.as_str(),
                    if c.pass { "true" } else { "false" },
                    &c.detail,
                ])?;
            }
            Ok(())
        })?;
    }
    Ok(checks.iter().all(|c| c.pass))
}

fn cmd_oracle(a: OracleArgs) -> Result<bool> {
    let cost = cost_model(a.profiles.as_deref())?;
    let cluster = ClusterConfig::new(a.gpus, a.mem_gb)?;
    let sched = SchedulerConfig {
        gamma_ms_per_mb: a.gamma_ms_per_mb,
        ..SchedulerConfig::default()
    };
    let dags = trace::load(&a.trace, &cost)?;
    let jobs = dags
        .iter()
        .map(|d| JobSpec::resolve(d, &cost, 0.0))
        .collect::<jigsaw_core::Result<Vec<_>>>()?;
    let machines = cluster.machines();
    let best = optimal_makespan(&jobs, &machines, &sched)?;
    let heuristic = sim::run(
        &dags,
        &cluster,
        Policy::Jigsaw,
        &SimConfig {
            sched,
            ..SimConfig::default()
        },
        &cost,
    )?;
    println!(
        "optimal makespan {:.3} ms ({} nodes), jigsaw {:.3} ms",
        best.makespan as f64 / 1e3,
        best.nodes,
        heuristic.report.makespan as f64 / 1e3
    );
    if let Some(p) = &a.plan {
        best.plan.write_plan_csv(p)?;
    }
    Ok(true)
}
