use std::path::Path;
use std::process::Command;

use jigsaw_cli::verify::{convergence, variance_checks, worker_scaling, VerifyConfig};
use jigsaw_core::cost_model::{CostModel, ProfileEntry, ProfilePoint};
use jigsaw_core::oracle::{optimal_makespan, tiny_instance};
use jigsaw_core::par::{map_indexed, map_slice, Exec};
use jigsaw_core::scheduler::{validate_schedule, JobDag};
use jigsaw_core::sim::{run, run_jobs, ClusterConfig, MetricsReport, Policy, SimConfig};
use jigsaw_core::trace::{generate, to_dags, GenConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn large_trace() -> Vec<JobDag> {
    let gen = GenConfig {
        n_jobs: 480,
        iters_range: (2000, 20000),
        ..GenConfig::default()
    };
    to_dags(&generate(7, &gen, &CostModel::builtin()).unwrap()).unwrap()
}

/// Criteria 1 and 7 share the large-trace runs.
fn large_trace_runs() -> (Outcome, Outcome) {
    let dags = large_trace();
    let cost = CostModel::builtin();
    let cfg = SimConfig {
        record_history: false,
        ..SimConfig::default()
    };
    let runs: Vec<(usize, Policy)> = vec![
        (35, Policy::Jigsaw),
        (35, Policy::Las),
        (35, Policy::Packing),
        (45, Policy::Jigsaw),
        (45, Policy::Las),
        (45, Policy::Packing),
        (45, Policy::RandomPlacement { seed: 7 }),
    ];
    let reports: Vec<MetricsReport> = map_slice(Exec::Auto, &runs, |&(gpus, p)| {
        let cluster = ClusterConfig::new(gpus, 16.0).unwrap();
        run(&dags, &cluster, p, &cfg, &cost).unwrap().report
    });
    let mut pass = true;
    let mut detail = Vec::new();
    for (i, gpus) in [(0, 35), (3, 45)] {
        let (j, l, p) = (&reports[i], &reports[i + 1], &reports[i + 2]);
        let gain = |other: &MetricsReport| 1.0 - j.makespan as f64 / other.makespan as f64;
        pass &= gain(l) >= 0.10 && gain(p) >= 0.10;
        pass &= j.failed.is_empty() && l.failed.is_empty() && p.failed.is_empty();
        detail.push(format!(
            "{gpus} GPUs: jigsaw {:.0} s, las {:.0} s (-{:.1}%), packing {:.0} s (-{:.1}%)",
            j.makespan as f64 / 1e6,
            l.makespan as f64 / 1e6,
            100.0 * gain(l),
            p.makespan as f64 / 1e6,
            100.0 * gain(p)
        ));
    }
    let makespan = outcome(pass, detail.join("; "));

    let (j, r) = (&reports[3], &reports[6]);
    let mut pass = true;
    let mut detail = Vec::new();
    for q in [0.5, 0.9, 0.99] {
        let (a, b) = (j.migration_quantile(q), r.migration_quantile(q));
        pass &= a <= b;
        detail.push(format!("p{:.0} {a:.3} vs {b:.3}", q * 100.0));
    }
    let migration = outcome(
        pass,
        format!("jigsaw vs random placement: {}", detail.join(", ")),
    );
    (makespan, migration)
}

fn two_job_instance() -> Outcome {
    let mut cost = CostModel::default();
    let point = |fraction: f64, backward_ms: f64| ProfilePoint {
        fraction,
        forward_ms: 100.0,
        backward_ms,
        peak_mem_gb: 10.0,
    };
    cost.insert(
        ProfileEntry::new(
            "toy",
            vec![
                point(1.0 / 3.0, 200.0),
                point(2.0 / 3.0, 500.0),
                point(1.0, 900.0),
            ],
            1.0,
            64,
        )
        .unwrap(),
    )
    .unwrap();
    let dags = vec![
        JobDag::new(1, 0, "toy", 3, 1, true).unwrap(),
        JobDag::new(2, 200_000, "toy", 3, 1, true).unwrap(),
    ];
    let cluster = ClusterConfig::new(3, 16.0).unwrap();
    let cfg = SimConfig {
        baseline_spb: true,
        ..SimConfig::default()
    };
    let gang = run(&dags, &cluster, Policy::GangFifo, &cfg, &cost).unwrap();
    let jig = run(&dags, &cluster, Policy::Jigsaw, &cfg, &cost).unwrap();

    // idle gap on the GPU that ran job 1's shortest worker
    let short = gang
        .history
        .assignments()
        .find(|a| a.job == 1 && a.worker == 0)
        .unwrap();
    let next = gang
        .history
        .assignments()
        .filter(|a| a.machine == short.machine && a.start >= short.end)
        .map(|a| a.start)
        .min()
        .unwrap();
    let idle = next - short.end;
    let job2_start = jig
        .history
        .assignments()
        .filter(|a| a.job == 2)
        .map(|a| a.start)
        .min()
        .unwrap();
    let (gm, jm) = (gang.report.makespan, jig.report.makespan);
    outcome(
        idle >= 700_000 && job2_start == 300_000 && jm < gm,
        format!(
            "gang idles {:.1} s before job 2, jigsaw starts job 2 at {:.1} s, makespan {:.1} s vs gang {:.1} s",
            idle as f64 / 1e6,
            job2_start as f64 / 1e6,
            jm as f64 / 1e6,
            gm as f64 / 1e6
        ),
    )
}

fn variance_bounds() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for k in [2, 4, 8] {
        let cfg = VerifyConfig {
            workers: k,
            batch: 16 * k,
            trials: 10_000,
            ..VerifyConfig::default()
        };
        for c in variance_checks(&cfg).unwrap() {
            pass &= c.pass;
            if !c.pass {
                detail.push(c.detail);
            }
        }
        detail.push(format!("k={k} ok"));
    }
    outcome(pass, detail.join("; "))
}

fn convergence_checks() -> Outcome {
    let cfg = VerifyConfig {
        workers: 4,
        batch: 64,
        iterations: 5000,
        ..VerifyConfig::default()
    };
    let bound = convergence(&cfg, None).unwrap();
    let scaling = worker_scaling(&cfg, (4, 8)).unwrap();
    outcome(
        bound.pass && scaling.pass,
        format!("{}; {}", bound.detail, scaling.detail),
    )
}

const RESNET101_SWEEP: [(f64, f64, f64, f64); 11] = [
    (1.0, 34.79, 79.89, 6.5),
    (0.9, 34.85, 70.24, 5.7),
    (0.8, 34.71, 58.86, 5.1),
    (0.7, 34.61, 49.92, 4.6),
    (0.6, 34.72, 43.74, 4.3),
    (0.5, 34.70, 36.58, 4.1),
    (0.4, 34.61, 29.93, 3.8),
    (0.3, 34.67, 23.02, 3.5),
    (0.2, 34.84, 16.34, 3.3),
    (0.1, 34.86, 8.35, 3.1),
    (0.05, 34.64, 3.56, 2.9),
];

const FULL_BACKPROP: [(&str, f64, f64, f64); 9] = [
    ("ResNet18", 9.19, 21.49, 2.46),
    ("ResNet34", 16.11, 36.69, 3.08),
    ("ResNet50", 36.32, 78.9, 7.33),
    ("ResNet101_b128", 60.51, 135.14, 9.79),
    ("ResNet152", 86.9, 197.05, 12.81),
    ("VGG19", 6.82, 16.31, 2.02),
    ("VGG16", 5.68, 13.96, 1.97),
    ("VGG11", 3.34, 7.8, 1.83),
    ("GoogleNet", 41.33, 99.17, 5.96),
];

fn profile_knots() -> Outcome {
    let cost = CostModel::builtin();
    let mut bad = Vec::new();
    let e = cost.get("ResNet101").unwrap();
    for (f, fwd, bwd, mem) in RESNET101_SWEEP {
        let got = (
            e.forward_time(f).unwrap(),
            e.backward_time(f).unwrap(),
            e.peak_memory(f).unwrap(),
        );
        if got != (fwd, bwd, mem) {
            bad.push(format!("ResNet101 @ {f}: {got:?}"));
        }
    }
    for (name, fwd, bwd, mem) in FULL_BACKPROP {
        let e = cost.get(name).unwrap();
        let got = (
            e.forward_time(1.0).unwrap(),
            e.backward_time(1.0).unwrap(),
            e.peak_memory(1.0).unwrap(),
        );
        if got != (fwd, bwd, mem) {
            bad.push(format!("{name}: {got:?}"));
        }
    }
    let n = RESNET101_SWEEP.len() + FULL_BACKPROP.len();
    outcome(
        bad.is_empty(),
        format!("{}/{n} knots exact {}", n - bad.len(), bad.join(", ")),
    )
}

fn oracle_gap() -> Outcome {
    let cfg = SimConfig::default();
    let results = map_indexed(Exec::Auto, 100, |seed| {
        let (jobs, machines) = tiny_instance(seed as u64, 12);
        let best = optimal_makespan(&jobs, &machines, &cfg.sched).unwrap();
        let cluster = ClusterConfig::new(machines.len(), 16.0).unwrap();
        let out = run_jobs(&jobs, &cluster, Policy::Jigsaw, &cfg).unwrap();
        let valid = validate_schedule(&out.history, &machines, &jobs, &cfg.sched).is_empty();
        (out.report.makespan as f64 / best.makespan as f64, valid)
    });
    let below = results.iter().filter(|r| r.0 < 1.0).count();
    let within = results.iter().filter(|r| r.0 <= 1.5).count();
    let invalid = results.iter().filter(|r| !r.1).count();
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    outcome(
        below == 0 && within >= 95 && invalid == 0,
        format!("{within}/100 within 1.5x of optimum, worst {worst:.3}, {below} below optimum, {invalid} invalid plans"),
    )
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn cli_determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let commands: [&[&str]; 2] = [
        &[
            "sim",
            "--gen-trace",
            "n=40",
            "seed=3",
            "--iters-range",
            "100-2000",
            "--gpus",
            "16",
            "--policy",
            "jigsaw,gang,las,packing,random",
            "--plan",
            "--validate",
        ],
        &[
            "verify", "--k", "4", "--B", "64", "--trials", "2000", "--iters", "1000",
        ],
    ];
    let mut pass = true;
    let mut compared = 0;
    for (c, args) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let dir = root.path().join(format!("{c}_{run}"));
            let status = Command::new(env!("CARGO_BIN_EXE_jigsaw"))
                .args(*args)
                .arg("--out-dir")
                .arg(&dir)
                .stdout(std::process::Stdio::null())
                .status()
                .unwrap();
            pass &= status.success();
            outputs.push(files(&dir));
        }
        pass &= outputs[0] == outputs[1] && !outputs[0].is_empty();
        compared += outputs[0].len();
    }
    outcome(
        pass,
        format!("{compared} CSV files byte-identical across repeated runs"),
    )
}

#[test]
fn acceptance_criteria() {
    let (c1, c7) = large_trace_runs();
    let results = [
        ("makespan ordering", c1),
        ("two-job micro-instance", two_job_instance()),
        ("variance bounds", variance_bounds()),
        ("convergence bound", convergence_checks()),
        ("cost-model knots", profile_knots()),
        ("oracle gap", oracle_gap()),
        ("migration fraction", c7),
        ("determinism", cli_determinism()),
    ];
    for (i, (name, o)) in results.iter().enumerate() {
        println!(
            "{} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    assert!(results.iter().all(|(_, o)| o.pass));
}
