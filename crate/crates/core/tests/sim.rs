use std::collections::HashMap;

use jigsaw_core::cost_model::CostModel;
use jigsaw_core::scheduler::{JobDag, SchedulerConfig};
use jigsaw_core::sim::{run, write_reports, ClusterConfig, Policy, SimConfig};
use jigsaw_core::trace::{generate, to_dags, GenConfig};

const POLICIES: [Policy; 5] = [
    Policy::Jigsaw,
    Policy::GangFifo,
    Policy::Las,
    Policy::Packing,
    Policy::RandomPlacement { seed: 1 },
];

fn trace(seed: u64, n: usize) -> Vec<JobDag> {
    let gen = GenConfig {
        n_jobs: n,
        mean_interarrival_s: 10.0,
        iters_range: (50, 1500),
        ..GenConfig::default()
    };
    to_dags(&generate(seed, &gen, &CostModel::builtin()).unwrap()).unwrap()
}

fn cfg() -> SimConfig {
    SimConfig {
        sched: SchedulerConfig {
            interval: 10_000_000,
            ..SchedulerConfig::default()
        },
        ..SimConfig::default()
    }
}

#[test]
fn runs_are_deterministic() {
    let dags = trace(4, 50);
    let cluster = ClusterConfig::new(16, 16.0).unwrap();
    let cost = CostModel::builtin();
    for p in POLICIES {
        let a = run(&dags, &cluster, p, &cfg(), &cost).unwrap();
        let b = run(&dags, &cluster, p, &cfg(), &cost).unwrap();
        assert_eq!(a.report, b.report, "{p}");
        assert_eq!(a.history, b.history, "{p}");
    }
}

#[test]
fn busy_time_is_conserved_and_causal() {
    let dags = trace(5, 50);
    let cluster = ClusterConfig::new(16, 16.0).unwrap();
    let cost = CostModel::builtin();
    for p in POLICIES {
        let out = run(&dags, &cluster, p, &cfg(), &cost).unwrap();
        let busy: u64 = out.report.busy.iter().sum();
        let from_plan: u64 = out.history.segments.iter().map(|s| s.busy()).sum();
        assert_eq!(busy, from_plan, "{p}");
        let surcharges: u64 = out.history.assignments().map(|a| a.surcharge).sum();
        let demanded: u64 = out
            .jobs
            .iter()
            .map(|j| j.iterations as u64 * j.workers.iter().map(|w| w.duration).sum::<u64>())
            .sum();
        assert_eq!(busy, demanded + surcharges, "{p}");

        let mut last_end: HashMap<u32, u64> = HashMap::new();
        let arrival: HashMap<u32, u64> = out.jobs.iter().map(|j| (j.id, j.arrival)).collect();
        for a in out.history.assignments() {
            assert!(
                a.start >= arrival[&a.job],
                "{p}: job {} started before arrival",
                a.job
            );
            let e = last_end.entry(a.job).or_default();
            *e = (*e).max(a.end);
        }
        for (o, j) in out.report.jobs.iter().zip(&out.jobs) {
            assert_eq!(o.finish, last_end[&o.job], "{p}");
            assert!(o.jct() >= j.iterations as u64 * j.iteration_time(), "{p}");
        }
        assert_eq!(
            out.report.makespan,
            out.report.jobs.iter().map(|j| j.finish).max().unwrap()
        );
        let migrated = out.history.assignments().filter(|a| a.migrated).count() as u64;
        assert_eq!(migrated, out.report.total_migrations(), "{p}");
    }
}

#[test]
fn lone_job_runs_without_interference() {
    let cost = CostModel::builtin();
    let cluster = ClusterConfig::new(8, 16.0).unwrap();
    let dags = vec![JobDag::new(0, 0, "ResNet50", 4, 300, true).unwrap()];
    for p in &POLICIES[..4] {
        let p = *p;
        let out = run(&dags, &cluster, p, &cfg(), &cost).unwrap();
        let ideal = 300 * out.jobs[0].iteration_time();
        let jct = out.report.jobs[0].jct();
        assert!(
            jct >= ideal && jct <= ideal + cfg().sched.interval,
            "{p}: {jct} vs {ideal}"
        );
        assert_eq!(out.report.total_migrations(), 0, "{p}");
    }
    let random = run(&dags, &cluster, POLICIES[4], &cfg(), &cost).unwrap();
    assert!(random.report.total_migrations() > 0);
}

#[test]
fn utilization_is_a_fraction() {
    let dags = trace(6, 40);
    let cluster = ClusterConfig::new(12, 16.0).unwrap();
    for p in POLICIES {
        let out = run(&dags, &cluster, p, &cfg(), &CostModel::builtin()).unwrap();
        assert!(!out.report.utilization.is_empty());
        for s in &out.report.utilization {
            assert!((0.0..=1.0 + 1e-9).contains(&s.busy_fraction), "{p}: {s:?}");
        }
    }
}

#[test]
fn spb_frees_gpu_time_for_gang_baselines() {
    let dags = trace(7, 30);
    let cluster = ClusterConfig::new(16, 16.0).unwrap();
    let cost = CostModel::builtin();
    let full = run(&dags, &cluster, Policy::Las, &cfg(), &cost).unwrap();
    let spb = SimConfig {
        baseline_spb: true,
        ..cfg()
    };
    let partial = run(&dags, &cluster, Policy::Las, &spb, &cost).unwrap();
    let busy = |o: &jigsaw_core::sim::SimOutput| o.report.busy.iter().sum::<u64>();
    assert!(busy(&partial) < busy(&full));
}

#[test]
fn unsorted_trace_is_rejected() {
    let dags = vec![
        JobDag::new(0, 10, "ResNet50", 1, 2, true).unwrap(),
        JobDag::new(1, 0, "ResNet50", 1, 2, true).unwrap(),
    ];
    let cluster = ClusterConfig::new(2, 16.0).unwrap();
    assert!(run(
        &dags,
        &cluster,
        Policy::Jigsaw,
        &cfg(),
        &CostModel::builtin()
    )
    .is_err());
}

#[test]
fn report_files_have_headers() {
    let dags = trace(8, 20);
    let cluster = ClusterConfig::new(16, 16.0).unwrap();
    let reports: Vec<_> = [Policy::Jigsaw, Policy::Las]
        .into_iter()
        .map(|p| {
            run(&dags, &cluster, p, &cfg(), &CostModel::builtin())
                .unwrap()
                .report
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    write_reports(dir.path(), &reports).unwrap();
    for (file, header) in [
        (
            "summary.csv",
            "policy,makespan_us,mean_jct_us,p50_jct_us,p95_jct_us,failed_jobs",
        ),
        ("jct_cdf.csv", "policy,jct_us,cumulative_fraction"),
        (
            "migration_cdf.csv",
            "policy,migration_fraction,cumulative_fraction",
        ),
        ("util.csv", "policy,machine,time_us,busy_fraction"),
    ] {
        let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
        assert_eq!(text.lines().next(), Some(header), "{file}");
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}
