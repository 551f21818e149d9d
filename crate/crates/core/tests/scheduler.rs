use jigsaw_core::cost_model::CostModel;
use jigsaw_core::oracle::{exhaustive_makespan, optimal_makespan, tiny_instance};
use jigsaw_core::scheduler::{validate_schedule, JobSpec, SchedulerConfig};
use jigsaw_core::sim::{run, run_jobs, ClusterConfig, Policy, SimConfig};
use jigsaw_core::trace::{generate, to_dags, GenConfig};

const POLICIES: [Policy; 5] = [
    Policy::Jigsaw,
    Policy::GangFifo,
    Policy::Las,
    Policy::Packing,
    Policy::RandomPlacement { seed: 3 },
];

fn small_trace(seed: u64) -> Vec<jigsaw_core::scheduler::JobDag> {
    let gen = GenConfig {
        n_jobs: 40,
        mean_interarrival_s: 5.0,
        iters_range: (20, 400),
        ..GenConfig::default()
    };
    to_dags(&generate(seed, &gen, &CostModel::builtin()).unwrap()).unwrap()
}

#[test]
fn every_policy_produces_valid_plans() {
    let cost = CostModel::builtin();
    let cluster = ClusterConfig::new(16, 16.0).unwrap();
    for seed in 0..3 {
        let dags = small_trace(seed);
        for p in POLICIES {
            let cfg = SimConfig {
                sched: SchedulerConfig {
                    interval: 5_000_000,
                    ..SchedulerConfig::default()
                },
                ..SimConfig::default()
            };
            let out = run(&dags, &cluster, p, &cfg, &cost).unwrap();
            let v = validate_schedule(&out.history, &cluster.machines(), &out.jobs, &cfg.sched);
            assert!(v.is_empty(), "{p} seed {seed}: {:?}", &v[..v.len().min(3)]);
            assert!(out.report.failed.is_empty());
            assert_eq!(out.report.jobs.len(), dags.len());
        }
    }
}

#[test]
fn jigsaw_never_beats_the_optimum() {
    let cfg = SimConfig::default();
    let mut within = 0;
    for seed in 0..40 {
        let (jobs, machines) = tiny_instance(seed, 10);
        let best = optimal_makespan(&jobs, &machines, &cfg.sched).unwrap();
        let cluster = ClusterConfig::new(machines.len(), 16.0).unwrap();
        let out = run_jobs(&jobs, &cluster, Policy::Jigsaw, &cfg).unwrap();
        assert!(out.report.makespan >= best.makespan, "seed {seed}");
        if out.report.makespan as f64 <= 1.5 * best.makespan as f64 {
            within += 1;
        }
        assert!(
            validate_schedule(&best.plan, &machines, &jobs, &cfg.sched).is_empty(),
            "seed {seed}"
        );
        assert!(
            validate_schedule(&out.history, &machines, &jobs, &cfg.sched).is_empty(),
            "seed {seed}"
        );
        assert_eq!(
            best.plan.task_count(),
            jobs.iter().map(JobSpec::worker_iterations).sum::<u64>()
        );
    }
    assert!(within >= 38, "{within}/40 within 1.5x");
}

#[test]
fn pruned_search_matches_plain_enumeration() {
    let cfg = SchedulerConfig::default();
    let mut checked = 0;
    for seed in 0..60 {
        let (jobs, machines) = tiny_instance(seed, 6);
        let a = optimal_makespan(&jobs, &machines, &cfg).unwrap();
        let b = exhaustive_makespan(&jobs, &machines, &cfg).unwrap();
        assert_eq!(a.makespan, b.makespan, "seed {seed}");
        checked += 1;
    }
    assert_eq!(checked, 60);
}

#[test]
fn oracle_rejects_large_instances() {
    let (jobs, machines) = tiny_instance(1, 16);
    let mut jobs = jobs;
    for j in &mut jobs {
        j.iterations = 50;
    }
    assert!(optimal_makespan(&jobs, &machines, &SchedulerConfig::default()).is_err());
}
