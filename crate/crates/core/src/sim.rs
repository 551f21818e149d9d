//! Discrete-event cluster simulation: job arrivals, scheduling ticks and
//! completions driven through one of the scheduling policies, with the
//! metrics and CSV reports computed from what actually ran.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cost_model::CostModel;
use crate::error::{arg, Error, Result};
use crate::io::write_atomic;
use crate::scheduler::{
    GangEvent, GangPolicy, GangScheduler, History, Jigsaw, JobDag, JobId, JobSpec, MachineId,
    MachineTimeline, Placement, SchedulerConfig, Segment,
};
use crate::Micros;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub num_gpus: usize,
    pub mem_per_gpu_gb: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            num_gpus: 45,
            mem_per_gpu_gb: 16.0,
        }
    }
}

impl ClusterConfig {
    pub fn new(num_gpus: usize, mem_per_gpu_gb: f64) -> Result<Self> {
        let c = ClusterConfig {
            num_gpus,
            mem_per_gpu_gb,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_gpus == 0 || self.num_gpus > MachineId::MAX as usize {
            return arg(format!("GPU count must be in 1..={}", MachineId::MAX));
        }
        if !(self.mem_per_gpu_gb > 0.0 && self.mem_per_gpu_gb.is_finite()) {
            return arg("GPU memory must be positive");
        }
        Ok(())
    }

    /// One single-GPU machine per device.
    pub fn machines(&self) -> Vec<MachineTimeline> {
        (0..self.num_gpus)
            .map(|i| MachineTimeline::new(i as MachineId, self.mem_per_gpu_gb))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    Jigsaw,
    GangFifo,
    Las,
    Packing,
    /// Jigsaw with uniformly random machine choice.
    RandomPlacement {
        seed: u64,
    },
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Jigsaw => "jigsaw",
            Policy::GangFifo => "gang",
            Policy::Las => "las",
            Policy::Packing => "packing",
            Policy::RandomPlacement { .. } => "random",
        }
    }

    fn gang(&self) -> Option<GangPolicy> {
        match self {
            Policy::GangFifo => Some(GangPolicy::Fifo),
            Policy::Las => Some(GangPolicy::Las),
            Policy::Packing => Some(GangPolicy::Packing),
            _ => None,
        }
    }

    /// Comma-separated list; `random` takes `seed` for its generator.
    pub fn parse_list(list: &str, seed: u64) -> Result<Vec<Policy>> {
        let mut out = Vec::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let p = match name.parse::<Policy>()? {
                Policy::RandomPlacement { .. } => Policy::RandomPlacement { seed },
                p => p,
            };
            if !out.contains(&p) {
                out.push(p);
            }
        }
        if out.is_empty() {
            return arg("no policy given");
        }
        Ok(out)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "jigsaw" => Policy::Jigsaw,
            "gang" | "fifo" | "gang_fifo" => Policy::GangFifo,
            "las" | "tiresias" => Policy::Las,
            "packing" | "gandiva" => Policy::Packing,
            "random" => Policy::RandomPlacement { seed: 0 },
            other => return arg(format!("unknown policy `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub sched: SchedulerConfig,
    /// PS communication time per MB of gradient, folded into each task.
    pub comm_ms_per_mb: f64,
    /// Let gang baselines keep SPB demands instead of full backprop.
    pub baseline_spb: bool,
    /// Keep the per-task history (needed for validation and plan export).
    pub record_history: bool,
    /// Width of the utilization buckets; defaults to the interval.
    pub util_bucket: Option<Micros>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            sched: SchedulerConfig::default(),
            comm_ms_per_mb: 0.0,
            baseline_spb: false,
            record_history: true,
            util_bucket: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobOutcome {
    pub job: JobId,
    pub arrival: Micros,
    pub finish: Micros,
    pub migrations: u64,
    pub worker_iterations: u64,
}

impl JobOutcome {
    pub fn jct(&self) -> Micros {
        self.finish - self.arrival
    }

    pub fn migration_fraction(&self) -> f64 {
        self.migrations as f64 / self.worker_iterations as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilSample {
    pub machine: MachineId,
    pub time: Micros,
    pub busy_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub policy: String,
    pub makespan: Micros,
    /// Completed jobs in trace order.
    pub jobs: Vec<JobOutcome>,
    /// Jobs no machine could host, with the reason.
    pub failed: Vec<(JobId, String)>,
    pub busy: Vec<Micros>,
    pub util_bucket: Micros,
    pub utilization: Vec<UtilSample>,
}

impl MetricsReport {
    fn sorted_jct(&self) -> Vec<Micros> {
        let mut v: Vec<Micros> = self.jobs.iter().map(JobOutcome::jct).collect();
        v.sort_unstable();
        v
    }

    pub fn mean_jct(&self) -> f64 {
        if self.jobs.is_empty() {
            return 0.0;
        }
        self.jobs.iter().map(|j| j.jct() as f64).sum::<f64>() / self.jobs.len() as f64
    }

    /// Nearest-rank percentile of JCT, `q` in `(0, 1]`.
    pub fn jct_quantile(&self, q: f64) -> Micros {
        quantile(&self.sorted_jct(), q).unwrap_or(0)
    }

    pub fn migration_quantile(&self, q: f64) -> f64 {
        let mut v: Vec<f64> = self
            .jobs
            .iter()
            .map(JobOutcome::migration_fraction)
            .collect();
        v.sort_by(f64::total_cmp);
        quantile(&v, q).unwrap_or(0.0)
    }

    pub fn total_migrations(&self) -> u64 {
        self.jobs.iter().map(|j| j.migrations).sum()
    }
}

fn quantile<T: Copy>(sorted: &[T], q: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

fn cdf<T: Copy + PartialEq>(sorted: Vec<T>) -> Vec<(T, f64)> {
    let n = sorted.len() as f64;
    let mut out: Vec<(T, f64)> = Vec::new();
    for (i, v) in sorted.into_iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    out
}

/// Empirical CDF of job completion times: one step per distinct value.
pub fn jct_cdf(report: &MetricsReport) -> Vec<(Micros, f64)> {
    cdf(report.sorted_jct())
}

/// Empirical CDF of per-job migration fractions.
pub fn migration_cdf(report: &MetricsReport) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = report
        .jobs
        .iter()
        .map(JobOutcome::migration_fraction)
        .collect();
    v.sort_by(f64::total_cmp);
    cdf(v)
}

/// A finished run: metrics plus, when recorded, everything that executed.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: MetricsReport,
    pub history: History,
    /// Demands of every admitted job as the policy saw them.
    pub jobs: Vec<JobSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    TaskFinish,
    SchedTick,
    JobArrival,
}

#[derive(Debug, Clone, Copy)]
enum Payload {
    Arrival(usize),
    Tick,
    JobDone(JobId),
    GangFinish { job: JobId, version: u64 },
}

struct Event {
    time: Micros,
    kind: Kind,
    seq: u64,
    payload: Payload,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.kind, self.seq).cmp(&(other.time, other.kind, other.seq))
    }
}

struct Queue {
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, time: Micros, kind: Kind, payload: Payload) {
        self.seq += 1;
        self.heap.push(Reverse(Event {
            time,
            kind,
            seq: self.seq,
            payload,
        }));
    }

    fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|Reverse(e)| e)
    }
}

enum Engine {
    Jigsaw(Box<Jigsaw>),
    Gang(Box<GangScheduler>),
}

impl Engine {
    fn take_segments(&mut self) -> Vec<Segment> {
        match self {
            Engine::Jigsaw(j) => j.take_segments(),
            Engine::Gang(g) => g.take_segments(),
        }
    }

    fn busy_time(&self) -> Vec<Micros> {
        match self {
            Engine::Jigsaw(j) => j.busy_time().to_vec(),
            Engine::Gang(g) => g.busy_time().to_vec(),
        }
    }

    fn migrations(&self) -> Vec<(JobId, u64)> {
        match self {
            Engine::Jigsaw(j) => j.migrations(),
            Engine::Gang(g) => g.migrations(),
        }
    }
}

/// Compute-weighted busy time per (machine, bucket).
struct Util {
    bucket: Micros,
    busy: Vec<Vec<f64>>,
}

impl Util {
    fn add(&mut self, machine: MachineId, start: Micros, end: Micros, compute: f64) {
        let row = &mut self.busy[machine as usize];
        let mut t = start;
        while t < end {
            let b = (t / self.bucket) as usize;
            let edge = ((b as Micros) + 1) * self.bucket;
            let stop = edge.min(end);
            if row.len() <= b {
                row.resize(b + 1, 0.0);
            }
            row[b] += (stop - t) as f64 * compute;
            t = stop;
        }
    }

    fn samples(&self, horizon: Micros) -> Vec<UtilSample> {
        let buckets = horizon.div_ceil(self.bucket) as usize;
        let mut out = Vec::with_capacity(buckets * self.busy.len());
        for (m, row) in self.busy.iter().enumerate() {
            for b in 0..buckets {
                let busy = row.get(b).copied().unwrap_or(0.0);
                out.push(UtilSample {
                    machine: m as MachineId,
                    time: b as Micros * self.bucket,
                    busy_fraction: busy / self.bucket as f64,
                });
            }
        }
        out
    }
}

/// Simulates `trace` on `cluster` under `policy`. Jobs that fit on no
/// machine are reported as failed; the run carries on without them.
pub fn run(
    trace: &[JobDag],
    cluster: &ClusterConfig,
    policy: Policy,
    cfg: &SimConfig,
    cost: &CostModel,
) -> Result<SimOutput> {
    let full_backprop = policy.gang().is_some() && !cfg.baseline_spb;
    let jobs = trace
        .iter()
        .map(|dag| {
            if full_backprop {
                JobSpec::resolve(&dag.without_spb(), cost, cfg.comm_ms_per_mb)
            } else {
                JobSpec::resolve(dag, cost, cfg.comm_ms_per_mb)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    run_jobs(&jobs, cluster, policy, cfg)
}

/// Simulates jobs whose demands are already resolved; every policy sees
/// them exactly as given.
pub fn run_jobs(
    trace: &[JobSpec],
    cluster: &ClusterConfig,
    policy: Policy,
    cfg: &SimConfig,
) -> Result<SimOutput> {
    cluster.validate()?;
    cfg.sched.validate()?;
    if trace.windows(2).any(|w| w[1].arrival < w[0].arrival) {
        return arg("trace must be sorted by arrival");
    }
    let machines = cluster.machines();
    let mut engine = match policy.gang() {
        Some(g) => Engine::Gang(Box::new(
            GangScheduler::new(g, &machines, cfg.sched.clone())?.record_history(true),
        )),
        None => {
            let placement = match policy {
                Policy::RandomPlacement { seed } => Placement::Random { seed },
                _ => Placement::Earliest,
            };
            Engine::Jigsaw(Box::new(
                Jigsaw::new(machines.clone(), cfg.sched.clone(), placement)?.record_history(true),
            ))
        }
    };
    let interval = cfg.sched.interval;
    let mut util = Util {
        bucket: cfg.util_bucket.unwrap_or(interval).max(1),
        busy: vec![Vec::new(); machines.len()],
    };

    let mut q = Queue {
        heap: BinaryHeap::new(),
        seq: 0,
    };
    for (i, dag) in trace.iter().enumerate() {
        q.push(dag.arrival, Kind::JobArrival, Payload::Arrival(i));
    }
    if !trace.is_empty() {
        q.push(0, Kind::SchedTick, Payload::Tick);
    }

    let mut specs: Vec<JobSpec> = Vec::new();
    let mut spec_of: HashMap<JobId, usize> = HashMap::new();
    let mut finish: HashMap<JobId, Micros> = HashMap::new();
    let mut failed = Vec::new();
    let mut arrived = 0usize;
    let mut segments: Vec<Segment> = Vec::new();
    let mut compute_of: HashMap<JobId, Vec<f64>> = HashMap::new();

    while let Some(ev) = q.pop() {
        let now = ev.time;
        let mut gang_events: Vec<GangEvent> = Vec::new();
        match ev.payload {
            Payload::Arrival(i) => {
                arrived += 1;
                let spec = trace[i].clone();
                let admitted = match &mut engine {
                    Engine::Jigsaw(j) => j.add_job(spec.clone()).map(|_| Vec::new()),
                    Engine::Gang(g) => g.on_arrival(spec.clone(), now),
                };
                match admitted {
                    Ok(evs) => {
                        gang_events = evs;
                        compute_of
                            .insert(spec.id, spec.workers.iter().map(|w| w.compute).collect());
                        spec_of.insert(spec.id, specs.len());
                        specs.push(spec);
                        if let Engine::Jigsaw(j) = &mut engine {
                            j.schedule_interval(now)?;
                        }
                    }
                    Err(e @ Error::Unschedulable { .. }) => {
                        failed.push((trace[i].id, e.to_string()))
                    }
                    Err(e) => return Err(e),
                }
            }
            Payload::Tick => {
                match &mut engine {
                    Engine::Jigsaw(j) => {
                        j.schedule_interval(now)?;
                    }
                    Engine::Gang(g) => gang_events = g.on_tick(now),
                }
                let pending = arrived < trace.len() || finish.len() < specs.len();
                if pending {
                    q.push(now + interval, Kind::SchedTick, Payload::Tick);
                }
            }
            Payload::JobDone(job) => {
                finish.insert(job, now);
            }
            Payload::GangFinish { job, version } => {
                if let Engine::Gang(g) = &mut engine {
                    gang_events = g.on_finish(job, version, now);
                    for (job, t) in g.take_completions() {
                        finish.insert(job, t);
                    }
                }
            }
        }
        for GangEvent::Finish { job, at, version } in gang_events {
            q.push(at, Kind::TaskFinish, Payload::GangFinish { job, version });
        }
        if let Engine::Jigsaw(j) = &mut engine {
            for (job, t) in j.take_completions() {
                q.push(t, Kind::TaskFinish, Payload::JobDone(job));
            }
        }
        for seg in engine.take_segments() {
            let c = compute_of[&seg.job][seg.worker as usize];
            for a in seg.assignments() {
                util.add(a.machine, a.start, a.end, c);
            }
            if cfg.record_history {
                segments.push(seg);
            }
        }
    }

    if finish.len() != specs.len() {
        return Err(Error::Internal(format!(
            "{} of {} admitted jobs never finished",
            specs.len() - finish.len(),
            specs.len()
        )));
    }
    let migrations: HashMap<JobId, u64> = engine.migrations().into_iter().collect();
    let jobs: Vec<JobOutcome> = specs
        .iter()
        .map(|s| JobOutcome {
            job: s.id,
            arrival: s.arrival,
            finish: finish[&s.id],
            migrations: migrations.get(&s.id).copied().unwrap_or(0),
            worker_iterations: s.worker_iterations(),
        })
        .collect();
    let makespan = jobs.iter().map(|j| j.finish).max().unwrap_or(0);
    let report = MetricsReport {
        policy: policy.name().to_string(),
        makespan,
        jobs,
        failed,
        busy: engine.busy_time(),
        util_bucket: util.bucket,
        utilization: util.samples(makespan),
    };
    Ok(SimOutput {
        report,
        history: History { segments },
        jobs: specs,
    })
}

/// Writes `summary.csv`, `jct_cdf.csv`, `migration_cdf.csv` and `util.csv`
/// for the given runs into `dir`, each atomically.
pub fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut summary = Vec::new();
    writeln!(
        summary,
        "policy,makespan_us,mean_jct_us,p50_jct_us,p95_jct_us,failed_jobs"
    )?;
    let mut jct = Vec::new();
    writeln!(jct, "policy,jct_us,cumulative_fraction")?;
    let mut mig = Vec::new();
    writeln!(mig, "policy,migration_fraction,cumulative_fraction")?;
    let mut util = Vec::new();
    writeln!(util, "policy,machine,time_us,busy_fraction")?;
    for r in reports {
        writeln!(
            summary,
            "{},{},{:.1},{},{},{}",
            r.policy,
            r.makespan,
            r.mean_jct(),
            r.jct_quantile(0.5),
            r.jct_quantile(0.95),
            r.failed.len()
        )?;
        for (v, f) in jct_cdf(r) {
            writeln!(jct, "{},{},{:.6}", r.policy, v, f)?;
        }
        for (v, f) in migration_cdf(r) {
            writeln!(mig, "{},{:.6},{:.6}", r.policy, v, f)?;
        }
        for s in &r.utilization {
            writeln!(
                util,
                "{},{},{},{:.6}",
                r.policy, s.machine, s.time, s.busy_fraction
            )?;
        }
    }
    write_atomic(&dir.join("summary.csv"), &summary)?;
    write_atomic(&dir.join("jct_cdf.csv"), &jct)?;
    write_atomic(&dir.join("migration_cdf.csv"), &mig)?;
    write_atomic(&dir.join("util.csv"), &util)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::{ProfileEntry, ProfilePoint};

    fn flat_model(name: &str, total_ms: f64) -> CostModel {
        let mut cost = CostModel::default();
        cost.insert(
            ProfileEntry::new(
                name,
                vec![ProfilePoint {
                    fraction: 1.0,
                    forward_ms: total_ms / 2.0,
                    backward_ms: total_ms / 2.0,
                    peak_mem_gb: 4.0,
                }],
                100.0,
                64,
            )
            .unwrap(),
        )
        .unwrap();
        cost
    }

    #[test]
    fn single_job_chain() {
        let cost = flat_model("m", 10.0);
        let trace = vec![JobDag::new(1, 0, "m", 1, 2, false).unwrap()];
        let cluster = ClusterConfig::new(1, 16.0).unwrap();
        for p in [
            Policy::Jigsaw,
            Policy::GangFifo,
            Policy::Las,
            Policy::Packing,
        ] {
            let out = run(&trace, &cluster, p, &SimConfig::default(), &cost).unwrap();
            assert_eq!(out.report.makespan, 20_000, "{p}");
            assert_eq!(out.report.jobs[0].jct(), 20_000);
            assert_eq!(out.report.total_migrations(), 0);
            assert_eq!(jct_cdf(&out.report), vec![(20_000, 1.0)]);
        }
    }

    #[test]
    fn oversized_job_fails_and_run_continues() {
        let mut cost = flat_model("m", 10.0);
        cost.insert(
            ProfileEntry::new(
                "huge",
                vec![ProfilePoint {
                    fraction: 1.0,
                    forward_ms: 1.0,
                    backward_ms: 1.0,
                    peak_mem_gb: 40.0,
                }],
                10.0,
                64,
            )
            .unwrap(),
        )
        .unwrap();
        let trace = vec![
            JobDag::new(1, 0, "huge", 1, 2, false).unwrap(),
            JobDag::new(2, 5, "m", 1, 2, false).unwrap(),
        ];
        let cluster = ClusterConfig::new(2, 16.0).unwrap();
        for p in [Policy::Jigsaw, Policy::Las] {
            let out = run(&trace, &cluster, p, &SimConfig::default(), &cost).unwrap();
            assert_eq!(out.report.failed.len(), 1);
            assert_eq!(out.report.jobs.len(), 1);
        }
    }

    #[test]
    fn policy_names_round_trip() {
        let ps = Policy::parse_list("jigsaw, gang,las,packing,random,jigsaw", 3).unwrap();
        assert_eq!(ps.len(), 5);
        assert_eq!(ps[4], Policy::RandomPlacement { seed: 3 });
        for p in ps {
            assert_eq!(p.name().parse::<Policy>().unwrap().name(), p.name());
        }
        assert!("sjf".parse::<Policy>().is_err());
    }

    #[test]
    fn cdf_steps() {
        assert_eq!(cdf(vec![1, 1, 2, 4]), vec![(1, 0.5), (2, 0.75), (4, 1.0)]);
        assert_eq!(quantile(&[1, 2, 3, 4], 0.5), Some(2));
        assert_eq!(quantile::<u8>(&[], 0.5), None);
    }
}
