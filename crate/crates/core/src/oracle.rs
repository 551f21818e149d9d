//! Brute-force references: exact makespan of tiny scheduling instances,
//! chunk coverage by enumeration, and a separate Monte-Carlo path for the
//! SPB noise decomposition.

use rand::Rng as _;

use crate::error::{arg, Error, Result};
use crate::par::{map_indexed, Exec};
use crate::rng;
use crate::scheduler::{
    Assignment, History, JobSpec, MachineId, MachineTimeline, SchedulerConfig, Segment,
    WorkerDemand, WorkerId,
};
use crate::spb::{LayeredModel, MeanSe, SpbConfig};
use crate::Micros;

pub const MAX_JOBS: usize = 4;
pub const MAX_ITERATIONS: u32 = 3;
pub const MAX_MACHINES: usize = 3;
pub const MAX_TASKS: usize = 16;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSchedule {
    pub makespan: Micros,
    pub plan: History,
    /// Search nodes expanded.
    pub nodes: u64,
}

/// Reservations of one machine as a plain interval list.
#[derive(Debug, Clone)]
struct Bins {
    mem_cap: f64,
    compute_cap: f64,
    cap_tasks: Option<usize>,
    held: Vec<(Micros, Micros, f64, f64)>,
}

impl Bins {
    fn fits_at(&self, s: Micros, e: Micros, mem: f64, compute: f64) -> bool {
        // usage over [s, e) peaks at s or at some reservation start inside
        let mut probes = vec![s];
        probes.extend(self.held.iter().map(|h| h.0).filter(|&t| t > s && t < e));
        probes.iter().all(|&t| {
            let (mut m, mut c, mut n) = (mem, compute, 1usize);
            for &(hs, he, hm, hc) in &self.held {
                if hs <= t && t < he {
                    m += hm;
                    c += hc;
                    n += 1;
                }
            }
            m <= self.mem_cap + EPS
                && c <= self.compute_cap + EPS
                && self.cap_tasks.is_none_or(|cap| n <= cap)
        })
    }

    fn earliest(&self, ready: Micros, dur: Micros, mem: f64, compute: f64) -> Option<Micros> {
        if mem > self.mem_cap + EPS || compute > self.compute_cap + EPS {
            return None;
        }
        let mut cands: Vec<Micros> = std::iter::once(ready)
            .chain(self.held.iter().map(|h| h.1).filter(|&t| t > ready))
            .collect();
        cands.sort_unstable();
        cands
            .into_iter()
            .find(|&s| self.fits_at(s, s + dur, mem, compute))
    }
}

#[derive(Debug, Clone)]
struct Task {
    job: usize,
    worker: usize,
    iteration: u32,
}

struct Search<'a> {
    jobs: &'a [JobSpec],
    cfg: &'a SchedulerConfig,
    best: Micros,
    best_plan: Vec<Assignment>,
    nodes: u64,
    symmetry: bool,
}

#[derive(Debug, Clone)]
struct State {
    bins: Vec<Bins>,
    /// Next iteration (1-based) per job and workers already placed in it.
    iteration: Vec<u32>,
    placed: Vec<Vec<bool>>,
    iteration_end: Vec<Micros>,
    ready: Vec<Micros>,
    prev: Vec<Vec<Option<MachineId>>>,
    last_start: Micros,
    makespan: Micros,
    plan: Vec<Assignment>,
    remaining_work: f64,
}

impl Search<'_> {
    fn eligible(&self, st: &State) -> Vec<Task> {
        let mut out = Vec::new();
        for (j, job) in self.jobs.iter().enumerate() {
            if st.iteration[j] > job.iterations {
                continue;
            }
            for w in 0..job.workers.len() {
                if st.placed[j][w] {
                    continue;
                }
                if self.symmetry && st.iteration[j] == 1 && self.twin_blocked(st, j, w) {
                    continue;
                }
                out.push(Task {
                    job: j,
                    worker: w,
                    iteration: st.iteration[j],
                });
            }
        }
        out
    }

    /// In the first iteration, identical workers of one job are placed in
    /// id order.
    fn twin_blocked(&self, st: &State, j: usize, w: usize) -> bool {
        let d = self.jobs[j].workers[w];
        (0..w).any(|v| !st.placed[j][v] && self.jobs[j].workers[v] == d)
    }

    fn lower_bound(&self, st: &State) -> Micros {
        let mut lb = st.makespan;
        for (j, job) in self.jobs.iter().enumerate() {
            let it = st.iteration[j];
            if it > job.iterations {
                continue;
            }
            let floor = st.ready[j].max(st.last_start);
            let current = job
                .workers
                .iter()
                .enumerate()
                .filter(|&(w, _)| !st.placed[j][w])
                .map(|(_, d)| floor + d.duration)
                .max()
                .unwrap_or(0)
                .max(st.iteration_end[j]);
            let rest = (job.iterations - it) as Micros * job.iteration_time();
            lb = lb.max(current + rest);
        }
        let cap: f64 = st.bins.iter().map(|b| b.compute_cap).sum();
        let work = st.last_start as f64 + st.remaining_work / cap;
        lb.max(work.ceil() as Micros)
    }

    fn dfs(&mut self, st: &State) {
        self.nodes += 1;
        let tasks = self.eligible(st);
        if tasks.is_empty() {
            if st.makespan < self.best {
                self.best = st.makespan;
                self.best_plan = st.plan.clone();
            }
            return;
        }
        if self.lower_bound(st) >= self.best {
            return;
        }
        let mut children: Vec<(Micros, Micros, usize, usize, Micros)> = Vec::new();
        for (ti, t) in tasks.iter().enumerate() {
            let job = &self.jobs[t.job];
            let d = job.workers[t.worker];
            let prev = st.prev[t.job][t.worker];
            let mut tried_empty: Vec<(f64, f64)> = Vec::new();
            for (m, bins) in st.bins.iter().enumerate() {
                if self.symmetry && bins.held.is_empty() {
                    // empty machines with the same capacity are interchangeable
                    let shape = (bins.mem_cap, bins.compute_cap);
                    if tried_empty.contains(&shape) {
                        continue;
                    }
                    tried_empty.push(shape);
                }
                let surcharge = match prev {
                    Some(p) if p as usize != m => self.cfg.migration_cost(job.model_size_mb),
                    _ => 0,
                };
                let dur = d.duration + surcharge;
                let Some(s) = bins.earliest(st.ready[t.job], dur, d.mem_gb, d.compute) else {
                    continue;
                };
                if self.symmetry && s < st.last_start {
                    continue;
                }
                children.push((s + dur, s, ti, m, surcharge));
            }
        }
        children.sort_by_key(|c| (c.0, c.1, c.2, c.3));
        for (end, start, ti, m, surcharge) in children {
            if end.max(st.makespan) >= self.best {
                continue;
            }
            let t = &tasks[ti];
            let job = &self.jobs[t.job];
            let d = job.workers[t.worker];
            let mut next = st.clone();
            next.bins[m].held.push((start, end, d.mem_gb, d.compute));
            if self.symmetry {
                next.last_start = start;
            }
            next.makespan = st.makespan.max(end);
            next.remaining_work -= d.duration as f64 * d.compute;
            next.prev[t.job][t.worker] = Some(m as MachineId);
            next.placed[t.job][t.worker] = true;
            next.iteration_end[t.job] = next.iteration_end[t.job].max(end);
            next.plan.push(Assignment {
                job: job.id,
                worker: t.worker as WorkerId,
                iteration: t.iteration,
                machine: m as MachineId,
                start,
                end,
                base: d.duration,
                surcharge,
                migrated: st.prev[t.job][t.worker].is_some_and(|p| p as usize != m),
            });
            if next.placed[t.job].iter().all(|&p| p) {
                next.placed[t.job].iter_mut().for_each(|p| *p = false);
                next.iteration[t.job] += 1;
                next.ready[t.job] = next.iteration_end[t.job];
            }
            self.dfs(&next);
        }
    }
}

fn check_size(jobs: &[JobSpec], machines: &[MachineTimeline]) -> Result<()> {
    let tasks: u64 = jobs.iter().map(JobSpec::worker_iterations).sum();
    if jobs.len() > MAX_JOBS
        || machines.len() > MAX_MACHINES
        || jobs.iter().any(|j| j.iterations > MAX_ITERATIONS)
        || tasks > MAX_TASKS as u64
    {
        return Err(Error::InstanceTooLarge(format!(
            "{} jobs, {} machines, {} tasks (limits {MAX_JOBS}, {MAX_MACHINES}, {MAX_TASKS}; at most {MAX_ITERATIONS} iterations)",
            jobs.len(),
            machines.len(),
            tasks
        )));
    }
    if machines.is_empty() {
        return arg("need at least one machine");
    }
    Ok(())
}

fn initial_state(jobs: &[JobSpec], machines: &[MachineTimeline], cfg: &SchedulerConfig) -> State {
    State {
        bins: machines
            .iter()
            .map(|m| Bins {
                mem_cap: m.mem_capacity_gb(),
                compute_cap: m.compute_capacity(),
                cap_tasks: cfg.max_coresident,
                held: Vec::new(),
            })
            .collect(),
        iteration: vec![1; jobs.len()],
        placed: jobs.iter().map(|j| vec![false; j.workers.len()]).collect(),
        iteration_end: jobs.iter().map(|j| j.arrival).collect(),
        ready: jobs.iter().map(|j| j.arrival).collect(),
        prev: jobs.iter().map(|j| vec![None; j.workers.len()]).collect(),
        last_start: 0,
        makespan: 0,
        plan: Vec::new(),
        remaining_work: jobs
            .iter()
            .map(|j| {
                j.iterations as f64
                    * j.workers
                        .iter()
                        .map(|w| w.duration as f64 * w.compute)
                        .sum::<f64>()
            })
            .sum(),
    }
}

fn solve(
    jobs: &[JobSpec],
    machines: &[MachineTimeline],
    cfg: &SchedulerConfig,
    symmetry: bool,
) -> Result<OracleSchedule> {
    cfg.validate()?;
    for j in jobs {
        for (w, d) in j.workers.iter().enumerate() {
            if !machines.iter().any(|m| {
                d.mem_gb <= m.mem_capacity_gb() + EPS && d.compute <= m.compute_capacity() + EPS
            }) {
                return Err(Error::Unschedulable {
                    job: j.id,
                    worker: w as WorkerId,
                    iteration: 1,
                    mem_gb: d.mem_gb,
                });
            }
        }
    }
    let mut search = Search {
        jobs,
        cfg,
        best: Micros::MAX,
        best_plan: Vec::new(),
        nodes: 0,
        symmetry,
    };
    search.dfs(&initial_state(jobs, machines, cfg));
    if jobs.is_empty() {
        search.best = 0;
    }
    Ok(OracleSchedule {
        makespan: search.best,
        plan: History {
            segments: search
                .best_plan
                .iter()
                .map(Segment::from_assignment)
                .collect(),
        },
        nodes: search.nodes,
    })
}

/// Minimum makespan over every plan satisfying the scheduler's capacity,
/// dependency and migration rules, by depth-first branch and bound over
/// serial schedule generation (task order × machine, earliest insertion).
pub fn optimal_makespan(
    jobs: &[JobSpec],
    machines: &[MachineTimeline],
    cfg: &SchedulerConfig,
) -> Result<OracleSchedule> {
    check_size(jobs, machines)?;
    solve(jobs, machines, cfg, true)
}

/// The same search without symmetry breaking or start-order pruning (the
/// bound still applies). Only for cross-checking on very small instances.
pub fn exhaustive_makespan(
    jobs: &[JobSpec],
    machines: &[MachineTimeline],
    cfg: &SchedulerConfig,
) -> Result<OracleSchedule> {
    check_size(jobs, machines)?;
    let tasks: u64 = jobs.iter().map(JobSpec::worker_iterations).sum();
    if tasks > 7 {
        return Err(Error::InstanceTooLarge(format!(
            "{tasks} tasks for plain enumeration"
        )));
    }
    solve(jobs, machines, cfg, false)
}

/// Seeded random instance within the exhaustive-search limits: 1–3
/// machines of 16 GB, 1–4 jobs of 1–3 workers and 1–3 iterations (at most
/// `max_tasks` tasks, capped at `MAX_TASKS`), task lengths 10–100 ms, mixed memory and compute demands,
/// staggered arrivals and model sizes that make migration costly.
pub fn tiny_instance(seed: u64, max_tasks: usize) -> (Vec<JobSpec>, Vec<MachineTimeline>) {
    let max_tasks = max_tasks.min(MAX_TASKS);
    let mut r = rng::stream(seed, 0x7157);
    let machines = (0..r.random_range(1..=MAX_MACHINES))
        .map(|i| MachineTimeline::new(i as MachineId, 16.0))
        .collect();
    let mut jobs = Vec::new();
    let mut tasks = 0usize;
    for id in 0..r.random_range(1..=MAX_JOBS) {
        let workers = r.random_range(1..=3usize);
        let mut iterations = r.random_range(1..=MAX_ITERATIONS);
        while iterations > 1 && tasks + workers * iterations as usize > max_tasks {
            iterations -= 1;
        }
        if tasks + workers * iterations as usize > max_tasks {
            break;
        }
        tasks += workers * iterations as usize;
        let arrival = if id == 0 {
            0
        } else {
            r.random_range(0..=4u64) * 10_000
        };
        jobs.push(JobSpec {
            id: id as u32,
            arrival,
            iterations,
            workers: (0..workers)
                .map(|_| WorkerDemand {
                    duration: r.random_range(1..=10u64) * 10_000,
                    mem_gb: [2.0, 4.0, 6.0, 9.0, 12.0][r.random_range(0..5)],
                    compute: [1.0, 0.5, 0.25][r.random_range(0..3)],
                })
                .collect(),
            model_size_mb: r.random_range(1..=20u32) as f64 * 10.0,
        });
    }
    jobs.sort_by_key(|j| (j.arrival, j.id));
    (jobs, machines)
}

/// One oracle trial: SPB error, baseline error, per-chunk noise, harmonic sum.
type Row = (f64, f64, Vec<f64>, f64);

/// Contributors per input-side chunk, counted by enumerating every worker's
/// suffix layer by layer. `None` marks a chunk with no layers (`k > L`).
pub fn coverage_oracle(k: usize, layers: usize) -> Result<Vec<Option<usize>>> {
    if k == 0 || layers == 0 || k > 64 || layers > 64 {
        return arg(format!(
            "coverage oracle needs 1 ≤ k, L ≤ 64 (got k={k}, L={layers})"
        ));
    }
    let depth = |j: usize| (j * layers).div_ceil(k);
    let per_layer: Vec<usize> = (0..layers)
        .map(|l| (1..=k).filter(|&j| l >= layers - depth(j)).count())
        .collect();
    let mut out = Vec::with_capacity(k);
    for m in 1..=k {
        let lo = layers - depth(k - m + 1);
        let hi = layers - depth(k - m);
        let counts: Vec<usize> = per_layer[lo..hi].to_vec();
        match counts.first() {
            None => out.push(None),
            Some(&c) if counts.iter().all(|&x| x == c) => out.push(Some(c)),
            Some(_) => {
                return Err(Error::Internal(format!(
                    "chunk {m} mixes contributor counts {counts:?}"
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceOracle {
    /// Direct estimate of `E‖∇f − g̃‖²` for the SPB aggregate.
    pub spb: MeanSe,
    /// All workers sending full gradients.
    pub baseline: MeanSe,
    /// Per-sample noise `p̂_m` of each input-side chunk.
    pub chunk_p: Vec<MeanSe>,
    /// `Σ_m (k/(mB)) p̂_m`, estimated per drawn sample.
    pub harmonic: MeanSe,
}

/// Independent Monte-Carlo estimates of the SPB noise at the model's current
/// parameters. Trial `t` draws worker `j`'s batch from the same seed stream
/// as the library estimator, but averages per-sample gradients and weighs
/// layers by enumerated coverage.
pub fn variance_oracle(
    model: &LayeredModel,
    cfg: &SpbConfig,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<VarianceOracle> {
    cfg.validate()?;
    if trials == 0 {
        return arg("need at least one trial");
    }
    let k = cfg.workers;
    let per = cfg.batch / k;
    let n = model.num_samples();
    let layers = model.num_layers();
    let truth = model.full_gradient();
    let depth = |j: usize| (j * layers).div_ceil(k);
    let covers = |j: usize, l: usize| l >= layers - depth(j);
    // input-side chunk of each layer and its contributor count
    let chunk_of: Vec<usize> = (0..layers)
        .map(|l| (1..=k).filter(|&j| covers(j, l)).count())
        .collect();

    let batch_grad = |idx: &[usize]| -> Vec<Vec<f64>> {
        let mut acc: Vec<Vec<f64>> = truth.iter().map(|b| vec![0.0; b.len()]).collect();
        for &i in idx {
            for (a, g) in acc.iter_mut().zip(model.sample_gradient(i)) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        for a in &mut acc {
            for x in a.iter_mut() {
                *x /= idx.len() as f64;
            }
        }
        acc
    };

    let trial = |t: usize| -> (f64, f64, Vec<f64>, f64) {
        let ts = rng::derive(seed, t as u64);
        let grads: Vec<Vec<Vec<f64>>> = (1..=k)
            .map(|j| {
                let mut r = rng::stream(ts, j as u64);
                let idx: Vec<usize> = (0..per).map(|_| r.random_range(0..n)).collect();
                batch_grad(&idx)
            })
            .collect();
        let (mut spb, mut base) = (0.0, 0.0);
        for l in 0..layers {
            for c in 0..truth[l].len() {
                let mut s = 0.0;
                let mut all = 0.0;
                let mut m = 0usize;
                for (j, g) in grads.iter().enumerate() {
                    all += g[l][c];
                    if covers(j + 1, l) {
                        s += g[l][c];
                        m += 1;
                    }
                }
                let e = truth[l][c] - s / m as f64;
                spb += e * e;
                let e = truth[l][c] - all / k as f64;
                base += e * e;
            }
        }
        // one extra sample for the per-chunk noise
        let mut r = rng::stream(ts, u64::MAX);
        let g = model.sample_gradient(r.random_range(0..n));
        let mut chunks = vec![0.0; k];
        for l in 0..layers {
            for c in 0..truth[l].len() {
                let e = g[l][c] - truth[l][c];
                chunks[chunk_of[l] - 1] += e * e;
            }
        }
        let harmonic = chunks
            .iter()
            .enumerate()
            .map(|(i, p)| k as f64 / ((i + 1) * cfg.batch) as f64 * p)
            .sum();
        (spb, base, chunks, harmonic)
    };
    let rows = map_indexed(exec, trials, trial);
    let col =
        |f: &dyn Fn(&Row) -> f64| MeanSe::from_samples(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(VarianceOracle {
        spb: col(&|r| r.0),
        baseline: col(&|r| r.1),
        chunk_p: (0..k).map(|i| col(&|r| r.2[i])).collect(),
        harmonic: col(&|r| r.3),
    })
}
