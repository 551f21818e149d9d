use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::Micros;

use super::timeline::MachineTimeline;
use super::{JobId, JobSpec, MachineId, SchedulerConfig, Segment, WorkerId};

const EPS: f64 = 1e-9;

/// Job-level baselines: every worker of a job holds a machine for the
/// whole run and iterations advance in lock step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GangPolicy {
    /// Strict arrival order, one job per GPU.
    Fifo,
    /// Least attained GPU-time first, preempting at iteration boundaries,
    /// re-ranked every interval.
    Las,
    /// First-fit-decreasing over (workers, mem × duration), co-locating
    /// jobs whose memory and compute fit.
    Packing,
}

impl GangPolicy {
    fn exclusive(self) -> bool {
        !matches!(self, GangPolicy::Packing)
    }
}

/// Something the driver must schedule on the event queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GangEvent {
    /// The run started under `version` completes the job at `at` unless it
    /// is preempted first (the version then no longer matches).
    Finish {
        job: JobId,
        at: Micros,
        version: u64,
    },
}

#[derive(Debug, Clone)]
struct Machine {
    mem_cap: f64,
    mem: f64,
    compute: f64,
    residents: u32,
    /// Released by a preemption that only takes effect at this time.
    free_at: Micros,
}

#[derive(Debug, Clone)]
struct Run {
    start: Micros,
    machines: Vec<MachineId>,
    surcharges: Vec<Micros>,
    /// Length of the first iteration, surcharges included.
    first: Micros,
    period: Micros,
    iterations: u32,
}

impl Run {
    fn end(&self) -> Micros {
        self.start + self.first + (self.iterations as Micros - 1) * self.period
    }

    /// Iterations finished by the first boundary at or after `t`.
    fn boundary_after(&self, t: Micros) -> (u32, Micros) {
        if t <= self.start + self.first {
            return (1, self.start + self.first);
        }
        let rest = (t - self.start - self.first).div_ceil(self.period) as u32;
        let done = (1 + rest).min(self.iterations);
        (
            done,
            self.start + self.first + (done as Micros - 1) * self.period,
        )
    }
}

#[derive(Debug, Clone)]
struct Job {
    spec: JobSpec,
    done: u32,
    /// GPU-time attained by completed runs.
    attained: u128,
    run: Option<Run>,
    version: u64,
    last: Vec<Option<MachineId>>,
    migrations: u64,
    finished: Option<Micros>,
}

impl Job {
    fn attained_at(&self, now: Micros) -> u128 {
        let running = self
            .run
            .as_ref()
            .map(|r| now.saturating_sub(r.start) as u128 * r.machines.len() as u128)
            .unwrap_or(0);
        self.attained + running
    }

    fn size_key(&self) -> f64 {
        self.spec
            .workers
            .iter()
            .map(|w| w.mem_gb * w.duration as f64)
            .fold(0.0, f64::max)
    }
}

/// Event-driven gang scheduler: decisions happen on arrivals, completions
/// and ticks; the driver feeds those in and schedules the returned events.
#[derive(Debug, Clone)]
pub struct GangScheduler {
    policy: GangPolicy,
    cfg: SchedulerConfig,
    machines: Vec<Machine>,
    jobs: Vec<Job>,
    index: HashMap<JobId, usize>,
    record: bool,
    segments: Vec<Segment>,
    completions: Vec<(JobId, Micros)>,
    busy: Vec<Micros>,
}

impl GangScheduler {
    pub fn new(
        policy: GangPolicy,
        machines: &[MachineTimeline],
        cfg: SchedulerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if machines.is_empty() {
            return Err(Error::Argument("need at least one machine".into()));
        }
        let ms = machines
            .iter()
            .map(|m| Machine {
                mem_cap: m.mem_capacity_gb(),
                mem: 0.0,
                compute: 0.0,
                residents: 0,
                free_at: 0,
            })
            .collect();
        Ok(GangScheduler {
            policy,
            cfg,
            machines: ms,
            jobs: Vec::new(),
            index: HashMap::new(),
            record: true,
            segments: Vec::new(),
            completions: Vec::new(),
            busy: vec![0; machines.len()],
        })
    }

    pub fn record_history(mut self, on: bool) -> Self {
        self.record = on;
        self
    }

    pub fn policy(&self) -> GangPolicy {
        self.policy
    }

    /// Admits a job and makes a scheduling decision. Fails without side
    /// effects when the job can never be placed.
    pub fn on_arrival(&mut self, spec: JobSpec, now: Micros) -> Result<Vec<GangEvent>> {
        if self.index.contains_key(&spec.id) {
            return Err(Error::Argument(format!("job {} added twice", spec.id)));
        }
        if spec.workers.is_empty() || spec.iterations == 0 {
            return Err(Error::Argument(format!("job {} has no work", spec.id)));
        }
        self.check_feasible(&spec)?;
        let k = spec.workers.len();
        self.index.insert(spec.id, self.jobs.len());
        self.jobs.push(Job {
            spec,
            done: 0,
            attained: 0,
            run: None,
            version: 0,
            last: vec![None; k],
            migrations: 0,
            finished: None,
        });
        Ok(self.decide(now))
    }

    fn check_feasible(&self, spec: &JobSpec) -> Result<()> {
        let unschedulable = |w: usize| Error::Unschedulable {
            job: spec.id,
            worker: w as WorkerId,
            iteration: 1,
            mem_gb: spec.workers[w].mem_gb,
        };
        let mut empty: Vec<Machine> = self
            .machines
            .iter()
            .map(|m| Machine {
                mem: 0.0,
                compute: 0.0,
                residents: 0,
                free_at: 0,
                ..m.clone()
            })
            .collect();
        for (w, d) in spec.workers.iter().enumerate() {
            if d.compute > 1.0 + EPS {
                return Err(unschedulable(w));
            }
            let slot = (0..empty.len()).find(|&i| self.fits(&empty[i], d.mem_gb, d.compute));
            match slot {
                Some(i) => {
                    empty[i].mem += d.mem_gb;
                    empty[i].compute += d.compute;
                    empty[i].residents += 1;
                }
                None => return Err(unschedulable(w)),
            }
        }
        Ok(())
    }

    fn fits(&self, m: &Machine, mem: f64, compute: f64) -> bool {
        if self.policy.exclusive() {
            return m.residents == 0 && mem <= m.mem_cap + EPS;
        }
        m.mem + mem <= m.mem_cap + EPS
            && m.compute + compute <= 1.0 + EPS
            && self
                .cfg
                .max_coresident
                .is_none_or(|cap| (m.residents as usize) < cap)
    }

    /// Handles a completion event; stale versions are ignored.
    pub fn on_finish(&mut self, job: JobId, version: u64, now: Micros) -> Vec<GangEvent> {
        let Some(&idx) = self.index.get(&job) else {
            return Vec::new();
        };
        if self.jobs[idx].version != version || self.jobs[idx].run.is_none() {
            return Vec::new();
        }
        let iterations = self.jobs[idx]
            .run
            .as_ref()
            .map(|r| r.iterations)
            .unwrap_or(0);
        self.stop(idx, iterations, now);
        let j = &mut self.jobs[idx];
        j.finished = Some(now);
        self.completions.push((job, now));
        self.decide(now)
    }

    pub fn on_tick(&mut self, now: Micros) -> Vec<GangEvent> {
        self.decide(now)
    }

    /// Ends the current run after `done` iterations, releasing its machines
    /// at the end of the last one.
    fn stop(&mut self, idx: usize, done: u32, now: Micros) {
        let run = self.jobs[idx].run.take().expect("stopping a running job");
        let release = if done == 0 {
            run.start
        } else {
            run.start + run.first + (done as Micros - 1) * run.period
        };
        let job = &mut self.jobs[idx];
        for (w, &m) in run.machines.iter().enumerate() {
            let d = job.spec.workers[w];
            let mach = &mut self.machines[m as usize];
            mach.mem -= d.mem_gb;
            mach.compute -= d.compute;
            mach.residents -= 1;
            if mach.residents == 0 {
                mach.mem = 0.0;
                mach.compute = 0.0;
            }
            mach.free_at = mach.free_at.max(release.max(now));
            if done == 0 {
                continue;
            }
            let sur = run.surcharges[w];
            self.busy[m as usize] += done as Micros * d.duration + sur;
            if self.record {
                let seg = |first_iteration, iterations, start, period, surcharge| Segment {
                    job: job.spec.id,
                    worker: w as WorkerId,
                    machine: m,
                    first_iteration,
                    iterations,
                    start,
                    period,
                    base: d.duration,
                    surcharge,
                    migrated: surcharge > 0 || job.last[w].is_some_and(|p| p != m),
                };
                let first_iteration = job.done + 1;
                if run.first == run.period {
                    self.segments
                        .push(seg(first_iteration, done, run.start, run.period, sur));
                } else {
                    self.segments
                        .push(seg(first_iteration, 1, run.start, run.first, sur));
                    if done > 1 {
                        let mut rest = seg(
                            first_iteration + 1,
                            done - 1,
                            run.start + run.first,
                            run.period,
                            0,
                        );
                        rest.migrated = false;
                        self.segments.push(rest);
                    }
                }
            }
        }
        if done > 0 {
            for (w, &m) in run.machines.iter().enumerate() {
                if job.last[w].is_some_and(|p| p != m) {
                    job.migrations += 1;
                }
                job.last[w] = Some(m);
            }
        }
        job.attained += (release.saturating_sub(run.start)) as u128 * run.machines.len() as u128;
        job.done += done;
        job.version += 1;
    }

    fn decide(&mut self, now: Micros) -> Vec<GangEvent> {
        match self.policy {
            GangPolicy::Fifo => self.decide_fifo(now),
            GangPolicy::Las => self.decide_las(now),
            GangPolicy::Packing => self.decide_packing(now),
        }
    }

    fn waiting(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.jobs.len())
            .filter(|&i| self.jobs[i].run.is_none() && self.jobs[i].finished.is_none())
    }

    fn decide_fifo(&mut self, now: Micros) -> Vec<GangEvent> {
        let mut events = Vec::new();
        let queue: Vec<usize> = self.waiting().collect();
        for idx in queue {
            match self.pick_machines(idx, now) {
                Some(ms) => events.push(self.start(idx, ms, now)),
                None => break,
            }
        }
        events
    }

    fn decide_packing(&mut self, now: Micros) -> Vec<GangEvent> {
        let mut queue: Vec<usize> = self.waiting().collect();
        queue.sort_by(|&a, &b| {
            let (ja, jb) = (&self.jobs[a], &self.jobs[b]);
            jb.spec
                .workers
                .len()
                .cmp(&ja.spec.workers.len())
                .then(jb.size_key().total_cmp(&ja.size_key()))
                .then(ja.spec.arrival.cmp(&jb.spec.arrival))
                .then(ja.spec.id.cmp(&jb.spec.id))
        });
        let mut events = Vec::new();
        for idx in queue {
            if let Some(ms) = self.pick_machines(idx, now) {
                events.push(self.start(idx, ms, now));
            }
        }
        events
    }

    fn decide_las(&mut self, now: Micros) -> Vec<GangEvent> {
        let mut active: Vec<usize> = (0..self.jobs.len())
            .filter(|&i| self.jobs[i].finished.is_none())
            .collect();
        active.sort_by_key(|&i| {
            let j = &self.jobs[i];
            (j.attained_at(now), j.spec.arrival, j.spec.id)
        });
        let mut capacity = self.machines.len();
        let mut admitted = vec![false; self.jobs.len()];
        for &i in &active {
            let k = self.jobs[i].spec.workers.len();
            if k <= capacity {
                capacity -= k;
                admitted[i] = true;
            }
        }
        for &i in &active {
            if admitted[i] {
                continue;
            }
            let Some(run) = &self.jobs[i].run else {
                continue;
            };
            if run.start >= now {
                continue;
            }
            let (done, _) = run.boundary_after(now);
            if done < run.iterations {
                self.stop(i, done, now);
            }
        }
        let mut events = Vec::new();
        for &i in &active {
            if admitted[i] && self.jobs[i].run.is_none() {
                if let Some(ms) = self.pick_machines(i, now) {
                    events.push(self.start(i, ms, now));
                }
            }
        }
        events
    }

    /// Machines for every worker of job `idx`, or `None` if it does not fit
    /// right now. Exclusive policies prefer machines free soonest, then the
    /// worker's previous machine, then the lowest id.
    fn pick_machines(&self, idx: usize, now: Micros) -> Option<Vec<MachineId>> {
        let job = &self.jobs[idx];
        if self.policy.exclusive() {
            let mut free: Vec<usize> = (0..self.machines.len())
                .filter(|&m| self.machines[m].residents == 0)
                .collect();
            if free.len() < job.spec.workers.len() {
                return None;
            }
            let mut chosen = Vec::with_capacity(job.spec.workers.len());
            for (w, d) in job.spec.workers.iter().enumerate() {
                let prev = job.last[w].map(usize::from);
                let pos = free
                    .iter()
                    .enumerate()
                    .filter(|&(_, &m)| d.mem_gb <= self.machines[m].mem_cap + EPS)
                    .min_by_key(|&(_, &m)| (self.machines[m].free_at.max(now), Some(m) != prev, m))
                    .map(|(p, _)| p)?;
                chosen.push(free.remove(pos) as MachineId);
            }
            return Some(chosen);
        }
        let mut trial: Vec<(f64, f64, u32)> = self
            .machines
            .iter()
            .map(|m| (m.mem, m.compute, m.residents))
            .collect();
        let mut chosen = Vec::with_capacity(job.spec.workers.len());
        for d in &job.spec.workers {
            let m = (0..trial.len()).find(|&i| {
                let probe = Machine {
                    mem: trial[i].0,
                    compute: trial[i].1,
                    residents: trial[i].2,
                    ..self.machines[i].clone()
                };
                self.fits(&probe, d.mem_gb, d.compute)
            })?;
            trial[m].0 += d.mem_gb;
            trial[m].1 += d.compute;
            trial[m].2 += 1;
            chosen.push(m as MachineId);
        }
        Some(chosen)
    }

    fn start(&mut self, idx: usize, machines: Vec<MachineId>, now: Micros) -> GangEvent {
        let start = machines
            .iter()
            .map(|&m| self.machines[m as usize].free_at)
            .max()
            .unwrap_or(0)
            .max(now);
        let job = &self.jobs[idx];
        let surcharges: Vec<Micros> = machines
            .iter()
            .enumerate()
            .map(|(w, &m)| match job.last[w] {
                Some(p) if p != m => self.cfg.migration_cost(job.spec.model_size_mb),
                _ => 0,
            })
            .collect();
        let period = job.spec.iteration_time();
        let first = job
            .spec
            .workers
            .iter()
            .zip(&surcharges)
            .map(|(d, s)| d.duration + s)
            .max()
            .unwrap_or(period);
        for (w, &m) in machines.iter().enumerate() {
            let d = job.spec.workers[w];
            let mach = &mut self.machines[m as usize];
            mach.mem += d.mem_gb;
            mach.compute += d.compute;
            mach.residents += 1;
        }
        let run = Run {
            start,
            machines,
            surcharges,
            first,
            period,
            iterations: job.spec.iterations - job.done,
        };
        let at = run.end();
        let job = &mut self.jobs[idx];
        job.run = Some(run);
        GangEvent::Finish {
            job: job.spec.id,
            at,
            version: job.version,
        }
    }

    pub fn take_completions(&mut self) -> Vec<(JobId, Micros)> {
        std::mem::take(&mut self.completions)
    }

    pub fn is_idle(&self) -> bool {
        self.jobs.iter().all(|j| j.finished.is_some())
    }

    pub fn migrations(&self) -> Vec<(JobId, u64)> {
        self.jobs
            .iter()
            .map(|j| (j.spec.id, j.migrations))
            .collect()
    }

    pub fn busy_time(&self) -> &[Micros] {
        &self.busy
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn take_segments(&mut self) -> Vec<Segment> {
        std::mem::take(&mut self.segments)
    }
}
