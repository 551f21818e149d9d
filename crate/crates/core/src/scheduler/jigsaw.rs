use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::Micros;

use super::timeline::MachineTimeline;
use super::{
    Assignment, JobId, JobSpec, MachineId, PriorityDims, SchedulerConfig, Segment, TaskSpec,
    WorkerId,
};

/// Queue-wide maxima used to normalize priorities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueStats {
    pub max_mem_gb: f64,
    pub max_duration: Micros,
    pub max_compute: f64,
}

impl QueueStats {
    pub fn of<'a>(tasks: impl IntoIterator<Item = &'a TaskSpec>) -> Option<Self> {
        let mut it = tasks.into_iter().peekable();
        it.peek()?;
        let mut s = QueueStats {
            max_mem_gb: 0.0,
            max_duration: 0,
            max_compute: 0.0,
        };
        for t in it {
            s.max_mem_gb = s.max_mem_gb.max(t.demand.mem_gb);
            s.max_duration = s.max_duration.max(t.demand.duration);
            s.max_compute = s.max_compute.max(t.demand.compute);
        }
        Some(s)
    }
}

fn raw_key(task: &TaskSpec, dims: PriorityDims) -> f64 {
    let d = &task.demand;
    let base = d.mem_gb * d.duration as f64;
    match dims {
        PriorityDims::MemComputeDuration => base * d.compute,
        PriorityDims::MemDuration => base,
    }
}

/// Normalized product of the task's demands against the queue maxima, in
/// `(0, 1]`. Higher runs first.
pub fn priority(task: &TaskSpec, stats: &QueueStats, dims: PriorityDims) -> Result<f64> {
    if !(stats.max_mem_gb > 0.0 && stats.max_duration > 0 && stats.max_compute > 0.0) {
        return Err(Error::Internal(
            "priority over empty queue statistics".into(),
        ));
    }
    let d = &task.demand;
    let p = (d.mem_gb / stats.max_mem_gb) * (d.duration as f64 / stats.max_duration as f64);
    Ok(match dims {
        PriorityDims::MemComputeDuration => p * (d.compute / stats.max_compute),
        PriorityDims::MemDuration => p,
    })
}

/// Where and when a task would run on one machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub machine: MachineId,
    pub start: Micros,
    /// Demand duration plus any migration surcharge.
    pub effective: Micros,
    pub surcharge: Micros,
}

impl Slot {
    pub fn end(&self) -> Micros {
        self.start + self.effective
    }
}

fn surcharge_on(task: &TaskSpec, machine: MachineId, cfg: &SchedulerConfig) -> Micros {
    match task.prev_machine {
        Some(p) if p != machine => cfg.migration_cost(task.model_size_mb),
        _ => 0,
    }
}

fn fit_before(
    task: &TaskSpec,
    machine: &MachineTimeline,
    cfg: &SchedulerConfig,
    give_up_at: Micros,
) -> Option<Slot> {
    let surcharge = surcharge_on(task, machine.machine_id, cfg);
    let effective = task.demand.duration + surcharge;
    let start = machine.earliest_fit(
        task.ready_time,
        effective,
        task.demand.mem_gb,
        task.demand.compute,
        give_up_at,
    )?;
    Some(Slot {
        machine: machine.machine_id,
        start,
        effective,
        surcharge,
    })
}

/// Earliest slot for `task` on `machine`, or `None` if it can never fit.
pub fn earliest_start(
    task: &TaskSpec,
    machine: &MachineTimeline,
    cfg: &SchedulerConfig,
) -> Option<Slot> {
    fit_before(task, machine, cfg, Micros::MAX)
}

/// Best slot over all machines: earliest end (so a migration only wins
/// when it actually finishes sooner), ties to the previous machine, then
/// the lowest id. Slots starting at or after `horizon` are ignored.
fn best_slot(
    task: &TaskSpec,
    machines: &[MachineTimeline],
    cfg: &SchedulerConfig,
    horizon: Micros,
) -> Option<Slot> {
    let prev = task
        .prev_machine
        .map(usize::from)
        .filter(|&p| p < machines.len());
    let order = prev
        .into_iter()
        .chain((0..machines.len()).filter(|&i| Some(i) != prev));
    let mut best: Option<Slot> = None;
    for i in order {
        let m = &machines[i];
        let give_up_at = match best {
            None => horizon,
            Some(b) => {
                // only a strictly earlier end can replace the incumbent
                let eff = task.demand.duration + surcharge_on(task, m.machine_id, cfg);
                match b.end().checked_sub(eff) {
                    Some(limit) => limit.min(horizon),
                    None => continue,
                }
            }
        };
        if let Some(s) = fit_before(task, m, cfg, give_up_at) {
            let better = match best {
                None => true,
                Some(b) => s.end() < b.end(),
            };
            if better {
                best = Some(s);
            }
        }
    }
    best
}

fn commit(task: &TaskSpec, slot: Slot, machines: &mut [MachineTimeline]) -> Assignment {
    machines[slot.machine as usize].reserve(
        slot.start,
        slot.end(),
        task.demand.mem_gb,
        task.demand.compute,
    );
    Assignment {
        job: task.job_id,
        worker: task.worker_id,
        iteration: task.iteration,
        machine: slot.machine,
        start: slot.start,
        end: slot.end(),
        base: task.demand.duration,
        surcharge: slot.surcharge,
        migrated: slot.surcharge > 0 || task.prev_machine.is_some_and(|p| p != slot.machine),
    }
}

fn unschedulable(task: &TaskSpec) -> Error {
    Error::Unschedulable {
        job: task.job_id,
        worker: task.worker_id,
        iteration: task.iteration,
        mem_gb: task.demand.mem_gb,
    }
}

/// Places `task` on the machine where it finishes earliest and commits the
/// reservation.
pub fn place(
    task: &TaskSpec,
    machines: &mut [MachineTimeline],
    cfg: &SchedulerConfig,
) -> Result<Assignment> {
    let slot = best_slot(task, machines, cfg, Micros::MAX).ok_or_else(|| unschedulable(task))?;
    Ok(commit(task, slot, machines))
}

/// How a popped task picks its machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Placement {
    #[default]
    Earliest,
    /// Uniformly random among machines that can host the task; the ablation
    /// against affinity-aware placement.
    Random { seed: u64 },
}

#[derive(Debug, Clone)]
struct Queued {
    key: f64,
    task: TaskSpec,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        let id = |q: &Queued| (q.task.job_id, q.task.worker_id, q.task.iteration);
        self.key
            .total_cmp(&other.key)
            .then_with(|| id(other).cmp(&id(self)))
    }
}

#[derive(Debug, Clone)]
struct JobState {
    spec: JobSpec,
    iteration: u32,
    placed: usize,
    iteration_end: Micros,
    prev: Vec<Option<MachineId>>,
    migrations: u64,
    finished: Option<Micros>,
}

/// The iteration-level scheduler: a priority queue of dependency-ready
/// worker-iterations placed greedily into per-machine timelines, one
/// planning interval at a time.
#[derive(Debug, Clone)]
pub struct Jigsaw {
    cfg: SchedulerConfig,
    placement: Placement,
    rng: Option<Rng>,
    machines: Vec<MachineTimeline>,
    jobs: Vec<JobState>,
    index: std::collections::HashMap<JobId, usize>,
    queue: BinaryHeap<Queued>,
    record: bool,
    segments: Vec<Segment>,
    completions: Vec<(JobId, Micros)>,
    busy: Vec<Micros>,
}

impl Jigsaw {
    pub fn new(
        machines: Vec<MachineTimeline>,
        cfg: SchedulerConfig,
        placement: Placement,
    ) -> Result<Self> {
        cfg.validate()?;
        if machines.is_empty() {
            return Err(Error::Argument("need at least one machine".into()));
        }
        let rng = match placement {
            Placement::Earliest => None,
            Placement::Random { seed } => Some(rng::stream(seed, 0)),
        };
        let machines: Vec<_> = machines
            .into_iter()
            .map(|m| m.with_max_coresident(cfg.max_coresident))
            .collect();
        let n = machines.len();
        Ok(Jigsaw {
            cfg,
            placement,
            rng,
            machines,
            jobs: Vec::new(),
            index: Default::default(),
            queue: BinaryHeap::new(),
            record: true,
            segments: Vec::new(),
            completions: Vec::new(),
            busy: vec![0; n],
        })
    }

    /// Keep (default) or drop the per-task history. Metrics that the
    /// scheduler tracks itself stay available either way.
    pub fn record_history(mut self, on: bool) -> Self {
        self.record = on;
        self
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn machines(&self) -> &[MachineTimeline] {
        &self.machines
    }

    /// Admits a job and queues its first iteration. Fails without side
    /// effects when some worker fits on no machine.
    pub fn add_job(&mut self, spec: JobSpec) -> Result<()> {
        if self.index.contains_key(&spec.id) {
            return Err(Error::Argument(format!("job {} added twice", spec.id)));
        }
        if spec.workers.is_empty() || spec.iterations == 0 {
            return Err(Error::Argument(format!("job {} has no work", spec.id)));
        }
        for (w, d) in spec.workers.iter().enumerate() {
            if !self
                .machines
                .iter()
                .any(|m| m.can_host(d.mem_gb, d.compute))
            {
                return Err(Error::Unschedulable {
                    job: spec.id,
                    worker: w as WorkerId,
                    iteration: 1,
                    mem_gb: d.mem_gb,
                });
            }
        }
        let k = spec.workers.len();
        let idx = self.jobs.len();
        self.index.insert(spec.id, idx);
        self.jobs.push(JobState {
            iteration: 1,
            placed: 0,
            iteration_end: spec.arrival,
            prev: vec![None; k],
            migrations: 0,
            finished: None,
            spec,
        });
        self.enqueue_iteration(idx);
        Ok(())
    }

    fn enqueue_iteration(&mut self, idx: usize) {
        let job = &self.jobs[idx];
        for (w, d) in job.spec.workers.iter().enumerate() {
            let task = TaskSpec {
                job_id: job.spec.id,
                worker_id: w as WorkerId,
                iteration: job.iteration,
                demand: *d,
                model_size_mb: job.spec.model_size_mb,
                prev_machine: job.prev[w],
                ready_time: job.iteration_end,
            };
            let key = raw_key(&task, self.cfg.priority_dims);
            self.queue.push(Queued { key, task });
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Statistics of the tasks currently queued.
    pub fn queue_stats(&self) -> Option<QueueStats> {
        QueueStats::of(self.queue.iter().map(|q| &q.task))
    }

    /// Plans `[now, now + T)`: pops tasks in priority order and places each
    /// one; completing an iteration queues the job's next one. Tasks that
    /// cannot start before the horizon stay queued.
    pub fn schedule_interval(&mut self, now: Micros) -> Result<Vec<Assignment>> {
        let horizon = now.saturating_add(self.cfg.interval);
        for m in &mut self.machines {
            m.prune_before(now);
        }
        let mut deferred = Vec::new();
        let mut planned = Vec::new();
        while let Some(mut q) = self.queue.pop() {
            q.task.ready_time = q.task.ready_time.max(now);
            if q.task.ready_time >= horizon {
                deferred.push(q);
                continue;
            }
            let slot = match self.placement {
                Placement::Earliest => best_slot(&q.task, &self.machines, &self.cfg, horizon),
                Placement::Random { .. } => self.random_slot(&q.task, horizon)?,
            };
            let Some(slot) = slot else {
                deferred.push(q);
                continue;
            };
            let a = commit(&q.task, slot, &mut self.machines);
            self.on_placed(&a);
            planned.push(a);
        }
        self.queue.extend(deferred);
        Ok(planned)
    }

    fn random_slot(&mut self, task: &TaskSpec, horizon: Micros) -> Result<Option<Slot>> {
        let hosts: Vec<usize> = (0..self.machines.len())
            .filter(|&i| self.machines[i].can_host(task.demand.mem_gb, task.demand.compute))
            .collect();
        if hosts.is_empty() {
            return Err(unschedulable(task));
        }
        let rng = self
            .rng
            .as_mut()
            .expect("random placement owns a generator");
        let pick = hosts[rng.random_range(0..hosts.len())];
        Ok(fit_before(task, &self.machines[pick], &self.cfg, horizon))
    }

    fn on_placed(&mut self, a: &Assignment) {
        self.busy[a.machine as usize] += a.end - a.start;
        if self.record {
            self.segments.push(Segment::from_assignment(a));
        }
        let idx = self.index[&a.job];
        let job = &mut self.jobs[idx];
        job.prev[a.worker as usize] = Some(a.machine);
        job.migrations += a.migrated as u64;
        job.placed += 1;
        job.iteration_end = job.iteration_end.max(a.end);
        if job.placed == job.spec.workers.len() {
            job.placed = 0;
            if job.iteration == job.spec.iterations {
                job.finished = Some(job.iteration_end);
                self.completions.push((job.spec.id, job.iteration_end));
            } else {
                job.iteration += 1;
                self.enqueue_iteration(idx);
            }
        }
    }

    /// Jobs whose last iteration was planned since the previous call, with
    /// their finish times.
    pub fn take_completions(&mut self) -> Vec<(JobId, Micros)> {
        std::mem::take(&mut self.completions)
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Migrated worker-iterations per job, in admission order.
    pub fn migrations(&self) -> Vec<(JobId, u64)> {
        self.jobs
            .iter()
            .map(|j| (j.spec.id, j.migrations))
            .collect()
    }

    /// Committed busy time per machine, surcharges included.
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
