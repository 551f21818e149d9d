//! Iteration-level (Jigsaw) scheduling over per-machine reservation
//! timelines, the job-level gang baselines it is compared against, and a
//! checker for the invariants every executed plan must satisfy.

mod gang;
mod jigsaw;
mod timeline;
mod validate;

pub use gang::{GangEvent, GangPolicy, GangScheduler};
pub use jigsaw::{earliest_start, place, priority, Jigsaw, Placement, QueueStats, Slot};
pub use timeline::{MachineTimeline, Usage};
pub use validate::{validate_schedule, Violation};

use std::io::Write as _;
use std::path::Path;

use crate::cost_model::{CostModel, TaskDemand};
use crate::error::{arg, Result};
use crate::io::write_atomic;
use crate::{ms_to_us, Micros};

pub type MachineId = u16;
pub type JobId = u32;
pub type WorkerId = u16;

/// A training job as submitted: its model, worker count and whether it
/// trains with SPB.
#[derive(Debug, Clone, PartialEq)]
pub struct JobDag {
    pub job_id: JobId,
    pub arrival: Micros,
    pub model_name: String,
    pub workers: usize,
    pub total_iterations: u32,
    pub spb_enabled: bool,
    /// Backprop share of each worker: `j/k` under SPB, otherwise 1.
    pub fractions: Vec<f64>,
}

impl JobDag {
    pub fn new(
        job_id: JobId,
        arrival: Micros,
        model_name: impl Into<String>,
        workers: usize,
        total_iterations: u32,
        spb_enabled: bool,
    ) -> Result<Self> {
        if workers == 0 {
            return arg(format!("job {job_id}: worker count must be at least 1"));
        }
        if total_iterations == 0 {
            return arg(format!("job {job_id}: iteration count must be at least 1"));
        }
        let fractions = (1..=workers)
            .map(|j| {
                if spb_enabled {
                    j as f64 / workers as f64
                } else {
                    1.0
                }
            })
            .collect();
        Ok(JobDag {
            job_id,
            arrival,
            model_name: model_name.into(),
            workers,
            total_iterations,
            spb_enabled,
            fractions,
        })
    }

    pub fn without_spb(&self) -> Self {
        JobDag {
            spb_enabled: false,
            fractions: vec![1.0; self.workers],
            ..self.clone()
        }
    }
}

/// Resources of one worker's task, in scheduler units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkerDemand {
    pub duration: Micros,
    pub mem_gb: f64,
    pub compute: f64,
}

impl WorkerDemand {
    pub fn from_demand(d: &TaskDemand) -> Self {
        WorkerDemand {
            duration: ms_to_us(d.duration_ms).max(1),
            mem_gb: d.peak_mem_gb,
            compute: d.compute_fraction,
        }
    }
}

/// A job with every demand resolved against the cost model.
#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub id: JobId,
    pub arrival: Micros,
    pub iterations: u32,
    pub workers: Vec<WorkerDemand>,
    /// Bytes moved when a worker changes machine.
    pub model_size_mb: f64,
}

impl JobSpec {
    pub fn resolve(dag: &JobDag, cost: &CostModel, comm_ms_per_mb: f64) -> Result<Self> {
        let entry = cost.get(&dag.model_name)?;
        let workers = dag
            .fractions
            .iter()
            .map(|&f| {
                entry
                    .demand_at(f, comm_ms_per_mb)
                    .map(|d| WorkerDemand::from_demand(&d))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(JobSpec {
            id: dag.job_id,
            arrival: dag.arrival,
            iterations: dag.total_iterations,
            workers,
            model_size_mb: entry.grad_size_mb,
        })
    }

    pub fn num_workers(&self) -> usize {
        self.workers.len()
    }

    /// Wall time of one iteration when every worker starts together.
    pub fn iteration_time(&self) -> Micros {
        self.workers.iter().map(|w| w.duration).max().unwrap_or(0)
    }

    pub fn worker_iterations(&self) -> u64 {
        self.workers.len() as u64 * self.iterations as u64
    }
}

/// Which resource dimensions enter the priority product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorityDims {
    #[default]
    MemComputeDuration,
    MemDuration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    /// Planning interval `T`.
    pub interval: Micros,
    /// Startup cost per MB of model moved to a new machine.
    pub gamma_ms_per_mb: f64,
    pub priority_dims: PriorityDims,
    /// Cap on tasks resident on one machine at once.
    pub max_coresident: Option<usize>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            interval: 60_000_000,
            gamma_ms_per_mb: 0.8,
            priority_dims: PriorityDims::default(),
            max_coresident: None,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return arg("scheduling interval must be positive");
        }
        if !(self.gamma_ms_per_mb >= 0.0 && self.gamma_ms_per_mb.is_finite()) {
            return arg("gamma must be non-negative");
        }
        if self.max_coresident == Some(0) {
            return arg("max co-resident tasks must be at least 1");
        }
        Ok(())
    }

    pub fn migration_cost(&self, model_size_mb: f64) -> Micros {
        ms_to_us(self.gamma_ms_per_mb * model_size_mb)
    }
}

/// One worker-iteration waiting to be placed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub job_id: JobId,
    pub worker_id: WorkerId,
    pub iteration: u32,
    pub demand: WorkerDemand,
    pub model_size_mb: f64,
    pub prev_machine: Option<MachineId>,
    /// All tasks of the previous iteration have ended by then.
    pub ready_time: Micros,
}

/// A committed placement of one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub job: JobId,
    pub worker: WorkerId,
    pub iteration: u32,
    pub machine: MachineId,
    pub start: Micros,
    pub end: Micros,
    /// Compute time without the migration surcharge.
    pub base: Micros,
    pub surcharge: Micros,
    pub migrated: bool,
}

/// Consecutive iterations of one worker on one machine, started every
/// `period`. Only the first iteration may carry a migration surcharge.
/// Jigsaw emits one segment per task; gang policies one per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub job: JobId,
    pub worker: WorkerId,
    pub machine: MachineId,
    pub first_iteration: u32,
    pub iterations: u32,
    pub start: Micros,
    pub period: Micros,
    pub base: Micros,
    pub surcharge: Micros,
    pub migrated: bool,
}

impl Segment {
    pub fn from_assignment(a: &Assignment) -> Self {
        Segment {
            job: a.job,
            worker: a.worker,
            machine: a.machine,
            first_iteration: a.iteration,
            iterations: 1,
            start: a.start,
            period: a.end - a.start,
            base: a.base,
            surcharge: a.surcharge,
            migrated: a.migrated,
        }
    }

    pub fn assignments(&self) -> impl Iterator<Item = Assignment> + '_ {
        (0..self.iterations).map(move |i| {
            let first = i == 0;
            let start = self.start + i as Micros * self.period;
            let surcharge = if first { self.surcharge } else { 0 };
            Assignment {
                job: self.job,
                worker: self.worker,
                iteration: self.first_iteration + i,
                machine: self.machine,
                start,
                end: start + self.base + surcharge,
                base: self.base,
                surcharge,
                migrated: first && self.migrated,
            }
        })
    }

    pub fn end(&self) -> Micros {
        self.start
            + (self.iterations as Micros - 1) * self.period
            + self.base
            + if self.iterations == 1 {
                self.surcharge
            } else {
                0
            }
    }

    /// Time the machine spends computing, surcharges included.
    pub fn busy(&self) -> Micros {
        self.iterations as Micros * self.base + self.surcharge
    }
}

/// Every executed task of a run, in execution-record order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub segments: Vec<Segment>,
}

impl History {
    pub fn assignments(&self) -> impl Iterator<Item = Assignment> + '_ {
        self.segments.iter().flat_map(Segment::assignments)
    }

    pub fn task_count(&self) -> u64 {
        self.segments.iter().map(|s| s.iterations as u64).sum()
    }

    /// Plan CSV: `job_id,worker_id,iteration,machine,start_ms,end_ms,migrated`,
    /// sorted by (start, machine, job, worker, iteration).
    pub fn write_plan_csv(&self, path: &Path) -> Result<()> {
        let mut rows: Vec<Assignment> = self.assignments().collect();
        rows.sort_by_key(|a| (a.start, a.machine, a.job, a.worker, a.iteration));
        let mut buf = Vec::with_capacity(rows.len() * 40);
        writeln!(
            buf,
            "job_id,worker_id,iteration,machine,start_ms,end_ms,migrated"
        )?;
        for a in rows {
            writeln!(
                buf,
                "{},{},{},{},{:.3},{:.3},{}",
                a.job,
                a.worker,
                a.iteration,
                a.machine,
                a.start as f64 / 1000.0,
                a.end as f64 / 1000.0,
                a.migrated as u8
            )?;
        }
        write_atomic(path, &buf)
    }
}
