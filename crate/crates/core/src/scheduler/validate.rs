use std::collections::HashMap;

use crate::Micros;

use super::timeline::MachineTimeline;
use super::{History, JobId, JobSpec, MachineId, SchedulerConfig, WorkerId};

const EPS: f64 = 1e-9;

/// One broken invariant of an executed plan.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// (a) Reserved memory or compute exceeds the machine at `time`.
    Capacity {
        machine: MachineId,
        time: Micros,
        mem_gb: f64,
        compute: f64,
    },
    /// (b) An iteration starts before the previous one has fully ended, or
    /// the first one before the job arrived.
    Dependency {
        job: JobId,
        iteration: u32,
        start: Micros,
        ready: Micros,
    },
    /// (c) A worker-iteration ran `count` times instead of once.
    Coverage {
        job: JobId,
        worker: WorkerId,
        iteration: u32,
        count: u32,
    },
    /// (d) Surcharge or migration flag inconsistent with the machine change.
    Migration {
        job: JobId,
        worker: WorkerId,
        iteration: u32,
        expected: Micros,
        actual: Micros,
    },
    /// The task's length is not its demand plus its surcharge.
    Duration {
        job: JobId,
        worker: WorkerId,
        iteration: u32,
    },
    UnknownJob(JobId),
    UnknownMachine(MachineId),
}

/// Checks capacity, dependency, exactly-once and migration invariants of a
/// complete plan. Never fails; an empty result means the plan is valid.
pub fn validate_schedule(
    plan: &History,
    machines: &[MachineTimeline],
    jobs: &[JobSpec],
    cfg: &SchedulerConfig,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let index: HashMap<JobId, usize> = jobs.iter().enumerate().map(|(i, j)| (j.id, i)).collect();
    let mut counts: Vec<Vec<u32>> = jobs
        .iter()
        .map(|j| vec![0; j.workers.len() * j.iterations as usize])
        .collect();
    let mut first_start: Vec<Vec<Micros>> = jobs
        .iter()
        .map(|j| vec![Micros::MAX; j.iterations as usize])
        .collect();
    let mut last_end: Vec<Vec<Micros>> = jobs
        .iter()
        .map(|j| vec![0; j.iterations as usize])
        .collect();
    let mut per_machine: Vec<Vec<(Micros, bool, f64, f64)>> = vec![Vec::new(); machines.len()];

    for a in plan.assignments() {
        let Some(&ji) = index.get(&a.job) else {
            out.push(Violation::UnknownJob(a.job));
            continue;
        };
        let job = &jobs[ji];
        let w = a.worker as usize;
        if w >= job.workers.len() || a.iteration == 0 || a.iteration > job.iterations {
            out.push(Violation::Coverage {
                job: a.job,
                worker: a.worker,
                iteration: a.iteration,
                count: 1,
            });
            continue;
        }
        let Some(slot) = per_machine.get_mut(a.machine as usize) else {
            out.push(Violation::UnknownMachine(a.machine));
            continue;
        };
        let d = job.workers[w];
        if a.base != d.duration || a.end != a.start + a.base + a.surcharge {
            out.push(Violation::Duration {
                job: a.job,
                worker: a.worker,
                iteration: a.iteration,
            });
        }
        slot.push((a.start, true, d.mem_gb, d.compute));
        slot.push((a.end, false, d.mem_gb, d.compute));
        let it = a.iteration as usize - 1;
        counts[ji][w * job.iterations as usize + it] += 1;
        first_start[ji][it] = first_start[ji][it].min(a.start);
        last_end[ji][it] = last_end[ji][it].max(a.end);
    }

    for (m, events) in per_machine.iter_mut().enumerate() {
        // releases sort before acquisitions at the same instant
        events.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        let cap = machines[m].mem_capacity_gb();
        let ccap = machines[m].compute_capacity();
        let (mut mem, mut compute) = (0.0f64, 0.0f64);
        let mut i = 0;
        while i < events.len() {
            let t = events[i].0;
            while i < events.len() && events[i].0 == t {
                let (_, acquire, dm, dc) = events[i];
                let sign = if acquire { 1.0 } else { -1.0 };
                mem += sign * dm;
                compute += sign * dc;
                i += 1;
            }
            if mem > cap + EPS || compute > ccap + EPS {
                out.push(Violation::Capacity {
                    machine: m as MachineId,
                    time: t,
                    mem_gb: mem,
                    compute,
                });
            }
        }
    }

    for (ji, job) in jobs.iter().enumerate() {
        let mut ready = job.arrival;
        for it in 0..job.iterations as usize {
            let s = first_start[ji][it];
            if s != Micros::MAX && s < ready {
                out.push(Violation::Dependency {
                    job: job.id,
                    iteration: it as u32 + 1,
                    start: s,
                    ready,
                });
            }
            ready = ready.max(last_end[ji][it]);
        }
        for (cell, &count) in counts[ji].iter().enumerate() {
            if count != 1 {
                out.push(Violation::Coverage {
                    job: job.id,
                    worker: (cell / job.iterations as usize) as WorkerId,
                    iteration: (cell % job.iterations as usize) as u32 + 1,
                    count,
                });
            }
        }
    }

    let mut order: Vec<usize> = (0..plan.segments.len())
        .filter(|&i| index.contains_key(&plan.segments[i].job))
        .collect();
    order.sort_by_key(|&i| {
        let s = &plan.segments[i];
        (s.job, s.worker, s.first_iteration)
    });
    let mut prev: Option<(JobId, WorkerId, MachineId)> = None;
    for a in order.iter().flat_map(|&i| plan.segments[i].assignments()) {
        let job = &jobs[index[&a.job]];
        let prev_machine = match prev {
            Some((j, w, m)) if j == a.job && w == a.worker => Some(m),
            _ => None,
        };
        let moved = prev_machine.is_some_and(|m| m != a.machine);
        let expected = if moved {
            cfg.migration_cost(job.model_size_mb)
        } else {
            0
        };
        if a.surcharge != expected || a.migrated != moved {
            out.push(Violation::Migration {
                job: a.job,
                worker: a.worker,
                iteration: a.iteration,
                expected,
                actual: a.surcharge,
            });
        }
        prev = Some((a.job, a.worker, a.machine));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::{Assignment, Segment, WorkerDemand};

    fn job() -> JobSpec {
        JobSpec {
            id: 1,
            arrival: 0,
            iterations: 2,
            workers: vec![
                WorkerDemand {
                    duration: 10,
                    mem_gb: 10.0,
                    compute: 1.0,
                };
                2
            ],
            model_size_mb: 100.0,
        }
    }

    fn seg(worker: WorkerId, iteration: u32, machine: MachineId, start: Micros) -> Segment {
        Segment::from_assignment(&Assignment {
            job: 1,
            worker,
            iteration,
            machine,
            start,
            end: start + 10,
            base: 10,
            surcharge: 0,
            migrated: false,
        })
    }

    fn machines() -> Vec<MachineTimeline> {
        (0..2).map(|i| MachineTimeline::new(i, 16.0)).collect()
    }

    #[test]
    fn valid_plan_passes() {
        let plan = History {
            segments: vec![
                seg(0, 1, 0, 0),
                seg(1, 1, 1, 0),
                seg(0, 2, 0, 10),
                seg(1, 2, 1, 10),
            ],
        };
        let v = validate_schedule(&plan, &machines(), &[job()], &SchedulerConfig::default());
        assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn overlapping_memory_is_reported() {
        let plan = History {
            segments: vec![
                seg(0, 1, 0, 0),
                seg(1, 1, 0, 5),
                seg(0, 2, 0, 15),
                seg(1, 2, 0, 25),
            ],
        };
        let v = validate_schedule(&plan, &machines(), &[job()], &SchedulerConfig::default());
        assert!(
            v.iter().any(|x| matches!(
                x,
                Violation::Capacity {
                    machine: 0,
                    time: 5,
                    ..
                }
            )),
            "{v:?}"
        );
    }

    #[test]
    fn early_iteration_is_reported() {
        let plan = History {
            segments: vec![
                seg(0, 1, 0, 0),
                seg(1, 1, 1, 5),
                seg(0, 2, 0, 10),
                seg(1, 2, 1, 15),
            ],
        };
        let v = validate_schedule(&plan, &machines(), &[job()], &SchedulerConfig::default());
        assert_eq!(
            v,
            vec![Violation::Dependency {
                job: 1,
                iteration: 2,
                start: 10,
                ready: 15
            }]
        );
    }

    #[test]
    fn missing_duplicate_and_unpaid_migration() {
        let plan = History {
            segments: vec![seg(0, 1, 0, 0), seg(0, 1, 0, 20), seg(0, 2, 1, 40)],
        };
        let v = validate_schedule(&plan, &machines(), &[job()], &SchedulerConfig::default());
        let cov: Vec<_> = v
            .iter()
            .filter_map(|x| match x {
                Violation::Coverage {
                    worker,
                    iteration,
                    count,
                    ..
                } => Some((*worker, *iteration, *count)),
                _ => None,
            })
            .collect();
        assert_eq!(cov, vec![(0, 1, 2), (1, 1, 0), (1, 2, 0)]);
        assert!(v.iter().any(|x| matches!(
            x,
            Violation::Migration {
                iteration: 2,
                expected: 80_000,
                ..
            }
        )));
    }
}
