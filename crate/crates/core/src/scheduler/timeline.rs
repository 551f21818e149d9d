use std::collections::BTreeMap;

use crate::Micros;

use super::MachineId;

const EPS: f64 = 1e-9;
/// Tasks needing at least this much compute only look inside open runs.
const SKIP_MIN_COMPUTE: f64 = 1e-3;

/// Resources reserved on a machine over one step of its usage profile.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Usage {
    pub mem_gb: f64,
    pub compute: f64,
    pub tasks: u32,
}

/// RT-space of one device: reserved memory, compute and task count as a
/// step function of time. `profile[t]` holds the usage on `[t, next key)`;
/// the last step is always empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineTimeline {
    pub machine_id: MachineId,
    mem_capacity_gb: f64,
    compute_capacity: f64,
    max_coresident: Option<usize>,
    profile: BTreeMap<Micros, Usage>,
    /// Maximal runs `start -> end` of steps with at least `SKIP_MIN_COMPUTE`
    /// compute left; the trailing run ends at `Micros::MAX`. Lets a search
    /// on a busy machine jump over booked stretches and short holes.
    open: BTreeMap<Micros, Micros>,
}

enum Scan {
    Found(Micros),
    GaveUp,
    /// No fit before `limit`; the caller may try later.
    Exhausted(Micros),
}

impl MachineTimeline {
    pub fn new(machine_id: MachineId, mem_capacity_gb: f64) -> Self {
        MachineTimeline {
            machine_id,
            mem_capacity_gb,
            compute_capacity: 1.0,
            max_coresident: None,
            profile: BTreeMap::from([(0, Usage::default())]),
            open: BTreeMap::from([(0, Micros::MAX)]),
        }
    }

    pub fn with_max_coresident(mut self, cap: Option<usize>) -> Self {
        self.max_coresident = cap;
        self
    }

    pub fn mem_capacity_gb(&self) -> f64 {
        self.mem_capacity_gb
    }

    pub fn compute_capacity(&self) -> f64 {
        self.compute_capacity
    }

    pub fn max_coresident(&self) -> Option<usize> {
        self.max_coresident
    }

    /// Whether a task with this footprint could ever run here.
    pub fn can_host(&self, mem_gb: f64, compute: f64) -> bool {
        mem_gb <= self.mem_capacity_gb + EPS && compute <= self.compute_capacity + EPS
    }

    fn fits(&self, u: &Usage, mem_gb: f64, compute: f64) -> bool {
        u.mem_gb + mem_gb <= self.mem_capacity_gb + EPS
            && u.compute + compute <= self.compute_capacity + EPS
            && self
                .max_coresident
                .is_none_or(|cap| (u.tasks as usize) < cap)
    }

    fn is_open(&self, u: &Usage) -> bool {
        u.compute + SKIP_MIN_COMPUTE <= self.compute_capacity + EPS
    }

    fn origin(&self) -> Micros {
        *self.profile.keys().next().expect("profile is never empty")
    }

    /// Earliest `s ≥ ready` such that the task fits on `[s, s+duration)`.
    /// Gives up (returns `None`) once `s` would reach `give_up_at`, or if
    /// the task can never fit.
    pub fn earliest_fit(
        &self,
        ready: Micros,
        duration: Micros,
        mem_gb: f64,
        compute: f64,
        give_up_at: Micros,
    ) -> Option<Micros> {
        if !self.can_host(mem_gb, compute) || ready >= give_up_at {
            return None;
        }
        let mut cand = ready.max(self.origin());
        if compute < SKIP_MIN_COMPUTE {
            return match self.scan(cand, Micros::MAX, duration, mem_gb, compute, give_up_at) {
                Scan::Found(s) => Some(s),
                _ => None,
            };
        }
        let first = match self.open.range(..=cand).next_back() {
            Some((&a, &b)) if b > cand => a,
            _ => cand,
        };
        for (&a, &b) in self.open.range(first..) {
            cand = cand.max(a);
            if cand >= give_up_at {
                return None;
            }
            if b - cand < duration {
                continue;
            }
            match self.scan(cand, b, duration, mem_gb, compute, give_up_at) {
                Scan::Found(s) => return Some(s),
                Scan::GaveUp => return None,
                Scan::Exhausted(next) => cand = next,
            }
        }
        None
    }

    /// Step-by-step search for a fit that starts at or after `cand` and
    /// ends by `limit`.
    fn scan(
        &self,
        mut cand: Micros,
        limit: Micros,
        duration: Micros,
        mem_gb: f64,
        compute: f64,
        give_up_at: Micros,
    ) -> Scan {
        let first_key = *self
            .profile
            .range(..=cand)
            .next_back()
            .expect("cand is at or after the first step")
            .0;
        let mut iter = self.profile.range(first_key..).peekable();
        while let Some((&seg_start, usage)) = iter.next() {
            if cand >= give_up_at {
                return Scan::GaveUp;
            }
            if limit - cand < duration {
                return Scan::Exhausted(cand);
            }
            if seg_start >= cand + duration {
                return Scan::Found(cand);
            }
            let seg_end = iter.peek().map(|(&k, _)| k);
            if !self.fits(usage, mem_gb, compute) {
                match seg_end {
                    Some(e) => cand = cand.max(e),
                    // the open-ended last step is empty, so this cannot happen
                    None => return Scan::GaveUp,
                }
            } else if seg_end.is_none() {
                return Scan::Found(cand);
            }
        }
        Scan::Found(cand)
    }

    fn split_at(&mut self, t: Micros) {
        if !self.profile.contains_key(&t) {
            let prev = self
                .profile
                .range(..t)
                .next_back()
                .map(|(_, u)| *u)
                .unwrap_or_default();
            self.profile.insert(t, prev);
        }
    }

    /// Adds a reservation on `[start, end)`. Capacity is the caller's
    /// responsibility (use [`earliest_fit`](Self::earliest_fit) first).
    pub fn reserve(&mut self, start: Micros, end: Micros, mem_gb: f64, compute: f64) {
        if end <= start {
            return;
        }
        self.split_at(start);
        self.split_at(end);
        for (_, u) in self.profile.range_mut(start..end) {
            u.mem_gb += mem_gb;
            u.compute += compute;
            u.tasks += 1;
        }
        self.reindex(start, end);
    }

    /// Rebuilds the open runs touching `[start, end]`.
    fn reindex(&mut self, start: Micros, end: Micros) {
        let mut lo = start;
        let mut hi = end;
        let touching: Vec<Micros> = self
            .open
            .range(..=end)
            .rev()
            .take_while(|(_, &b)| b >= start)
            .map(|(&a, _)| a)
            .collect();
        for a in touching {
            let b = self.open.remove(&a).expect("collected above");
            lo = lo.min(a);
            hi = hi.max(b);
        }
        let last_key = *self
            .profile
            .keys()
            .next_back()
            .expect("profile is never empty");
        let mut run: Option<Micros> = None;
        let mut runs = Vec::new();
        for (&k, u) in self.profile.range(lo..) {
            if k >= hi {
                break;
            }
            match (self.is_open(u), run) {
                (true, None) => run = Some(k),
                (false, Some(a)) => {
                    runs.push((a, k));
                    run = None;
                }
                _ => {}
            }
            if k == last_key {
                break;
            }
        }
        if let Some(a) = run {
            // an open run reaching `hi` continues exactly as far as before
            runs.push((a, hi));
        }
        self.open.extend(runs);
    }

    /// Drops the steps entirely before `now`, re-keying the step that
    /// contains `now` to start there.
    pub fn prune_before(&mut self, now: Micros) {
        let Some((_, &u)) = self.profile.range(..=now).next_back() else {
            return;
        };
        let mut tail = self.profile.split_off(&now);
        tail.entry(now).or_insert(u);
        self.profile = tail;
        let mut open = self.open.split_off(&now);
        if let Some((_, &b)) = self.open.iter().next_back().filter(|(_, &b)| b > now) {
            open.insert(now, b);
        }
        self.open = open;
    }

    pub fn usage_at(&self, t: Micros) -> Usage {
        self.profile
            .range(..=t)
            .next_back()
            .map(|(_, u)| *u)
            .unwrap_or_default()
    }

    /// Start of the trailing empty step: the machine is free from here on.
    pub fn free_from(&self) -> Micros {
        let mut last_busy_end = None;
        for (&k, u) in self.profile.iter().rev() {
            if u.tasks > 0 {
                break;
            }
            last_busy_end = Some(k);
        }
        last_busy_end.unwrap_or(0)
    }

    pub fn steps(&self) -> usize {
        self.profile.len()
    }
}
