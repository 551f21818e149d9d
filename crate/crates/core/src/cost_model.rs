//! Per-model profiling data and the task demands derived from it.
//!
//! A profile is a set of knots `(fraction, forward_ms, backward_ms,
//! peak_mem_gb)` where `fraction` is the share of layers backpropagated.
//! Between knots everything is linear; below the smallest knot backward time
//! goes linearly to zero while forward time and memory stay at the smallest
//! knot's values (activations for the forward pass are still held).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{arg, Error, Result};

const BUILTIN_PROFILES: &str = include_str!("../data/profiles.csv");

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilePoint {
    pub fraction: f64,
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub peak_mem_gb: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub model_name: String,
    /// Knots in strictly increasing fraction order; the last is at 1.0.
    pub points: Vec<ProfilePoint>,
    pub grad_size_mb: f64,
    pub batch_size: u32,
    /// Share of one GPU's compute a task of this model needs.
    pub compute_fraction: f64,
}

/// Resources one worker-iteration needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskDemand {
    pub duration_ms: f64,
    pub peak_mem_gb: f64,
    pub compute_fraction: f64,
    /// Gradient volume pushed to the parameter server.
    pub comm_mb: f64,
}

impl ProfileEntry {
    pub fn new(
        model_name: impl Into<String>,
        points: Vec<ProfilePoint>,
        grad_size_mb: f64,
        batch_size: u32,
    ) -> Result<Self> {
        let e = ProfileEntry {
            model_name: model_name.into(),
            points,
            grad_size_mb,
            batch_size,
            compute_fraction: 1.0,
        };
        e.validate()?;
        Ok(e)
    }

    fn validate(&self) -> Result<()> {
        let name = &self.model_name;
        let bad = |msg: String| Err(Error::Config(format!("profile `{name}`: {msg}")));
        if self.points.is_empty() {
            return bad("no profiled points".into());
        }
        for w in self.points.windows(2) {
            if w[1].fraction <= w[0].fraction {
                return bad("fractions must be strictly increasing".into());
            }
            if w[1].backward_ms < w[0].backward_ms || w[1].peak_mem_gb < w[0].peak_mem_gb {
                return bad("backward time and peak memory must be nondecreasing".into());
            }
        }
        for p in &self.points {
            if !(p.fraction > 0.0 && p.fraction <= 1.0) {
                return bad(format!("fraction {} outside (0, 1]", p.fraction));
            }
            let positive = |x: f64| x > 0.0;
            if !positive(p.forward_ms) || p.backward_ms < 0.0 || !positive(p.peak_mem_gb) {
                return bad("times and memory must be positive".into());
            }
        }
        if self.points.last().map(|p| p.fraction) != Some(1.0) {
            return bad("the full-backprop point (fraction 1.0) is required".into());
        }
        if self.grad_size_mb.is_nan() || self.grad_size_mb <= 0.0 {
            return bad("gradient size must be positive".into());
        }
        if !(self.compute_fraction > 0.0 && self.compute_fraction <= 1.0) {
            return bad(format!(
                "compute fraction {} outside (0, 1]",
                self.compute_fraction
            ));
        }
        Ok(())
    }

    fn interpolate<F>(&self, fraction: f64, field: F, below: Below) -> Result<f64>
    where
        F: Fn(&ProfilePoint) -> f64,
    {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return arg(format!("backprop fraction {fraction} outside (0, 1]"));
        }
        let pts = &self.points;
        let first = pts
            .first()
            .ok_or_else(|| Error::Config(format!("profile `{}` is empty", self.model_name)))?;
        if fraction < first.fraction {
            return Ok(match below {
                Below::ThroughOrigin => field(first) * fraction / first.fraction,
                Below::Floor => field(first),
            });
        }
        let idx = pts.partition_point(|p| p.fraction < fraction);
        let hi = &pts[idx];
        if hi.fraction == fraction {
            return Ok(field(hi));
        }
        let lo = &pts[idx - 1];
        let t = (fraction - lo.fraction) / (hi.fraction - lo.fraction);
        Ok(field(lo) + t * (field(hi) - field(lo)))
    }

    pub fn backward_time(&self, fraction: f64) -> Result<f64> {
        self.interpolate(fraction, |p| p.backward_ms, Below::ThroughOrigin)
    }

    pub fn forward_time(&self, fraction: f64) -> Result<f64> {
        self.interpolate(fraction, |p| p.forward_ms, Below::Floor)
    }

    pub fn peak_memory(&self, fraction: f64) -> Result<f64> {
        self.interpolate(fraction, |p| p.peak_mem_gb, Below::Floor)
    }

    /// Demand of worker `j` (1-based) of `k` under SPB, whose backprop
    /// share is `j/k`.
    pub fn task_demand(&self, j: usize, k: usize, comm_ms_per_mb: f64) -> Result<TaskDemand> {
        if k == 0 || j == 0 || j > k {
            return arg(format!("worker index {j} outside 1..={k}"));
        }
        self.demand_at(j as f64 / k as f64, comm_ms_per_mb)
    }

    pub fn demand_at(&self, fraction: f64, comm_ms_per_mb: f64) -> Result<TaskDemand> {
        let comm_mb = self.grad_size_mb * fraction;
        Ok(TaskDemand {
            duration_ms: self.forward_time(fraction)?
                + self.backward_time(fraction)?
                + comm_ms_per_mb * comm_mb,
            peak_mem_gb: self.peak_memory(fraction)?,
            compute_fraction: self.compute_fraction,
            comm_mb,
        })
    }
}

#[derive(Clone, Copy)]
enum Below {
    ThroughOrigin,
    Floor,
}

#[derive(Debug, Deserialize)]
struct Row {
    model: String,
    fraction: Option<f64>,
    forward_ms: Option<f64>,
    backward_ms: Option<f64>,
    peak_mem_gb: Option<f64>,
    grad_size_mb: f64,
    batch: u32,
    #[serde(default)]
    derived_from: Option<String>,
}

/// All loaded profiles, keyed by model name. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostModel {
    entries: BTreeMap<String, ProfileEntry>,
}

impl CostModel {
    /// The ResNet101 fraction sweep (batch 64) and the full-backprop
    /// profiles of nine architectures (batch 128; ResNet101 at this batch is
    /// named `ResNet101_b128`).
    pub fn builtin() -> Self {
        Self::from_reader(BUILTIN_PROFILES.as_bytes(), Path::new("<builtin>"))
            .expect("builtin profile table is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(f, path)
    }

    /// Parses the profile CSV. A row whose `derived_from` column names
    /// another model leaves the timing columns empty; its profile is the
    /// base model's with times scaled by the gradient-size ratio and memory
    /// unchanged.
    pub fn from_reader<R: Read>(reader: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: PathBuf::from(path),
            line,
            msg,
        };
        let mut raw: BTreeMap<String, (Vec<ProfilePoint>, f64, u32)> = BTreeMap::new();
        let mut derived: Vec<(usize, String, String, f64, u32)> = Vec::new();
        for (i, rec) in rdr.deserialize::<Row>().enumerate() {
            let line = i + 2;
            let row = rec.map_err(|e| parse_err(line, e.to_string()))?;
            if let Some(base) = row.derived_from.filter(|s| !s.is_empty()) {
                derived.push((line, row.model, base, row.grad_size_mb, row.batch));
                continue;
            }
            let (Some(fraction), Some(forward_ms), Some(backward_ms), Some(peak_mem_gb)) = (
                row.fraction,
                row.forward_ms,
                row.backward_ms,
                row.peak_mem_gb,
            ) else {
                return Err(parse_err(line, "missing timing or memory column".into()));
            };
            let slot = raw
                .entry(row.model.clone())
                .or_insert_with(|| (Vec::new(), row.grad_size_mb, row.batch));
            if slot.1 != row.grad_size_mb || slot.2 != row.batch {
                return Err(parse_err(
                    line,
                    format!("inconsistent gradient size or batch for `{}`", row.model),
                ));
            }
            slot.0.push(ProfilePoint {
                fraction,
                forward_ms,
                backward_ms,
                peak_mem_gb,
            });
        }
        let mut entries = BTreeMap::new();
        for (name, (mut points, grad, batch)) in raw {
            points.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
            entries.insert(name.clone(), ProfileEntry::new(name, points, grad, batch)?);
        }
        for (line, name, base, grad, batch) in derived {
            let b = entries
                .get(&base)
                .ok_or_else(|| parse_err(line, format!("unknown base model `{base}`")))?;
            let scale = grad / b.grad_size_mb;
            let points = b
                .points
                .iter()
                .map(|p| ProfilePoint {
                    forward_ms: p.forward_ms * scale,
                    backward_ms: p.backward_ms * scale,
                    ..*p
                })
                .collect();
            let e = ProfileEntry::new(name.clone(), points, grad, batch)?;
            entries.insert(name, e);
        }
        Ok(CostModel { entries })
    }

    pub fn get(&self, model: &str) -> Result<&ProfileEntry> {
        self.entries
            .get(model)
            .ok_or_else(|| Error::UnknownModel(model.to_string()))
    }

    pub fn contains(&self, model: &str) -> bool {
        self.entries.contains_key(model)
    }

    pub fn insert(&mut self, entry: ProfileEntry) -> Result<()> {
        entry.validate()?;
        self.entries.insert(entry.model_name.clone(), entry);
        Ok(())
    }

    pub fn set_compute_fraction(&mut self, model: &str, fraction: f64) -> Result<()> {
        let e = self
            .entries
            .get_mut(model)
            .ok_or_else(|| Error::UnknownModel(model.to_string()))?;
        let old = e.compute_fraction;
        e.compute_fraction = fraction;
        if let Err(err) = e.validate() {
            e.compute_fraction = old;
            return Err(err);
        }
        Ok(())
    }

    /// Model names in sorted order.
    pub fn models(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn task_demand(
        &self,
        model: &str,
        j: usize,
        k: usize,
        comm_ms_per_mb: f64,
    ) -> Result<TaskDemand> {
        self.get(model)?.task_demand(j, k, comm_ms_per_mb)
    }
}
