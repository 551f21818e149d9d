//! Job traces: a six-column CSV format and a synthetic generator with
//! exponential inter-arrivals and a configurable worker-count mix.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::Exp;
use serde::Deserialize;

use crate::cost_model::CostModel;
use crate::error::{arg, Error, Result};
use crate::io::write_csv;
use crate::rng;
use crate::scheduler::{JobDag, JobId};
use crate::Micros;

pub const HEADER: [&str; 6] = [
    "job_id",
    "arrival_s",
    "model_name",
    "num_workers",
    "iterations",
    "spb",
];
pub const WORKER_COUNTS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TraceRecord {
    pub job_id: JobId,
    pub arrival_s: f64,
    pub model_name: String,
    pub num_workers: usize,
    pub iterations: u32,
    pub spb: bool,
}

impl TraceRecord {
    pub fn arrival(&self) -> Micros {
        (self.arrival_s * 1e6).round() as Micros
    }

    pub fn to_dag(&self) -> Result<JobDag> {
        JobDag::new(
            self.job_id,
            self.arrival(),
            self.model_name.clone(),
            self.num_workers,
            self.iterations,
            self.spb,
        )
    }

    fn check(&self) -> std::result::Result<(), String> {
        if !(self.arrival_s >= 0.0 && self.arrival_s.is_finite()) {
            return Err(format!(
                "arrival {} is not a non-negative time",
                self.arrival_s
            ));
        }
        if !WORKER_COUNTS.contains(&self.num_workers) {
            return Err(format!(
                "worker count {} not in {WORKER_COUNTS:?}",
                self.num_workers
            ));
        }
        if self.iterations == 0 {
            return Err("iterations must be at least 1".into());
        }
        Ok(())
    }
}

/// Reads a trace CSV. An empty file is an empty trace; otherwise the header
/// is mandatory and every error names its line.
pub fn load_records(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_records(&text, path)
}

pub fn parse_records(text: &str, path: &Path) -> Result<Vec<TraceRecord>> {
    let perr = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        msg,
    };
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(HEADER.iter().copied()) {
        return Err(perr(1, format!("expected header `{}`", HEADER.join(","))));
    }
    let mut out: Vec<TraceRecord> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            perr(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let r: TraceRecord = rec
            .deserialize(Some(&headers))
            .map_err(|e| perr(line, e.to_string()))?;
        r.check().map_err(|m| perr(line, m))?;
        if let Some(prev) = out.last() {
            if r.arrival_s < prev.arrival_s {
                return Err(perr(line, "arrivals must be nondecreasing".into()));
            }
        }
        out.push(r);
    }
    Ok(out)
}

/// Loads a trace and resolves it into job DAGs, checking every model
/// against the profile table.
pub fn load(path: &Path, cost: &CostModel) -> Result<Vec<JobDag>> {
    let text = std::fs::read_to_string(path)?;
    let records = parse_records(&text, path)?;
    for (i, r) in records.iter().enumerate() {
        if !cost.contains(&r.model_name) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: data_line(&text, i),
                msg: format!("unknown model `{}`", r.model_name),
            });
        }
    }
    to_dags(&records)
}

fn data_line(text: &str, record: usize) -> usize {
    let mut seen = 0;
    for (n, l) in text.lines().enumerate().skip(1) {
        if l.trim().is_empty() {
            continue;
        }
        if seen == record {
            return n + 1;
        }
        seen += 1;
    }
    0
}

pub fn to_dags(records: &[TraceRecord]) -> Result<Vec<JobDag>> {
    records.iter().map(TraceRecord::to_dag).collect()
}

pub fn save(path: &Path, records: &[TraceRecord]) -> Result<()> {
    write_csv(path, |w| {
        w.write_record(HEADER)?;
        for r in records {
            w.write_record([
                r.job_id.to_string(),
                r.arrival_s.to_string(),
                r.model_name.clone(),
                r.num_workers.to_string(),
                r.iterations.to_string(),
                r.spb.to_string(),
            ])?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_jobs: usize,
    pub mean_interarrival_s: f64,
    /// `(workers, probability)`; probabilities sum to 1.
    pub worker_mix: Vec<(usize, f64)>,
    /// Inclusive range of per-job iteration counts.
    pub iters_range: (u32, u32),
    /// Models to draw from; empty means every profiled model.
    pub models: Vec<String>,
    pub spb: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_jobs: 500,
            mean_interarrival_s: 30.0,
            worker_mix: vec![(1, 0.50), (2, 0.10), (4, 0.20), (8, 0.15), (16, 0.05)],
            iters_range: (50, 500),
            models: Vec::new(),
            spb: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_interarrival_s >= 0.0 && self.mean_interarrival_s.is_finite()) {
            return arg("mean inter-arrival must be non-negative");
        }
        if self.worker_mix.is_empty() {
            return arg("worker mix is empty");
        }
        let mut total = 0.0;
        for &(w, p) in &self.worker_mix {
            if !WORKER_COUNTS.contains(&w) {
                return arg(format!("worker count {w} not in {WORKER_COUNTS:?}"));
            }
            if !(p >= 0.0 && p.is_finite()) {
                return arg(format!("probability {p} for {w} workers is invalid"));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return arg(format!("worker mix sums to {total}, not 1"));
        }
        let (lo, hi) = self.iters_range;
        if lo == 0 || lo > hi {
            return arg(format!("bad iteration range {lo}-{hi}"));
        }
        Ok(())
    }

    /// Applies one `key=value` setting: `n`, `interarrival`, `mix`
    /// (`1:0.5/2:0.1/...`), `iters` (`lo-hi`), `models` (`a/b/c`), `spb`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Argument(format!("bad {what} `{value}`"));
        match key {
            "n" | "n_jobs" => self.n_jobs = value.parse().map_err(|_| bad("job count"))?,
            "interarrival" | "mean_interarrival_s" => {
                self.mean_interarrival_s = value.parse().map_err(|_| bad("inter-arrival"))?
            }
            "mix" | "worker_mix" => {
                self.worker_mix = value
                    .split('/')
                    .map(|kv| {
                        let (w, p) = kv.split_once(':').ok_or_else(|| bad("worker mix"))?;
                        Ok((
                            w.trim().parse().map_err(|_| bad("worker mix"))?,
                            p.trim().parse().map_err(|_| bad("worker mix"))?,
                        ))
                    })
                    .collect::<Result<_>>()?
            }
            "iters" | "iters_range" => self.iters_range = parse_range(value)?,
            "models" => self.models = value.split('/').map(|s| s.trim().to_string()).collect(),
            "spb" => self.spb = value.parse().map_err(|_| bad("spb flag"))?,
            other => return arg(format!("unknown trace setting `{other}`")),
        }
        Ok(())
    }
}

/// Parses `lo-hi` (or `lo..hi`, or a single value).
pub fn parse_range(value: &str) -> Result<(u32, u32)> {
    let bad = || Error::Argument(format!("bad range `{value}`"));
    let (lo, hi) = value
        .split_once("..")
        .or_else(|| value.split_once('-'))
        .unwrap_or((value, value));
    let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

/// Synthetic trace: exponential inter-arrivals (first job at 0), worker
/// counts from the mix, models uniform over `cfg.models` (or every profiled
/// model), iterations uniform over the range. Arrivals are whole
/// microseconds so the file round-trips exactly.
pub fn generate(seed: u64, cfg: &GenConfig, cost: &CostModel) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    let models: Vec<String> = if cfg.models.is_empty() {
        cost.models().into_iter().map(String::from).collect()
    } else {
        for m in &cfg.models {
            cost.get(m)?;
        }
        cfg.models.clone()
    };
    if models.is_empty() {
        return Err(Error::Config("no models to draw from".into()));
    }
    let weights = WeightedIndex::new(cfg.worker_mix.iter().map(|&(_, p)| p))
        .map_err(|e| Error::Argument(format!("worker mix: {e}")))?;
    let gap = if cfg.mean_interarrival_s > 0.0 {
        Some(Exp::new(1.0 / cfg.mean_interarrival_s).map_err(|e| Error::Argument(e.to_string()))?)
    } else {
        None
    };
    let mut rng = rng::stream(seed, 0);
    let mut t_us: Micros = 0;
    let mut out = Vec::with_capacity(cfg.n_jobs);
    for i in 0..cfg.n_jobs {
        if i > 0 {
            if let Some(g) = &gap {
                t_us += (g.sample(&mut rng) * 1e6).round() as Micros;
            }
        }
        let workers = cfg.worker_mix[weights.sample(&mut rng)].0;
        let model = models[rng.random_range(0..models.len())].clone();
        let iterations = rng.random_range(cfg.iters_range.0..=cfg.iters_range.1);
        out.push(TraceRecord {
            job_id: i as JobId,
            arrival_s: t_us as f64 / 1e6,
            model_name: model,
            num_workers: workers,
            iterations,
            spb: cfg.spb,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_fractions_from_row() {
        let text =
            "job_id,arrival_s,model_name,num_workers,iterations,spb\n1,0,ResNet18,4,100,true\n";
        let recs = parse_records(text, Path::new("t.csv")).unwrap();
        let dag = recs[0].to_dag().unwrap();
        assert_eq!(dag.fractions, vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn empty_file_is_empty_trace() {
        assert!(parse_records("", Path::new("t.csv")).unwrap().is_empty());
        assert!(parse_records("\n  \n", Path::new("t.csv"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn errors_name_the_line() {
        let text = "job_id,arrival_s,model_name,num_workers,iterations,spb\n\
                    1,0,ResNet18,4,100,true\n\
                    2,1,ResNet18,3,100,true\n";
        match parse_records(text, Path::new("t.csv")) {
            Err(Error::Parse { line: 3, msg, .. }) => {
                assert!(msg.contains("worker count"), "{msg}")
            }
            other => panic!("{other:?}"),
        }
        let text = "job_id,arrival_s,model_name,num_workers,iterations,spb\n\
                    1,5,ResNet18,4,100,true\n\
                    2,1,ResNet18,4,100,true\n";
        assert!(matches!(
            parse_records(text, Path::new("t.csv")),
            Err(Error::Parse { line: 3, .. })
        ));
        let text =
            "job_id,arrival_s,model_name,num_workers,iterations,spb\n1,x,ResNet18,4,100,true\n";
        assert!(matches!(
            parse_records(text, Path::new("t.csv")),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_records("a,b\n1,2\n", Path::new("t.csv")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn bad_mix_rejected() {
        let cost = CostModel::builtin();
        let mut cfg = GenConfig {
            worker_mix: vec![(1, 0.5), (2, 0.4)],
            ..GenConfig::default()
        };
        assert!(matches!(generate(1, &cfg, &cost), Err(Error::Argument(_))));
        cfg.worker_mix = vec![(3, 1.0)];
        assert!(matches!(generate(1, &cfg, &cost), Err(Error::Argument(_))));
    }

    #[test]
    fn settings_parse() {
        let mut cfg = GenConfig::default();
        cfg.set("n", "10").unwrap();
        cfg.set("mix", "1:0.25/16:0.75").unwrap();
        cfg.set("iters", "5-9").unwrap();
        assert_eq!(cfg.n_jobs, 10);
        assert_eq!(cfg.worker_mix, vec![(1, 0.25), (16, 0.75)]);
        assert_eq!(cfg.iters_range, (5, 9));
        assert!(cfg.set("bogus", "1").is_err());
        assert!(parse_range("9-5").is_err());
        assert_eq!(parse_range("7").unwrap(), (7, 7));
    }
}
