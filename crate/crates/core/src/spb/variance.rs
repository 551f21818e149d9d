use crate::error::{arg, Result};
use crate::par::{map_indexed, Exec};
use crate::rng;

use super::model::LayeredModel;
use super::sgd::{coordinate_weights, sample_batch, SpbConfig};
use super::{aggregate, average_full, chunk_layers, suffix_layers};

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return MeanSe { mean, se: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        MeanSe {
            mean,
            se: (var / n).sqrt(),
        }
    }

    /// `mean − z·se ≤ bound`.
    pub fn below(&self, bound: f64, z: f64) -> bool {
        self.mean - z * self.se <= bound
    }

    /// Whether two estimates agree within `z` combined standard errors.
    pub fn agrees(&self, other: &MeanSe, z: f64) -> bool {
        (self.mean - other.mean).abs() <= z * self.se.hypot(other.se)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    /// `E‖∇f − g̃‖²` for the SPB aggregate.
    pub spb: MeanSe,
    /// Same with every worker sending its full gradient.
    pub baseline: MeanSe,
    /// Per input-side chunk `p̂_m`, rescaled from the chunk's squared error
    /// by its `mB/k` effective batch.
    pub chunk_p: Vec<MeanSe>,
}

struct Trial {
    spb: f64,
    baseline: f64,
    chunks: Vec<f64>,
}

/// Monte-Carlo estimate of the gradient noise at the model's current
/// parameters. Trial `t` uses seed `derive(seed, t)`; SPB and the baseline
/// share each trial's samples.
pub fn empirical_variance(
    model: &LayeredModel,
    cfg: &SpbConfig,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<VarianceEstimate> {
    cfg.validate()?;
    if trials == 0 {
        return arg("need at least one trial");
    }
    let k = cfg.workers;
    let layers = model.num_layers();
    let per = cfg.per_worker_batch();
    let truth = model.full_gradient();
    let chunk_ranges = (1..=k)
        .map(|m| chunk_layers(m, k, layers))
        .collect::<Result<Vec<_>>>()?;

    let results = map_indexed(exec, trials, |t| -> Result<Trial> {
        let trial_seed = rng::derive(seed, t as u64);
        let mut partial = Vec::with_capacity(k);
        let mut full = Vec::with_capacity(k);
        for j in 1..=k {
            let batch = sample_batch(model.num_samples(), per, trial_seed, j as u64);
            partial.push(model.partial_backprop(&batch, suffix_layers(j, k, layers)?)?);
            full.push(model.partial_backprop(&batch, layers)?.into_dense()?);
        }
        let spb = aggregate(&partial, k)?;
        let base = average_full(&full)?;
        let chunks = chunk_ranges
            .iter()
            .map(|r| sq_err(&truth[r.clone()], &spb[r.clone()]))
            .collect();
        Ok(Trial {
            spb: sq_err(&truth, &spb),
            baseline: sq_err(&truth, &base),
            chunks,
        })
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let spb: Vec<f64> = results.iter().map(|r| r.spb).collect();
    let baseline: Vec<f64> = results.iter().map(|r| r.baseline).collect();
    let chunk_p = (0..k)
        .map(|c| {
            let scale = ((c + 1) * cfg.batch) as f64 / k as f64;
            let xs: Vec<f64> = results.iter().map(|r| r.chunks[c] * scale).collect();
            MeanSe::from_samples(&xs)
        })
        .collect();
    Ok(VarianceEstimate {
        spb: MeanSe::from_samples(&spb),
        baseline: MeanSe::from_samples(&baseline),
        chunk_p,
    })
}

/// Exact `E‖∇f − g̃‖²` of the SPB estimator at the current parameters,
/// enumerating the dataset (sampling is uniform with replacement).
pub fn noise_at(model: &LayeredModel, workers: usize, batch: usize) -> Result<f64> {
    let w = coordinate_weights(&model.block_sizes(), workers, batch)?;
    let truth: Vec<f64> = model.full_gradient().into_iter().flatten().collect();
    let n = model.num_samples();
    let mut total = 0.0;
    for i in 0..n {
        let g = model.sample_gradient(i);
        for ((gi, ti), wi) in g.iter().flatten().zip(&truth).zip(&w) {
            total += wi * (gi - ti) * (gi - ti);
        }
    }
    Ok(total / n as f64)
}

fn sq_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}
