use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{arg, Error, Result};
use crate::io::write_atomic;
use crate::rng;

use super::model::{flatten, LayeredModel};
use super::{aggregate, chunk_layers, suffix_layers};

/// Parameters of a synchronous SPB run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpbConfig {
    /// Worker count `k`.
    pub workers: usize,
    /// Global batch `B`, split evenly across workers.
    pub batch: usize,
    /// Bound on per-sample gradient norms.
    pub grad_bound: f64,
    /// Step size for [`Schedule::Constant`].
    pub lr_base: f64,
    /// Diameter of the feasible ball centred at the origin.
    pub diameter: f64,
    /// Bound on `sqrt(E‖∇f − g̃‖²)` over the feasible ball.
    pub noise: f64,
}

impl SpbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return arg("worker count must be at least 1");
        }
        if self.batch == 0 || !self.batch.is_multiple_of(self.workers) {
            return arg(format!(
                "global batch {} must be a positive multiple of {} workers",
                self.batch, self.workers
            ));
        }
        for (name, v) in [
            ("gradient bound", self.grad_bound),
            ("diameter", self.diameter),
            ("noise bound", self.noise),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return arg(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn per_worker_batch(&self) -> usize {
        self.batch / self.workers
    }

    /// Measures every constant from the model at its current parameters:
    /// the feasible ball is the one containing both the start point and the
    /// optimum with 25% slack, `noise` is an upper bound on the SPB noise
    /// over that ball, and `lr_base = 1/β`.
    pub fn measured(model: &LayeredModel, workers: usize, batch: usize) -> Result<Self> {
        let q = model.quadratic().ok_or_else(|| {
            Error::Config("constants can only be measured on the convex quadratic".into())
        })?;
        let x0 = flatten(model.params());
        let radius = 1.25 * norm(&q.optimum).max(norm(&x0)).max(1e-6);
        let mut cfg = SpbConfig {
            workers,
            batch,
            grad_bound: model.max_sample_gradient_norm(),
            lr_base: 1.0 / q.smoothness,
            diameter: 2.0 * radius,
            noise: 1.0,
        };
        cfg.validate()?;
        cfg.noise = noise_bound(model, workers, batch, radius)?.sqrt();
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// `1/(β + 1/η)` with `η = (R/V)·sqrt(2/t)` for the whole horizon `t`.
    Horizon,
    /// Same form with `η(s) = (R/V)·sqrt(2/s)` at step `s`.
    Anytime,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    /// Loss at the running average of iterates `x_2..x_{s+1}`.
    pub loss: f64,
    pub suboptimality: Option<f64>,
    pub step_size: f64,
    /// Loss at the last iterate `x_{s+1}`.
    pub last_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub averaged: Vec<Vec<f64>>,
    pub last: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_suboptimality(&self) -> Option<f64> {
        self.points.last().and_then(|p| p.suboptimality)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "iteration,loss,suboptimality,step_size")?;
        for p in &self.points {
            let sub = p
                .suboptimality
                .map(|s| format!("{s:e}"))
                .unwrap_or_default();
            writeln!(
                buf,
                "{},{:e},{},{:e}",
                p.iteration, p.loss, sub, p.step_size
            )?;
        }
        write_atomic(path, &buf)
    }
}

/// `R·sqrt(2V²/t) + βR²/t`.
pub fn convergence_bound(diameter: f64, noise: f64, smoothness: f64, t: usize) -> f64 {
    let t = t as f64;
    diameter * (2.0 * noise * noise / t).sqrt() + smoothness * diameter * diameter / t
}

fn step_size(schedule: Schedule, cfg: &SpbConfig, beta: f64, s: usize, t: usize) -> f64 {
    let eta = |n: usize| cfg.diameter / cfg.noise * (2.0 / n as f64).sqrt();
    match schedule {
        Schedule::Horizon => 1.0 / (beta + 1.0 / eta(t)),
        Schedule::Anytime => 1.0 / (beta + 1.0 / eta(s)),
        Schedule::Constant => cfg.lr_base,
    }
}

/// One SPB step's aggregated gradient estimate. Worker `j` draws its
/// `B/k` samples uniformly with replacement from stream `j` of `seed`.
pub fn spb_gradient(model: &LayeredModel, cfg: &SpbConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    let k = cfg.workers;
    let layers = model.num_layers();
    let per = cfg.per_worker_batch();
    let grads = (1..=k)
        .map(|j| {
            let batch = sample_batch(model.num_samples(), per, seed, j as u64);
            model.partial_backprop(&batch, suffix_layers(j, k, layers)?)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&grads, k)
}

pub(crate) fn sample_batch(population: usize, size: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, stream);
    (0..size).map(|_| r.random_range(0..population)).collect()
}

/// SGD driven by SPB gradients, projected onto the feasible ball for the
/// convex model.
pub fn spb_sgd_run(
    model: &LayeredModel,
    cfg: &SpbConfig,
    iterations: usize,
    schedule: Schedule,
    seed: u64,
) -> Result<Trajectory> {
    run_sgd(model, cfg, iterations, schedule, |m, s| {
        spb_gradient(m, cfg, rng::derive(seed, s as u64))
    })
}

/// Reference mini-batch SGD: every step uses the full gradient of `B`
/// samples drawn from the same stream SPB's worker 1 would use.
pub fn minibatch_sgd_run(
    model: &LayeredModel,
    cfg: &SpbConfig,
    iterations: usize,
    schedule: Schedule,
    seed: u64,
) -> Result<Trajectory> {
    run_sgd(model, cfg, iterations, schedule, |m, s| {
        let batch = sample_batch(m.num_samples(), cfg.batch, rng::derive(seed, s as u64), 1);
        m.partial_backprop(&batch, m.num_layers())?.into_dense()
    })
}

fn run_sgd<G>(
    model: &LayeredModel,
    cfg: &SpbConfig,
    iterations: usize,
    schedule: Schedule,
    mut gradient: G,
) -> Result<Trajectory>
where
    G: FnMut(&LayeredModel, usize) -> Result<Vec<Vec<f64>>>,
{
    cfg.validate()?;
    if iterations == 0 {
        return arg("iteration count must be positive");
    }
    let quad = model.quadratic();
    if quad.is_none() && schedule != Schedule::Constant {
        return Err(Error::Config(
            "the horizon-tuned step schedules require the convex quadratic model".into(),
        ));
    }
    let beta = quad.map_or(0.0, |q| q.smoothness);
    let radius = cfg.diameter / 2.0;

    let mut current = model.clone();
    let mut eval = model.clone();
    let mut sum: Vec<Vec<f64>> = model.params().iter().map(|b| vec![0.0; b.len()]).collect();
    let mut points = Vec::with_capacity(iterations);
    for s in 1..=iterations {
        let g = gradient(&current, s)?;
        let lr = step_size(schedule, cfg, beta, s, iterations);
        for (x, gb) in current.params_mut().iter_mut().zip(&g) {
            x.iter_mut().zip(gb).for_each(|(xi, gi)| *xi -= lr * gi);
        }
        if quad.is_some() {
            project_ball(current.params_mut(), radius);
        }
        for (acc, x) in sum.iter_mut().zip(current.params()) {
            acc.iter_mut().zip(x).for_each(|(a, v)| *a += v);
        }
        let inv = 1.0 / s as f64;
        let avg: Vec<Vec<f64>> = sum
            .iter()
            .map(|b| b.iter().map(|v| v * inv).collect())
            .collect();
        eval.set_params(avg)?;
        let loss = eval.loss();
        points.push(TrajectoryPoint {
            iteration: s,
            loss,
            suboptimality: quad.map(|q| loss - q.optimal_loss),
            step_size: lr,
            last_loss: current.loss(),
        });
    }
    Ok(Trajectory {
        points,
        averaged: eval.params().to_vec(),
        last: current.params().to_vec(),
    })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn project_ball(blocks: &mut [Vec<f64>], radius: f64) {
    let n: f64 = blocks.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if n > radius {
        let s = radius / n;
        blocks.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

/// Per-coordinate weight of the squared error of the SPB estimator: a
/// coordinate in input-side chunk `m` is averaged over `mB/k` samples.
pub(crate) fn coordinate_weights(
    block_sizes: &[usize],
    workers: usize,
    batch: usize,
) -> Result<Vec<f64>> {
    let layers = block_sizes.len();
    let mut weights = Vec::new();
    let mut per_layer = vec![0.0; layers];
    for m in 1..=workers {
        for l in chunk_layers(m, workers, layers)? {
            per_layer[l] = workers as f64 / (m * batch) as f64;
        }
    }
    for (l, &s) in block_sizes.iter().enumerate() {
        weights.extend(std::iter::repeat_n(per_layer[l], s));
    }
    Ok(weights)
}

/// Upper bound on `E‖∇f(x) − g̃(x)‖²` over the ball `‖x‖ ≤ radius` for the
/// quadratic. The noise is a convex quadratic form `xᵀSx − 2tᵀx + c` in `x`,
/// so `λmax(S)ρ² + 2‖t‖ρ + c` bounds it on the ball.
pub fn noise_bound(model: &LayeredModel, workers: usize, batch: usize, radius: f64) -> Result<f64> {
    let q = model
        .quadratic()
        .ok_or_else(|| Error::Config("noise bound needs the convex quadratic".into()))?;
    let w = coordinate_weights(&model.block_sizes(), workers, batch)?;
    let data = model.data();
    let n = data.dim();
    let rows = data.len() as f64;
    let h = &q.hessian;
    let mean_u: DVector<f64> = {
        let mut u = DVector::zeros(n);
        for (a, b) in data.inputs.iter().zip(&data.targets) {
            for c in 0..n {
                u[c] += a[c] * b;
            }
        }
        u / rows
    };
    let mut s = DMatrix::<f64>::zeros(n, n);
    let mut t = DVector::<f64>::zeros(n);
    let mut c0 = 0.0;
    for (a, b) in data.inputs.iter().zip(&data.targets) {
        for c in 0..n {
            // row c of (a aᵀ − H) and the matching offset (a_c b − ū_c)
            let v = DVector::from_fn(n, |j, _| a[c] * a[j] - h[(c, j)]);
            let e = a[c] * b - mean_u[c];
            s += &v * v.transpose() * w[c];
            t += &v * (e * w[c]);
            c0 += w[c] * e * e;
        }
    }
    s /= rows;
    t /= rows;
    c0 /= rows;
    let lmax = s.symmetric_eigen().eigenvalues.max().max(0.0);
    Ok(lmax * radius * radius + 2.0 * t.norm() * radius + c0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> LayeredModel {
        LayeredModel::random_quadratic(128, &[2, 2, 2, 2], 0.5, 17).unwrap()
    }

    #[test]
    fn k1_is_plain_minibatch_sgd() {
        let model = quad();
        let cfg = SpbConfig::measured(&model, 1, 8).unwrap();
        for schedule in [Schedule::Horizon, Schedule::Constant] {
            let a = spb_sgd_run(&model, &cfg, 200, schedule, 99).unwrap();
            let b = minibatch_sgd_run(&model, &cfg, 200, schedule, 99).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tuned_schedule_rejected_for_mlp() {
        let data = super::super::Dataset::new(vec![vec![0.5], vec![-0.5]], vec![1.0, 0.0]).unwrap();
        let model = LayeredModel::chain_mlp(1, 2, 2, data, 1).unwrap();
        let cfg = SpbConfig {
            workers: 2,
            batch: 2,
            grad_bound: 1.0,
            lr_base: 0.1,
            diameter: 1.0,
            noise: 1.0,
        };
        assert!(matches!(
            spb_sgd_run(&model, &cfg, 10, Schedule::Horizon, 0),
            Err(Error::Config(_))
        ));
        let traj = spb_sgd_run(&model, &cfg, 10, Schedule::Constant, 0).unwrap();
        assert_eq!(traj.points.len(), 10);
        assert!(traj.final_suboptimality().is_none());
    }

    #[test]
    fn config_validation() {
        let base = SpbConfig {
            workers: 3,
            batch: 12,
            grad_bound: 1.0,
            lr_base: 0.1,
            diameter: 1.0,
            noise: 1.0,
        };
        assert!(base.validate().is_ok());
        assert!(SpbConfig {
            batch: 10,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(SpbConfig {
            workers: 0,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(SpbConfig {
            noise: 0.0,
            ..base.clone()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn horizon_step_is_constant_anytime_decays() {
        let model = quad();
        let cfg = SpbConfig::measured(&model, 2, 8).unwrap();
        let a = spb_sgd_run(&model, &cfg, 50, Schedule::Horizon, 1).unwrap();
        assert!(a
            .points
            .iter()
            .all(|p| p.step_size == a.points[0].step_size));
        let b = spb_sgd_run(&model, &cfg, 50, Schedule::Anytime, 1).unwrap();
        assert!(b.points[0].step_size > b.points[49].step_size);
        assert_eq!(b.points[49].step_size, a.points[0].step_size);
    }

    #[test]
    fn noise_bound_dominates_exact_noise_on_ball() {
        let model = quad();
        let cfg = SpbConfig::measured(&model, 4, 16).unwrap();
        let radius = cfg.diameter / 2.0;
        let bound = cfg.noise * cfg.noise;
        let mut probe = model.clone();
        let dirs: [&[f64]; 3] = [
            &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            &[0.3, -0.2, 0.5, 0.1, -0.7, 0.2, 0.0, 0.4],
            &[-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0],
        ];
        for d in dirs {
            let n = norm(d);
            let blocks: Vec<Vec<f64>> = d
                .chunks(2)
                .map(|c| c.iter().map(|v| v / n * radius).collect())
                .collect();
            probe.set_params(blocks).unwrap();
            let exact = super::super::noise_at(&probe, 4, 16).unwrap();
            assert!(exact <= bound * (1.0 + 1e-12), "{exact} > {bound}");
        }
    }
}
