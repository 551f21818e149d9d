//! The SPB invariant suite run by `jigsaw verify`.

use std::path::Path;

use anyhow::Result;
use jigsaw_core::oracle::{coverage_oracle, variance_oracle};
use jigsaw_core::par::Exec;
use jigsaw_core::rng;
use jigsaw_core::spb::{
    aggregate, chunk_coverage, chunk_layers, convergence_bound, empirical_variance, flatten,
    minibatch_sgd_run, spb_gradient, spb_sgd_run, suffix_layers, Dataset, LayeredModel, Schedule,
    SpbConfig,
};
use rand::Rng as _;

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub workers: usize,
    pub batch: usize,
    pub trials: usize,
    pub iterations: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            workers: 4,
            batch: 64,
            trials: 10_000,
            iterations: 5000,
            seed: 0,
            exec: Exec::Auto,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

/// Quadratic used by the statistical checks: `max(8, k)` blocks of two
/// coordinates, 256 samples, evaluated at the origin.
pub fn test_quadratic(workers: usize, seed: u64) -> Result<LayeredModel> {
    let blocks = vec![2; workers.max(8)];
    Ok(LayeredModel::random_quadratic(256, &blocks, 0.5, seed)?)
}

fn tiny_mlp(layers: usize, seed: u64) -> Result<LayeredModel> {
    let mut r = rng::stream(seed, 99);
    let inputs: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let targets: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    Ok(LayeredModel::chain_mlp(
        3,
        4,
        layers,
        Dataset::new(inputs, targets)?,
        seed,
    )?)
}

fn gradient_check(seed: u64) -> Result<Check> {
    let mut model = tiny_mlp(3, seed)?;
    let g = flatten(&model.full_gradient());
    let h = 1e-5;
    let mut fd = Vec::with_capacity(g.len());
    let sizes = model.block_sizes();
    for (l, &n) in sizes.iter().enumerate() {
        for c in 0..n {
            let orig = model.params()[l][c];
            model.params_mut()[l][c] = orig + h;
            let up = model.loss();
            model.params_mut()[l][c] = orig - h;
            let down = model.loss();
            model.params_mut()[l][c] = orig;
            fd.push((up - down) / (2.0 * h));
        }
    }
    let err: f64 = g
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
    let rel = err / scale;
    Ok(Check::new(
        "gradient_check",
        rel < 1e-5,
        format!("chain MLP L=3, central differences h=1e-5: relative error {rel:.2e} (< 1e-5)"),
    ))
}

fn suffix_exact(seed: u64) -> Result<Check> {
    let model = tiny_mlp(4, seed)?;
    let batch: Vec<usize> = (0..8).collect();
    let full = model.partial_backprop(&batch, 4)?.into_dense()?;
    let mut ok = true;
    for s in 1..=4 {
        let (g, trace) = model.partial_backprop_traced(&batch, s)?;
        for (l, present) in g.blocks.iter().enumerate() {
            if l < 4 - s {
                ok &= present.is_none();
            } else {
                ok &= present.as_deref() == Some(&full[l][..]);
            }
        }
        ok &= trace.layers_visited.iter().all(|&l| l > 4 - s);
    }
    Ok(Check::new(
        "suffix_exact",
        ok,
        "chain MLP L=4: every suffix bitwise equal to the full pass, prefix untouched",
    ))
}

fn coverage(k: usize) -> Result<Check> {
    let mut ok = true;
    for layers in 1..=32 {
        let counts = coverage_oracle(k, layers)?;
        for m in 1..=k {
            let workers = chunk_coverage(m, k)?;
            ok &= workers.len() == m;
            let expect = (!chunk_layers(m, k, layers)?.is_empty()).then_some(m);
            ok &= counts[m - 1] == expect;
        }
        for j in 1..=k {
            let covered: usize = (1..=k)
                .filter(|&m| {
                    chunk_coverage(m, k)
                        .map(|r| r.contains(&j))
                        .unwrap_or(false)
                })
                .map(|m| chunk_layers(m, k, layers).map(|r| r.len()).unwrap_or(0))
                .sum();
            ok &= covered == suffix_layers(j, k, layers)?;
        }
    }
    Ok(Check::new(
        "coverage",
        ok,
        format!("k={k}, L=1..32: chunk m has m contributors, union matches every suffix"),
    ))
}

fn degeneracy(cfg: &VerifyConfig) -> Result<Check> {
    let model = test_quadratic(1, cfg.seed)?;
    let c = SpbConfig::measured(&model, 1, cfg.batch)?;
    let a = spb_sgd_run(&model, &c, 200, Schedule::Horizon, cfg.seed)?;
    let b = minibatch_sgd_run(&model, &c, 200, Schedule::Horizon, cfg.seed)?;
    let trials = cfg.trials.min(2000);
    let est = empirical_variance(&model, &c, trials, cfg.seed, cfg.exec)?;
    let orc = variance_oracle(&model, &c, trials, cfg.seed, cfg.exec)?;
    let ok = a == b && est.spb == est.baseline && orc.spb == est.spb;
    Ok(Check::new(
        "k1_degeneracy",
        ok,
        "k=1: SPB-SGD trajectory, variance estimate and oracle all identical to mini-batch",
    ))
}

/// Variance checks: the mini-batch bound `2P²k/B`, the SPB bound with its
/// `log₂k` factor, and the harmonic per-chunk identity against the oracle.
pub fn variance_checks(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let k = cfg.workers;
    let model = test_quadratic(k, cfg.seed)?;
    let c = SpbConfig::measured(&model, k, cfg.batch)?;
    let p2 = c.grad_bound * c.grad_bound;
    let kb = k as f64 / cfg.batch as f64;
    let est = empirical_variance(&model, &c, cfg.trials, cfg.seed, cfg.exec)?;
    let orc = variance_oracle(&model, &c, cfg.trials, rng::derive(cfg.seed, 1), cfg.exec)?;
    let mut out = Vec::new();
    let mb_bound = 2.0 * p2 * kb;
    out.push(Check::new(
        "baseline_bound",
        est.baseline.below(mb_bound, 3.0),
        format!(
            "k={k} B={}: baseline {:.4e} ± {:.1e} ≤ 2P²k/B = {mb_bound:.4e}",
            cfg.batch, est.baseline.mean, est.baseline.se
        ),
    ));
    if k >= 2 {
        let bound = 2.0 * p2 * kb * (k as f64).log2();
        out.push(Check::new(
            "spb_bound",
            est.spb.below(bound, 3.0),
            format!(
                "k={k} B={}: SPB {:.4e} ± {:.1e} ≤ 2P²(k/B)log₂k = {bound:.4e}",
                cfg.batch, est.spb.mean, est.spb.se
            ),
        ));
    }
    out.push(Check::new(
        "harmonic_identity",
        est.spb.agrees(&orc.harmonic, 3.0),
        format!(
            "SPB {:.4e} ± {:.1e} vs Σ k/(iB)·p̂ᵢ {:.4e} ± {:.1e}",
            est.spb.mean, est.spb.se, orc.harmonic.mean, orc.harmonic.se
        ),
    ));
    Ok(out)
}

pub fn unbiasedness(cfg: &VerifyConfig) -> Result<Check> {
    let k = cfg.workers;
    let model = test_quadratic(k, cfg.seed)?;
    let c = SpbConfig::measured(&model, k, cfg.batch)?;
    let truth = model.full_gradient();
    let draws: Vec<Vec<Vec<f64>>> = jigsaw_core::par::map_indexed(cfg.exec, cfg.trials, |t| {
        spb_gradient(&model, &c, rng::derive(cfg.seed ^ 0x5eed, t as u64)).expect("valid config")
    });
    let n = draws.len() as f64;
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for (l, block) in truth.iter().enumerate() {
        let (mut err2, mut se2) = (0.0, 0.0);
        for (i, &g) in block.iter().enumerate() {
            let xs: Vec<f64> = draws.iter().map(|d| d[l][i]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            err2 += (mean - g) * (mean - g);
            se2 += var / n;
        }
        let z = (err2 / se2).sqrt();
        worst = worst.max(z);
        ok &= z <= 3.0;
    }
    Ok(Check::new(
        "unbiased_aggregate",
        ok,
        format!("k={k}: mean aggregate within {worst:.2} (≤ 3) standard errors of ∇f per block"),
    ))
}

pub fn convergence(cfg: &VerifyConfig, out_dir: Option<&Path>) -> Result<Check> {
    let k = cfg.workers;
    let model = test_quadratic(k, cfg.seed)?;
    let c = SpbConfig::measured(&model, k, cfg.batch)?;
    let beta = model.quadratic().expect("quadratic").smoothness;
    let traj = spb_sgd_run(&model, &c, cfg.iterations, Schedule::Horizon, cfg.seed)?;
    if let Some(dir) = out_dir {
        traj.write_csv(&dir.join(format!("trajectory_k{k}.csv")))?;
    }
    let sub = traj.final_suboptimality().unwrap_or(f64::INFINITY);
    let bound = convergence_bound(c.diameter, c.noise, beta, cfg.iterations);
    Ok(Check::new(
        "convergence_bound",
        sub <= bound,
        format!(
            "k={k} t={}: f(x̄)−f* = {sub:.4e} ≤ R√(2V²/t)+βR²/t = {bound:.4e} (R={:.3}, V={:.3}, β={:.3})",
            cfg.iterations, c.diameter, c.noise, beta
        ),
    ))
}

/// First iteration at which the seed-averaged loss of the averaged iterate
/// falls to `target` suboptimality, or `None` within `iterations`.
pub fn iterations_to_target(
    model: &LayeredModel,
    workers: usize,
    batch: usize,
    iterations: usize,
    seeds: u64,
    target: f64,
    exec: Exec,
) -> Result<Option<usize>> {
    let c = SpbConfig::measured(model, workers, batch)?;
    let runs = jigsaw_core::par::map_indexed(exec, seeds as usize, |s| {
        spb_sgd_run(model, &c, iterations, Schedule::Constant, s as u64)
    });
    let runs = runs.into_iter().collect::<jigsaw_core::Result<Vec<_>>>()?;
    for i in 0..iterations {
        let mean = runs
            .iter()
            .map(|r| r.points[i].suboptimality.unwrap_or(f64::INFINITY))
            .sum::<f64>()
            / seeds as f64;
        if mean <= target {
            return Ok(Some(i + 1));
        }
    }
    Ok(None)
}

/// More workers at the same global batch need at least as many iterations
/// to reach a fixed loss.
pub fn worker_scaling(cfg: &VerifyConfig, pair: (usize, usize)) -> Result<Check> {
    let (a, b) = pair;
    let model = test_quadratic(b, cfg.seed)?;
    let gap = model.loss() - model.quadratic().expect("quadratic").optimal_loss;
    let target = 5e-4 * gap;
    let iters = cfg.iterations.min(500);
    let na = iterations_to_target(&model, a, cfg.batch, iters, 64, target, cfg.exec)?;
    let nb = iterations_to_target(&model, b, cfg.batch, iters, 64, target, cfg.exec)?;
    let ok = match (na, nb) {
        (Some(x), Some(y)) => x <= y,
        (_, None) => true,
        (None, Some(_)) => false,
    };
    let show = |n: Option<usize>| n.map_or("not reached".to_string(), |v| v.to_string());
    Ok(Check::new(
        "worker_scaling",
        ok,
        format!(
            "B={}, mean of 64 runs: iterations to 0.05% of the initial gap: k={a} {}, k={b} {}",
            cfg.batch,
            show(na),
            show(nb)
        ),
    ))
}

/// Runs the whole suite; the caller turns failures into an exit code.
pub fn run_suite(cfg: &VerifyConfig, out_dir: Option<&Path>) -> Result<Vec<Check>> {
    let mut checks = vec![
        gradient_check(cfg.seed)?,
        suffix_exact(cfg.seed)?,
        coverage(cfg.workers)?,
        degeneracy(cfg)?,
    ];
    // aggregate() rejects masks that break the suffix rule
    let model = test_quadratic(cfg.workers, cfg.seed)?;
    let k = cfg.workers;
    if k >= 2 {
        let batch = [0usize];
        let mut grads = (1..=k)
            .map(|j| model.partial_backprop(&batch, suffix_layers(j, k, model.num_layers())?))
            .collect::<jigsaw_core::Result<Vec<_>>>()?;
        grads.swap(0, k - 1);
        checks.push(Check::new(
            "coverage_mask_rejected",
            aggregate(&grads, k).is_err(),
            "swapped worker masks are refused with a protocol error",
        ));
    }
    checks.extend(variance_checks(cfg)?);
    checks.push(unbiasedness(cfg)?);
    checks.push(convergence(cfg, out_dir)?);
    if cfg.batch.is_multiple_of(2 * cfg.workers) {
        checks.push(worker_scaling(cfg, (cfg.workers, 2 * cfg.workers))?);
    }
    Ok(checks)
}
