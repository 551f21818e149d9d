//! Structured partial backpropagation.
//!
//! Worker `j` of `k` backpropagates only through the last `⌈jL/k⌉` layers of
//! an `L`-layer model. The layers are thereby cut into `k` contiguous chunks;
//! counting from the input side, chunk `m` is covered by the `m` workers
//! `k−m+1..=k`. The parameter server averages each chunk over exactly the
//! workers that produced it.

mod model;
mod sgd;
mod variance;

pub use model::{flatten, norm_sq, BackwardTrace, Dataset, LayeredModel, ModelKind, QuadraticInfo};
pub use sgd::{
    convergence_bound, minibatch_sgd_run, noise_bound, spb_gradient, spb_sgd_run, Schedule,
    SpbConfig, Trajectory, TrajectoryPoint,
};
pub use variance::{empirical_variance, noise_at, MeanSe, VarianceEstimate};

use std::ops::Range;

use crate::error::{arg, Error, Result};

/// Number of output-side layers worker `j` (1-based) backpropagates through.
pub fn suffix_layers(j: usize, k: usize, layers: usize) -> Result<usize> {
    if k == 0 || layers == 0 {
        return arg("worker count and layer count must be positive");
    }
    if j == 0 || j > k {
        return arg(format!("worker index {j} outside 1..={k}"));
    }
    Ok((j * layers).div_ceil(k))
}

/// Workers (1-based) contributing to input-side chunk `m`.
pub fn chunk_coverage(m: usize, k: usize) -> Result<Range<usize>> {
    if m == 0 || m > k {
        return arg(format!("chunk index {m} outside 1..={k}"));
    }
    Ok(k - m + 1..k + 1)
}

/// 0-based layer range of input-side chunk `m`. Empty when `k > L` leaves
/// a chunk without layers.
pub fn chunk_layers(m: usize, k: usize, layers: usize) -> Result<Range<usize>> {
    if m == 0 || m > k {
        return arg(format!("chunk index {m} outside 1..={k}"));
    }
    let cut = |q: usize| -> usize {
        if q == 0 {
            layers
        } else {
            layers - (q * layers).div_ceil(k)
        }
    };
    // input-side chunk m is output-side chunk k−m+1
    let q = k - m + 1;
    Ok(cut(q)..cut(q - 1))
}

/// Gradient blocks produced by one worker. Blocks before `covered_from`
/// (1-based layer index) are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialGradient {
    pub blocks: Vec<Option<Vec<f64>>>,
    pub covered_from: usize,
}

impl PartialGradient {
    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn suffix_len(&self) -> usize {
        self.blocks.len() + 1 - self.covered_from
    }

    /// All blocks, failing if any is absent.
    pub fn into_dense(self) -> Result<Vec<Vec<f64>>> {
        self.blocks
            .into_iter()
            .enumerate()
            .map(|(l, b)| b.ok_or_else(|| Error::Protocol(format!("block {} absent", l + 1))))
            .collect()
    }

    fn check_shape(&self) -> Result<()> {
        let layers = self.blocks.len();
        if self.covered_from == 0 || self.covered_from > layers + 1 {
            return Err(Error::Protocol(format!(
                "covered_from {} outside 1..={}",
                self.covered_from,
                layers + 1
            )));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            if b.is_some() != (l + 1 >= self.covered_from) {
                return Err(Error::Protocol(format!(
                    "block {} presence disagrees with covered_from {}",
                    l + 1,
                    self.covered_from
                )));
            }
        }
        Ok(())
    }
}

/// Parameter-server aggregation: each chunk is the mean over the workers
/// that covered it. `grads[j-1]` must come from worker `j`.
pub fn aggregate(grads: &[PartialGradient], k: usize) -> Result<Vec<Vec<f64>>> {
    if k == 0 || grads.len() != k {
        return Err(Error::Protocol(format!(
            "expected {k} partial gradients, got {}",
            grads.len()
        )));
    }
    let layers = grads[0].num_layers();
    for (idx, g) in grads.iter().enumerate() {
        let j = idx + 1;
        if g.num_layers() != layers {
            return Err(Error::Protocol(format!(
                "worker {j} sent {} blocks, expected {layers}",
                g.num_layers()
            )));
        }
        g.check_shape()?;
        let want = layers - suffix_layers(j, k, layers)? + 1;
        if g.covered_from != want {
            return Err(Error::Protocol(format!(
                "worker {j} covers from layer {}, suffix rule says {want}",
                g.covered_from
            )));
        }
    }
    let full = &grads[k - 1];
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(layers);
    for m in 1..=k {
        let workers = chunk_coverage(m, k)?;
        let weight = m as f64;
        for l in chunk_layers(m, k, layers)? {
            let dim = full.blocks[l].as_ref().map_or(0, Vec::len);
            let mut sum: Option<Vec<f64>> = None;
            for j in workers.clone() {
                let block = grads[j - 1].blocks[l].as_ref().ok_or_else(|| {
                    Error::Protocol(format!("worker {j} missing block {}", l + 1))
                })?;
                if block.len() != dim {
                    return Err(Error::Protocol(format!(
                        "worker {j} block {} has {} entries, expected {dim}",
                        l + 1,
                        block.len()
                    )));
                }
                match sum.as_mut() {
                    None => sum = Some(block.clone()),
                    Some(s) => s.iter_mut().zip(block).for_each(|(a, b)| *a += b),
                }
            }
            let mut s = sum.expect("every chunk has at least one contributor");
            s.iter_mut().for_each(|v| *v /= weight);
            out.push(s);
        }
    }
    debug_assert_eq!(out.len(), layers);
    Ok(out)
}

/// Plain data-parallel averaging of `k` full gradients.
pub fn average_full(grads: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = grads.first() else {
        return arg("no gradients to average");
    };
    let mut sum = first.clone();
    for g in &grads[1..] {
        if g.len() != sum.len() {
            return Err(Error::Protocol("gradient layouts differ".into()));
        }
        for (a, b) in sum.iter_mut().zip(g) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
    let k = grads.len() as f64;
    sum.iter_mut().flatten().for_each(|v| *v /= k);
    Ok(sum)
}
