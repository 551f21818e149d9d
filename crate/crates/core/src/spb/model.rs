use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg, Error, Result};
use crate::rng;

use super::PartialGradient;

/// Samples a model is trained on. For the chain MLP each sample is an
/// (input, target) pair; for the quadratic it is a row `a` of the design
/// matrix and its response `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return arg("dataset must not be empty");
        }
        if inputs.len() != targets.len() {
            return arg(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            ));
        }
        let dim = inputs[0].len();
        if dim == 0 || inputs.iter().any(|x| x.len() != dim) {
            return arg("inputs must share one non-zero dimension");
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    /// `h_l = tanh(W_l h_{l-1} + b_l)` for hidden layers, a linear scalar
    /// output layer, loss `½(ŷ − y)²` averaged over samples. Each layer's
    /// block is `W_l` (row-major) followed by `b_l`.
    ChainMlp { input_dim: usize, width: usize },
    /// `f(x) = 1/(2N) ‖Ax − b‖²` with `x` split into contiguous blocks.
    ConvexQuadratic(QuadraticInfo),
}

/// Closed-form quantities of the quadratic, fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticInfo {
    /// Hessian `AᵀA / N`.
    pub hessian: DMatrix<f64>,
    pub optimum: Vec<f64>,
    pub optimal_loss: f64,
    /// Largest eigenvalue of the Hessian.
    pub smoothness: f64,
}

/// An L-layer model whose parameters are stored as one block per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    kind: ModelKind,
    blocks: Vec<Vec<f64>>,
    data: Dataset,
}

/// Which layers a reverse pass actually touched.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BackwardTrace {
    /// 1-based layer indices, in the order they were visited.
    pub layers_visited: Vec<usize>,
}

impl LayeredModel {
    pub fn chain_mlp(
        input_dim: usize,
        width: usize,
        layers: usize,
        data: Dataset,
        seed: u64,
    ) -> Result<Self> {
        if layers == 0 || width == 0 || input_dim == 0 {
            return arg("chain MLP needs at least one layer and non-zero widths");
        }
        if data.dim() != input_dim {
            return arg(format!(
                "dataset dim {} does not match input dim {input_dim}",
                data.dim()
            ));
        }
        let mut r = rng::stream(seed, 0);
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let (rows, cols) = mlp_shape(input_dim, width, layers, l);
            let scale = 1.0 / (cols as f64).sqrt();
            let mut block = Vec::with_capacity(rows * cols + rows);
            for _ in 0..rows * cols {
                let z: f64 = StandardNormal.sample(&mut r);
                block.push(z * scale);
            }
            for _ in 0..rows {
                block.push(r.random_range(-0.1..0.1));
            }
            blocks.push(block);
        }
        Ok(LayeredModel {
            kind: ModelKind::ChainMlp { input_dim, width },
            blocks,
            data,
        })
    }

    /// Builds the quadratic with parameters initialised to zero.
    /// `block_sizes` gives the number of coordinates in each layer.
    pub fn convex_quadratic(data: Dataset, block_sizes: &[usize]) -> Result<Self> {
        if block_sizes.is_empty() || block_sizes.contains(&0) {
            return arg("every parameter block must be non-empty");
        }
        let n: usize = block_sizes.iter().sum();
        if data.dim() != n {
            return arg(format!(
                "rows have {} columns but blocks cover {n}",
                data.dim()
            ));
        }
        let rows = data.len();
        let a = DMatrix::from_fn(rows, n, |i, j| data.inputs[i][j]);
        let b = DVector::from_column_slice(&data.targets);
        let scale = 1.0 / rows as f64;
        let hessian = a.transpose() * &a * scale;
        let eig = hessian.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        let smoothness = eig.eigenvalues.max();
        if min_eig <= smoothness * 1e-12 {
            return Err(Error::Config(
                "design matrix must have full column rank".into(),
            ));
        }
        let rhs = a.transpose() * &b * scale;
        let x_star = hessian
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config("Hessian is not positive definite".into()))?
            .solve(&rhs);
        let resid = &a * &x_star - &b;
        let optimal_loss = 0.5 * scale * resid.norm_squared();
        let blocks = block_sizes.iter().map(|&s| vec![0.0; s]).collect();
        Ok(LayeredModel {
            kind: ModelKind::ConvexQuadratic(QuadraticInfo {
                hessian,
                optimum: x_star.as_slice().to_vec(),
                optimal_loss,
                smoothness,
            }),
            blocks,
            data,
        })
    }

    /// Random well-conditioned least-squares problem: Gaussian rows, a
    /// planted solution and Gaussian label noise.
    pub fn random_quadratic(
        samples: usize,
        block_sizes: &[usize],
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        let n: usize = block_sizes.iter().sum();
        let mut r = rng::stream(seed, 1);
        let planted: Vec<f64> = (0..n)
            .map(|_| StandardNormal.sample(&mut r))
            .collect::<Vec<f64>>();
        let mut inputs = Vec::with_capacity(samples);
        let mut targets = Vec::with_capacity(samples);
        for _ in 0..samples {
            let row: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
            let eps: f64 = StandardNormal.sample(&mut r);
            targets.push(dot(&row, &planted) + noise * eps);
            inputs.push(row);
        }
        Self::convex_quadratic(Dataset::new(inputs, targets)?, block_sizes)
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn quadratic(&self) -> Option<&QuadraticInfo> {
        match &self.kind {
            ModelKind::ConvexQuadratic(q) => Some(q),
            ModelKind::ChainMlp { .. } => None,
        }
    }

    pub fn is_convex(&self) -> bool {
        self.quadratic().is_some()
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.blocks
    }

    pub fn set_params(&mut self, blocks: Vec<Vec<f64>>) -> Result<()> {
        if blocks.len() != self.blocks.len()
            || blocks
                .iter()
                .zip(&self.blocks)
                .any(|(a, b)| a.len() != b.len())
        {
            return arg("parameter blocks do not match the model layout");
        }
        self.blocks = blocks;
        Ok(())
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn num_samples(&self) -> usize {
        self.data.len()
    }

    /// Mean loss over the whole dataset at the current parameters.
    pub fn loss(&self) -> f64 {
        let n = self.data.len();
        let total: f64 = (0..n).map(|i| self.sample_loss(i)).sum();
        total / n as f64
    }

    pub fn sample_loss(&self, sample: usize) -> f64 {
        let y = self.data.targets[sample];
        let yhat = match &self.kind {
            ModelKind::ConvexQuadratic(_) => dot_blocks(&self.blocks, &self.data.inputs[sample]),
            ModelKind::ChainMlp { .. } => {
                let acts = self.mlp_forward(&self.data.inputs[sample]);
                acts[acts.len() - 1][0]
            }
        };
        0.5 * (yhat - y) * (yhat - y)
    }

    /// Reverse pass over the last `suffix` layers, averaged over `batch`.
    /// Layers outside the suffix are absent and never touched.
    pub fn partial_backprop(&self, batch: &[usize], suffix: usize) -> Result<PartialGradient> {
        self.partial_backprop_traced(batch, suffix).map(|(g, _)| g)
    }

    pub fn partial_backprop_traced(
        &self,
        batch: &[usize],
        suffix: usize,
    ) -> Result<(PartialGradient, BackwardTrace)> {
        let layers = self.num_layers();
        if suffix == 0 || suffix > layers {
            return arg(format!("suffix {suffix} outside 1..={layers}"));
        }
        if batch.is_empty() {
            return arg("batch must not be empty");
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= self.data.len()) {
            return arg(format!("sample index {bad} out of range"));
        }
        let start = layers - suffix;
        let mut acc: Vec<Vec<f64>> = self.blocks[start..]
            .iter()
            .map(|b| vec![0.0; b.len()])
            .collect();
        let mut trace = BackwardTrace::default();
        for &i in batch {
            self.accumulate_sample(i, start, &mut acc, &mut trace);
        }
        let inv = batch.len() as f64;
        for block in &mut acc {
            for v in block.iter_mut() {
                *v /= inv;
            }
        }
        let mut blocks: Vec<Option<Vec<f64>>> = vec![None; start];
        blocks.extend(acc.into_iter().map(Some));
        Ok((
            PartialGradient {
                blocks,
                covered_from: start + 1,
            },
            trace,
        ))
    }

    /// Exact gradient of the dataset loss.
    pub fn full_gradient(&self) -> Vec<Vec<f64>> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        self.partial_backprop(&all, self.num_layers())
            .expect("full suffix over non-empty dataset")
            .into_dense()
            .expect("full suffix covers every block")
    }

    /// Gradient of one sample's loss, all layers.
    pub fn sample_gradient(&self, sample: usize) -> Vec<Vec<f64>> {
        let mut acc: Vec<Vec<f64>> = self.blocks.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut trace = BackwardTrace::default();
        self.accumulate_sample(sample, 0, &mut acc, &mut trace);
        acc
    }

    /// Adds the gradient of sample `i` for layers `start..L` (0-based) into
    /// `acc`, which holds only those layers.
    fn accumulate_sample(
        &self,
        i: usize,
        start: usize,
        acc: &mut [Vec<f64>],
        trace: &mut BackwardTrace,
    ) {
        let x = &self.data.inputs[i];
        let y = self.data.targets[i];
        match &self.kind {
            ModelKind::ConvexQuadratic(_) => {
                let r = dot_blocks(&self.blocks, x) - y;
                let mut offset: usize = self.blocks[..start].iter().map(Vec::len).sum();
                for (l, block) in acc.iter_mut().enumerate() {
                    trace.layers_visited.push(start + l + 1);
                    for (c, g) in block.iter_mut().enumerate() {
                        *g += x[offset + c] * r;
                    }
                    offset += block.len();
                }
            }
            ModelKind::ChainMlp { .. } => {
                let acts = self.mlp_forward(x);
                let layers = self.blocks.len();
                // dL/dz for the output layer
                let mut delta = vec![acts[layers][0] - y];
                for l in (start..layers).rev() {
                    trace.layers_visited.push(l + 1);
                    let input = &acts[l];
                    let rows = delta.len();
                    let cols = input.len();
                    let g = &mut acc[l - start];
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += delta[r] * input[c];
                        }
                        g[rows * cols + r] += delta[r];
                    }
                    if l > start {
                        let w = &self.blocks[l];
                        let mut prev = vec![0.0; cols];
                        for (c, p) in prev.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for r in 0..rows {
                                s += w[r * cols + c] * delta[r];
                            }
                            // acts[l] = tanh(z_{l-1})
                            *p = s * (1.0 - input[c] * input[c]);
                        }
                        delta = prev;
                    }
                }
            }
        }
    }

    /// Activations `h_0 = x, h_1, …, h_L` where `h_L` is the scalar output.
    fn mlp_forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.blocks.len();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        for (l, w) in self.blocks.iter().enumerate() {
            let input = &acts[l];
            let cols = input.len();
            let rows = w.len() / (cols + 1);
            let mut out = Vec::with_capacity(rows);
            for r in 0..rows {
                let mut z = w[rows * cols + r];
                for c in 0..cols {
                    z += w[r * cols + c] * input[c];
                }
                out.push(if l + 1 < layers { z.tanh() } else { z });
            }
            acts.push(out);
        }
        acts
    }

    /// Largest per-sample gradient norm over the dataset at the current
    /// parameters.
    pub fn max_sample_gradient_norm(&self) -> f64 {
        (0..self.data.len())
            .map(|i| norm_sq(&self.sample_gradient(i)).sqrt())
            .fold(0.0, f64::max)
    }
}

fn mlp_shape(input_dim: usize, width: usize, layers: usize, l: usize) -> (usize, usize) {
    let cols = if l == 0 { input_dim } else { width };
    let rows = if l + 1 == layers { 1 } else { width };
    (rows, cols)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot_blocks(blocks: &[Vec<f64>], row: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut offset = 0;
    for block in blocks {
        for (c, v) in block.iter().enumerate() {
            s += v * row[offset + c];
        }
        offset += block.len();
    }
    s
}

pub fn norm_sq(blocks: &[Vec<f64>]) -> f64 {
    blocks.iter().flatten().map(|v| v * v).sum()
}

pub fn flatten(blocks: &[Vec<f64>]) -> Vec<f64> {
    blocks.iter().flatten().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_mlp(layers: usize, seed: u64) -> LayeredModel {
        let mut r = rng::stream(seed, 7);
        let inputs: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let targets = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        LayeredModel::chain_mlp(3, 4, layers, Dataset::new(inputs, targets).unwrap(), seed).unwrap()
    }

    #[test]
    fn mlp_gradient_matches_central_differences() {
        let model = tiny_mlp(3, 11);
        let batch: Vec<usize> = (0..12).collect();
        let g = model
            .partial_backprop(&batch, 3)
            .unwrap()
            .into_dense()
            .unwrap();
        let h = 1e-5;
        for (l, gl) in g.iter().enumerate() {
            for (c, &gc) in gl.iter().enumerate() {
                let mut plus = model.clone();
                plus.params_mut()[l][c] += h;
                let mut minus = model.clone();
                minus.params_mut()[l][c] -= h;
                let fd = (plus.loss() - minus.loss()) / (2.0 * h);
                let denom = fd.abs().max(gc.abs()).max(1e-8);
                assert!(
                    (fd - gc).abs() / denom < 1e-5,
                    "layer {l} coord {c}: fd {fd} vs {gc}"
                );
            }
        }
    }

    #[test]
    fn suffix_blocks_are_bitwise_equal_and_prefix_untouched() {
        let model = tiny_mlp(4, 3);
        let batch = [0, 3, 5, 7, 7];
        let full = model.partial_backprop(&batch, 4).unwrap();
        let (part, trace) = model.partial_backprop_traced(&batch, 2).unwrap();
        assert_eq!(part.covered_from, 3);
        assert!(part.blocks[0].is_none() && part.blocks[1].is_none());
        assert_eq!(part.blocks[2], full.blocks[2]);
        assert_eq!(part.blocks[3], full.blocks[3]);
        assert!(trace.layers_visited.iter().all(|&l| l >= 3));
        assert_eq!(trace.layers_visited.len(), 2 * batch.len());
    }

    #[test]
    fn suffix_out_of_range() {
        let model = tiny_mlp(2, 1);
        assert!(model.partial_backprop(&[0], 0).is_err());
        assert!(model.partial_backprop(&[0], 3).is_err());
        assert!(model.partial_backprop(&[], 1).is_err());
    }

    #[test]
    fn quadratic_optimum_has_zero_gradient() {
        let mut model = LayeredModel::random_quadratic(64, &[2, 3, 1], 0.3, 5).unwrap();
        let q = model.quadratic().unwrap().clone();
        let mut blocks = Vec::new();
        let mut off = 0;
        for s in model.block_sizes() {
            blocks.push(q.optimum[off..off + s].to_vec());
            off += s;
        }
        model.set_params(blocks).unwrap();
        assert!(norm_sq(&model.full_gradient()) < 1e-20);
        assert!((model.loss() - q.optimal_loss).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_quadratic_rejected() {
        let inputs = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        let data = Dataset::new(inputs, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            LayeredModel::convex_quadratic(data, &[1, 1]),
            Err(Error::Config(_))
        ));
    }
}
