//! Two-layer graph convolutional network with explicit forward and
//! hand-derived backward passes.
//!
//! Layer equations, with `A` the normalized adjacency and `[M 1]` a matrix
//! extended by a ones column:
//!
//! ```text
//! X0 = [X 1];   H1 = A X0 W1;   X1 = [relu(H1) 1];   H2 = A X1 W2
//! ```
//!
//! `W1`/`W2` carry the bias as their final row. The classifier head is
//! pre-allocated for the full class count of the stream; classes not yet
//! seen are masked out of the softmax, so the parameter vector keeps a fixed
//! dimension across tasks.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;

/// Which classes participate in the softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMask {
    active: Vec<bool>,
}

impl ClassMask {
    pub fn all(num_classes: usize) -> Self {
        Self {
            active: vec![true; num_classes],
        }
    }

    pub fn from_classes(classes: &[usize], num_classes: usize) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidArg("class mask must be nonempty".into()));
        }
        let mut active = vec![false; num_classes];
        for &c in classes {
            if c >= num_classes {
                return Err(Error::InvalidArg(format!(
                    "class {c} out of range for {num_classes} classes"
                )));
            }
            active[c] = true;
        }
        Ok(Self { active })
    }

    pub fn num_classes(&self) -> usize {
        self.active.len()
    }

    pub fn is_active(&self, class: usize) -> bool {
        self.active.get(class).copied().unwrap_or(false)
    }

    pub fn active_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(c, &a)| a.then_some(c))
    }
}

/// The GCN's parameters: per-layer weight matrices with the bias as the
/// final row. Flattens column-major, layer 1 first, into a single vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    w1: DMatrix<f64>, // (d+1) x h
    w2: DMatrix<f64>, // (h+1) x C
}

impl ModelParams {
    pub fn zeros(feature_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            w1: DMatrix::zeros(feature_dim + 1, hidden_dim),
            w2: DMatrix::zeros(hidden_dim + 1, num_classes),
        }
    }

    /// Uniform Glorot initialization of the weight rows; bias rows zero.
    pub fn glorot<R: Rng>(
        feature_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = Self::zeros(feature_dim, hidden_dim, num_classes);
        let mut fill = |w: &mut DMatrix<f64>, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for j in 0..w.ncols() {
                for i in 0..fan_in {
                    w[(i, j)] = rng.random::<f64>() * 2.0 * bound - bound;
                }
            }
        };
        fill(&mut params.w1, feature_dim, hidden_dim);
        fill(&mut params.w2, hidden_dim, num_classes);
        params
    }

    pub fn from_matrices(w1: DMatrix<f64>, w2: DMatrix<f64>) -> Result<Self> {
        if w1.ncols() + 1 != w2.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "layer 1 outputs {} units but layer 2 expects {}",
                w1.ncols(),
                w2.nrows() as isize - 1
            )));
        }
        Ok(Self { w1, w2 })
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.nrows() - 1
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.ncols()
    }

    pub fn layer1(&self) -> &DMatrix<f64> {
        &self.w1
    }

    pub fn layer2(&self) -> &DMatrix<f64> {
        &self.w2
    }

    /// Length of the flat parameter vector.
    pub fn dim(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut flat = DVector::zeros(self.dim());
        flat.as_mut_slice()[..self.w1.len()].copy_from_slice(self.w1.as_slice());
        flat.as_mut_slice()[self.w1.len()..].copy_from_slice(self.w2.as_slice());
        flat
    }

    pub fn set_from_flat(&mut self, flat: &DVector<f64>) -> Result<()> {
        if flat.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has length {}, parameters need {}",
                flat.len(),
                self.dim()
            )));
        }
        let offset = self.w1.len();
        self.w1
            .as_mut_slice()
            .copy_from_slice(&flat.as_slice()[..offset]);
        self.w2
            .as_mut_slice()
            .copy_from_slice(&flat.as_slice()[offset..]);
        Ok(())
    }

    pub fn from_flat(
        feature_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        flat: &DVector<f64>,
    ) -> Result<Self> {
        let mut params = Self::zeros(feature_dim, hidden_dim, num_classes);
        params.set_from_flat(flat)?;
        Ok(params)
    }

    /// Write the checkpoint format: four little-endian u32 layer dimensions
    /// `(d+1, h, h+1, C)` followed by the flat parameters as little-endian
    /// f64, column-major per layer.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + 8 * self.dim());
        for dim in [
            self.w1.nrows() as u32,
            self.w1.ncols() as u32,
            self.w2.nrows() as u32,
            self.w2.ncols() as u32,
        ] {
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for value in self.w1.as_slice().iter().chain(self.w2.as_slice()) {
            out.extend_from_slice(&value.to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 {
            return Err(Error::InvalidArg(format!(
                "checkpoint {} is truncated",
                path.display()
            )));
        }
        let dim_at =
            |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
        let (r1, c1, r2, c2) = (dim_at(0), dim_at(1), dim_at(2), dim_at(3));
        if r1 == 0 || r2 == 0 || c1 + 1 != r2 {
            return Err(Error::InvalidArg(format!(
                "checkpoint {} has inconsistent layer dims ({r1}, {c1}, {r2}, {c2})",
                path.display()
            )));
        }
        let expected = 16 + 8 * (r1 * c1 + r2 * c2);
        if bytes.len() != expected {
            return Err(Error::InvalidArg(format!(
                "checkpoint {} has {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let mut values = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let w1 = DMatrix::from_fn(r1, c1, |_, _| 0.0).map(|_| values.next().unwrap());
        let w2 = DMatrix::from_fn(r2, c2, |_, _| 0.0).map(|_| values.next().unwrap());
        Self::from_matrices(w1, w2)
    }
}

/// Every intermediate of one forward pass, retained for backward passes and
/// label sampling. Probabilities of masked classes are exactly zero.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    x0: DMatrix<f64>,
    h1: DMatrix<f64>,
    x1: DMatrix<f64>,
    logits: DMatrix<f64>,
    log_probs: DMatrix<f64>,
    probs: DMatrix<f64>,
    mask: ClassMask,
}

impl ForwardTrace {
    pub fn num_nodes(&self) -> usize {
        self.logits.nrows()
    }

    pub fn logits(&self) -> &DMatrix<f64> {
        &self.logits
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn log_probs(&self) -> &DMatrix<f64> {
        &self.log_probs
    }

    pub fn mask(&self) -> &ClassMask {
        &self.mask
    }
}

/// Per-node gradient of the log-likelihood `log p(label | X, A, theta)` with
/// respect to the flat parameter vector, tagged with a fingerprint of the
/// parameters it was computed at.
#[derive(Debug, Clone)]
pub struct PerSampleGrad {
    pub node_id: usize,
    pub grad: DVector<f64>,
    pub label_used: usize,
    pub anchor_params_hash: u64,
}

/// FNV-1a over the raw bit patterns; identifies the parameter vector a
/// cached gradient was computed against.
pub fn params_fingerprint(theta: &DVector<f64>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for value in theta.iter() {
        for byte in value.to_le_bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

fn masked_log_softmax(logits: &DMatrix<f64>, mask: &ClassMask) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, c) = logits.shape();
    let mut log_probs = DMatrix::from_element(n, c, f64::NEG_INFINITY);
    let mut probs = DMatrix::zeros(n, c);
    for v in 0..n {
        let mut max = f64::NEG_INFINITY;
        for class in mask.active_classes() {
            max = max.max(logits[(v, class)]);
        }
        let mut denom = 0.0;
        for class in mask.active_classes() {
            denom += (logits[(v, class)] - max).exp();
        }
        let lse = max + denom.ln();
        for class in mask.active_classes() {
            let lp = logits[(v, class)] - lse;
            log_probs[(v, class)] = lp;
            probs[(v, class)] = lp.exp();
        }
    }
    (log_probs, probs)
}

/// Full-graph forward pass. Propagation always uses the whole adjacency;
/// batching happens at the loss, not here.
pub fn forward(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    mask: &ClassMask,
) -> Result<ForwardTrace> {
    let n = features.nrows();
    if adjacency.num_nodes() != n {
        return Err(Error::ShapeMismatch(format!(
            "adjacency over {} nodes, features over {n}",
            adjacency.num_nodes()
        )));
    }
    if features.ncols() != params.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "features have dim {}, model expects {}",
            features.ncols(),
            params.feature_dim()
        )));
    }
    if mask.num_classes() != params.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "mask over {} classes, model has {}",
            mask.num_classes(),
            params.num_classes()
        )));
    }

    let d = params.feature_dim();
    let h = params.hidden_dim();
    let x0 = DMatrix::from_fn(n, d + 1, |i, j| if j < d { features[(i, j)] } else { 1.0 });
    let h1 = adjacency.matmul(&(&x0 * &params.w1));
    let x1 = DMatrix::from_fn(
        n,
        h + 1,
        |i, j| {
            if j < h {
                h1[(i, j)].max(0.0)
            } else {
                1.0
            }
        },
    );
    let logits = adjacency.matmul(&(&x1 * &params.w2));
    let (log_probs, probs) = masked_log_softmax(&logits, mask);
    Ok(ForwardTrace {
        x0,
        h1,
        x1,
        logits,
        log_probs,
        probs,
        mask: mask.clone(),
    })
}

/// Backpropagate an upstream gradient on the logits to the flat parameter
/// vector. The ReLU subgradient at 0 is taken as 0.
pub fn backward_from_trace(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    trace: &ForwardTrace,
    d_logits: &DMatrix<f64>,
) -> DVector<f64> {
    let h = params.hidden_dim();
    // H2 = A X1 W2, A symmetric.
    let g2 = adjacency.matmul(d_logits);
    let d_w2 = trace.x1.transpose() * &g2;
    let d_x1 = &g2 * params.w2.transpose();
    let d_h1 = DMatrix::from_fn(d_x1.nrows(), h, |i, j| {
        if trace.h1[(i, j)] > 0.0 {
            d_x1[(i, j)]
        } else {
            0.0
        }
    });
    let g1 = adjacency.matmul(&d_h1);
    let d_w1 = trace.x0.transpose() * &g1;

    let mut flat = DVector::zeros(params.dim());
    flat.as_mut_slice()[..d_w1.len()].copy_from_slice(d_w1.as_slice());
    flat.as_mut_slice()[d_w1.len()..].copy_from_slice(d_w2.as_slice());
    flat
}

fn check_batch(trace: &ForwardTrace, batch: &[usize], labels: &[usize]) -> Result<()> {
    if batch.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} nodes with {} labels",
            batch.len(),
            labels.len()
        )));
    }
    for (&v, &y) in batch.iter().zip(labels) {
        if v >= trace.num_nodes() {
            return Err(Error::InvalidArg(format!(
                "node {v} out of range for {} nodes",
                trace.num_nodes()
            )));
        }
        if y >= trace.mask.num_classes() || !trace.mask.is_active(y) {
            return Err(Error::InvalidArg(format!(
                "label {y} is not an active class"
            )));
        }
    }
    Ok(())
}

/// Summed cross-entropy over the batch and its gradient, reusing an
/// existing forward trace.
pub fn loss_and_grad_on_trace(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    trace: &ForwardTrace,
    batch: &[usize],
    labels: &[usize],
) -> Result<(f64, DVector<f64>)> {
    check_batch(trace, batch, labels)?;
    let mut loss = 0.0;
    let mut d_logits = DMatrix::zeros(trace.num_nodes(), trace.mask.num_classes());
    for (&v, &y) in batch.iter().zip(labels) {
        loss -= trace.log_probs[(v, y)];
        for c in 0..trace.mask.num_classes() {
            d_logits[(v, c)] += trace.probs[(v, c)] - if c == y { 1.0 } else { 0.0 };
        }
    }
    Ok((
        loss,
        backward_from_trace(params, adjacency, trace, &d_logits),
    ))
}

/// `loss = sum_{v in batch} -log P[v, y_v]` and its analytic gradient.
pub fn loss_and_grad(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    batch: &[usize],
    labels: &[usize],
    mask: &ClassMask,
) -> Result<(f64, DVector<f64>)> {
    let trace = forward(params, adjacency, features, mask)?;
    loss_and_grad_on_trace(params, adjacency, &trace, batch, labels)
}

/// Gradient of a single node's log-likelihood, reusing a forward trace.
/// Note this is the negative of that node's cross-entropy gradient.
pub fn per_sample_loglik_grad_on_trace(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    trace: &ForwardTrace,
    node: usize,
    label: usize,
) -> Result<PerSampleGrad> {
    check_batch(trace, &[node], &[label])?;
    let mut d_logits = DMatrix::zeros(trace.num_nodes(), trace.mask.num_classes());
    for c in 0..trace.mask.num_classes() {
        d_logits[(node, c)] = if c == label { 1.0 } else { 0.0 } - trace.probs[(node, c)];
    }
    let grad = backward_from_trace(params, adjacency, trace, &d_logits);
    Ok(PerSampleGrad {
        node_id: node,
        grad,
        label_used: label,
        anchor_params_hash: params_fingerprint(&params.flatten()),
    })
}

pub fn per_sample_loglik_grad(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    node: usize,
    label: usize,
    mask: &ClassMask,
) -> Result<PerSampleGrad> {
    let trace = forward(params, adjacency, features, mask)?;
    per_sample_loglik_grad_on_trace(params, adjacency, &trace, node, label)
}

/// Draw a class for `node` from its predicted categorical distribution.
pub fn sample_label<R: Rng>(trace: &ForwardTrace, node: usize, rng: &mut R) -> Result<usize> {
    if node >= trace.num_nodes() {
        return Err(Error::InvalidArg(format!(
            "node {node} out of range for {} nodes",
            trace.num_nodes()
        )));
    }
    let r: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for class in trace.mask.active_classes() {
        acc += trace.probs[(node, class)];
        last = Some(class);
        if r < acc {
            return Ok(class);
        }
    }
    // Roundoff can leave acc fractionally below 1.
    Ok(last.expect("mask has at least one active class"))
}

/// Argmax prediction over active classes; ties break to the lowest class id.
pub fn predict(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    mask: &ClassMask,
) -> Result<Vec<usize>> {
    let trace = forward(params, adjacency, features, mask)?;
    Ok(predict_from_trace(&trace))
}

pub fn predict_from_trace(trace: &ForwardTrace) -> Vec<usize> {
    (0..trace.num_nodes())
        .map(|v| {
            let mut best = usize::MAX;
            let mut best_logit = f64::NEG_INFINITY;
            for class in trace.mask.active_classes() {
                let logit = trace.logits[(v, class)];
                if logit > best_logit {
                    best_logit = logit;
                    best = class;
                }
            }
            best
        })
        .collect()
}
