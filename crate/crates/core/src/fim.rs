//! Exact and approximate Fisher information for the categorical node
//! classifier.
//!
//! The exact matrix enumerates every class outcome per node, which is only
//! tractable for tiny models; it exists as a test-time oracle behind a size
//! guard. The diagonal estimators (true / sampled / predicted labels) back
//! the quadratic anchoring baselines, and the sampled batch estimator is the
//! rank-`|batch|` random matrix whose expectation is the exact Fisher.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::model::{self, ClassMask, ForwardTrace, ModelParams, PerSampleGrad};

/// Dense Fisher matrices above this parameter dimension are refused.
pub const DENSE_FIM_MAX_DIM: usize = 5000;

/// Dense symmetric positive semi-definite Fisher matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FimMatrix {
    matrix: DMatrix<f64>,
}

impl FimMatrix {
    fn from_accumulated(mut matrix: DMatrix<f64>) -> Self {
        // Kill accumulation roundoff; the exact value is symmetric.
        let t = matrix.transpose();
        matrix += t;
        matrix *= 0.5;
        Self { matrix }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(dim, dim),
        }
    }

    /// Wrap an externally assembled matrix (e.g. a sum of per-node Fisher
    /// pieces), symmetrizing away accumulation roundoff.
    pub fn from_dense(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "Fisher matrix must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let asym = (&matrix - matrix.transpose()).abs().max();
        if asym > 1e-8 * matrix.abs().max().max(1.0) {
            return Err(Error::InvalidArg(format!(
                "matrix is not symmetric (max asymmetry {asym})"
            )));
        }
        Ok(Self::from_accumulated(matrix))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix.norm()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        let eig = nalgebra::SymmetricEigen::new(self.matrix.clone());
        eig.eigenvalues.min()
    }

    /// Quadratic form `v^T F v`.
    pub fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        (&self.matrix * v).dot(v)
    }

    /// Debug dump in the checkpoint float format: two little-endian u32
    /// dimensions followed by the entries as little-endian f64,
    /// column-major.
    pub fn dump(&self, path: &std::path::Path) -> Result<()> {
        let mut out = Vec::with_capacity(8 + 8 * self.matrix.len());
        out.extend_from_slice(&(self.matrix.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.matrix.ncols() as u32).to_le_bytes());
        for value in self.matrix.as_slice() {
            out.extend_from_slice(&value.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 8 {
            return Err(Error::InvalidArg(format!(
                "Fisher dump {} is truncated",
                path.display()
            )));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 8 * rows * cols {
            return Err(Error::InvalidArg(format!(
                "Fisher dump {} has {} bytes, expected {}",
                path.display(),
                bytes.len(),
                8 + 8 * rows * cols
            )));
        }
        let mut values = bytes[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let matrix = DMatrix::from_fn(rows, cols, |_, _| 0.0).map(|_| values.next().unwrap());
        Self::from_dense(matrix)
    }
}

/// Nonnegative diagonal Fisher (or importance) vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagFim {
    values: DVector<f64>,
}

impl DiagFim {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::InvalidArg(
                "diagonal Fisher entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: DVector::zeros(dim),
        }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }
}

fn guard_dim(params: &ModelParams) -> Result<usize> {
    let dim = params.dim();
    if dim > DENSE_FIM_MAX_DIM {
        return Err(Error::FimSizeGuard {
            dim,
            max: DENSE_FIM_MAX_DIM,
        });
    }
    Ok(dim)
}

/// Per-class log-likelihood gradients of one node with their probabilities.
fn node_class_grads(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    trace: &ForwardTrace,
    node: usize,
) -> Result<Vec<(f64, DVector<f64>)>> {
    trace
        .mask()
        .active_classes()
        .map(|class| {
            let g = model::per_sample_loglik_grad_on_trace(params, adjacency, trace, node, class)?;
            Ok((trace.probs()[(node, class)], g.grad))
        })
        .collect()
}

/// Exact conditional Fisher over the given nodes: the class expectation is
/// taken in closed form, `F = sum_v sum_c P[v,c] g_{v,c} g_{v,c}^T`.
pub fn exact_fim(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    nodes: &[usize],
    mask: &ClassMask,
) -> Result<FimMatrix> {
    let dim = guard_dim(params)?;
    let trace = model::forward(params, adjacency, features, mask)?;
    let mut fim = DMatrix::zeros(dim, dim);
    for &node in nodes {
        for (p, g) in node_class_grads(params, adjacency, &trace, node)? {
            // p * g g^T, accumulated without forming the outer product.
            for j in 0..dim {
                let s = p * g[j];
                if s != 0.0 {
                    for i in 0..dim {
                        fim[(i, j)] += s * g[i];
                    }
                }
            }
        }
    }
    Ok(FimMatrix::from_accumulated(fim))
}

fn diag_from_grads<I>(dim: usize, grads: I) -> Result<DiagFim>
where
    I: IntoIterator<Item = DVector<f64>>,
{
    let mut diag = DVector::zeros(dim);
    for g in grads {
        for i in 0..dim {
            diag[i] += g[i] * g[i];
        }
    }
    DiagFim::new(diag)
}

/// Diagonal empirical Fisher using each node's true label.
pub fn diag_fim_empirical(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    nodes: &[usize],
    labels: &[usize],
    mask: &ClassMask,
) -> Result<DiagFim> {
    if nodes.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} nodes with {} labels",
            nodes.len(),
            labels.len()
        )));
    }
    let trace = model::forward(params, adjacency, features, mask)?;
    let grads = nodes
        .iter()
        .zip(labels)
        .map(|(&v, &y)| {
            model::per_sample_loglik_grad_on_trace(params, adjacency, &trace, v, y).map(|g| g.grad)
        })
        .collect::<Result<Vec<_>>>()?;
    diag_from_grads(params.dim(), grads)
}

/// Diagonal Fisher using one label per node sampled from the predictive
/// distribution.
pub fn diag_fim_sampled<R: Rng>(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    nodes: &[usize],
    rng: &mut R,
    mask: &ClassMask,
) -> Result<DiagFim> {
    let trace = model::forward(params, adjacency, features, mask)?;
    let grads = nodes
        .iter()
        .map(|&v| {
            let y = model::sample_label(&trace, v, rng)?;
            model::per_sample_loglik_grad_on_trace(params, adjacency, &trace, v, y).map(|g| g.grad)
        })
        .collect::<Result<Vec<_>>>()?;
    diag_from_grads(params.dim(), grads)
}

/// Diagonal Fisher using each node's argmax predicted label.
pub fn diag_fim_predicted(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    nodes: &[usize],
    mask: &ClassMask,
) -> Result<DiagFim> {
    let trace = model::forward(params, adjacency, features, mask)?;
    let predicted = model::predict_from_trace(&trace);
    let grads = nodes
        .iter()
        .map(|&v| {
            model::per_sample_loglik_grad_on_trace(params, adjacency, &trace, v, predicted[v])
                .map(|g| g.grad)
        })
        .collect::<Result<Vec<_>>>()?;
    diag_from_grads(params.dim(), grads)
}

/// One draw of the batch Fisher estimator: `sum_{v in batch} g_v g_v^T`
/// with each node's label sampled from the model. Rank is at most `|batch|`
/// and the expectation over label draws is `exact_fim(batch)`.
pub fn sampled_batch_fim<R: Rng>(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    batch: &[usize],
    rng: &mut R,
    mask: &ClassMask,
) -> Result<FimMatrix> {
    let dim = guard_dim(params)?;
    let trace = model::forward(params, adjacency, features, mask)?;
    let mut fim = DMatrix::zeros(dim, dim);
    for &node in batch {
        let y = model::sample_label(&trace, node, rng)?;
        let g = model::per_sample_loglik_grad_on_trace(params, adjacency, &trace, node, y)?;
        for j in 0..dim {
            let s = g.grad[j];
            if s != 0.0 {
                for i in 0..dim {
                    fim[(i, j)] += s * g.grad[i];
                }
            }
        }
    }
    Ok(FimMatrix::from_accumulated(fim))
}

/// Sample one per-node gradient at a model-drawn label, for the gradient
/// cache of the online curvature regularizer.
pub fn sample_node_grad<R: Rng>(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    trace: &ForwardTrace,
    node: usize,
    rng: &mut R,
) -> Result<PerSampleGrad> {
    let y = model::sample_label(trace, node, rng)?;
    model::per_sample_loglik_grad_on_trace(params, adjacency, trace, node, y)
}

/// Numerical rank: eigenvalues above `tol * max_eigenvalue`.
pub fn fim_rank(fim: &FimMatrix, tol: f64) -> usize {
    if fim.dim() == 0 {
        return 0;
    }
    let eig = nalgebra::SymmetricEigen::new(fim.matrix.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    if max <= 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&l| l > tol * max).count()
}

/// Default relative eigenvalue threshold for [`fim_rank`].
pub const RANK_TOL: f64 = 1e-8;
