//! Penalty strategies added to the task loss to protect earlier tasks.
//!
//! Quadratic anchoring (EWC variants, online EWC, MAS) weights parameter
//! displacement from stored snapshots by a diagonal importance vector. LwF
//! distills the previous model's tempered logits. The online curvature
//! strategy keeps no importance state at all: it caches recent sampled-label
//! per-node gradients in a FIFO queue and penalizes the displacement's
//! projection onto them, which estimates the full-Fisher quadratic form
//! without ever materializing a Fisher matrix.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::fim::{self, DiagFim};
use crate::graph::NormalizedAdjacency;
use crate::model::{self, ClassMask, ModelParams, PerSampleGrad};

/// Available regularization strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Plain sequential fine-tuning.
    None,
    /// Quadratic anchoring, diagonal Fisher from true labels.
    EwcEmpirical,
    /// Quadratic anchoring, diagonal Fisher from model-sampled labels.
    EwcSampled,
    /// Quadratic anchoring, diagonal Fisher from argmax labels.
    EwcPredicted,
    /// Single anchor with a gamma-decayed running diagonal Fisher.
    OnlineEwc,
    /// Quadratic anchoring weighted by output-norm sensitivity.
    Mas,
    /// Distillation of the previous model's tempered logits.
    Lwf,
    /// Online full-curvature estimate via the sampled-gradient cache.
    OnlineCurvature,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::EwcEmpirical => "ewc_empirical",
            Strategy::EwcSampled => "ewc_sampled",
            Strategy::EwcPredicted => "ewc_predicted",
            Strategy::OnlineEwc => "online_ewc",
            Strategy::Mas => "mas",
            Strategy::Lwf => "lwf",
            Strategy::OnlineCurvature => "online_curvature",
        }
    }

    pub const ALL: [Strategy; 8] = [
        Strategy::None,
        Strategy::EwcEmpirical,
        Strategy::EwcSampled,
        Strategy::EwcPredicted,
        Strategy::OnlineEwc,
        Strategy::Mas,
        Strategy::Lwf,
        Strategy::OnlineCurvature,
    ];
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?}; expected one of {:?}",
                    Strategy::ALL.map(|k| k.as_str())
                ))
            })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Strategy hyperparameters. `lambda` scales every quadratic penalty;
/// LwF uses `temperature` and `lambda_dist`, online EWC the decay `gamma`,
/// and the curvature strategy the queue capacity. `ema_beta` optionally
/// overrides the trainer's snapshot smoothing for this strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct RegConfig {
    pub strategy: Strategy,
    pub lambda: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub lambda_dist: f64,
    pub queue_capacity: usize,
    pub ema_beta: Option<f64>,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::OnlineCurvature,
            lambda: 0.1,
            gamma: 0.95,
            temperature: 2.0,
            lambda_dist: 1.0,
            queue_capacity: 128,
            ema_beta: None,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1]".into()));
        }
        if self.queue_capacity < 1 {
            return Err(Error::Config("queue capacity must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.lambda_dist < 0.0 {
            return Err(Error::Config("lambda_dist must be >= 0".into()));
        }
        if let Some(beta) = self.ema_beta {
            if !(0.0..=1.0).contains(&beta) {
                return Err(Error::Config("ema_beta must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// The knob that actually scales this strategy's penalty.
    pub fn strength(&self) -> f64 {
        match self.strategy {
            Strategy::Lwf => self.lambda_dist,
            _ => self.lambda,
        }
    }
}

/// Per-strategy state attached to an anchor.
#[derive(Debug, Clone, PartialEq)]
pub enum AnchorExtra {
    None,
    /// Diagonal Fisher (per-task for EWC, running for online EWC).
    Fim(DiagFim),
    /// MAS output-sensitivity importance.
    Importance(DiagFim),
}

impl AnchorExtra {
    fn weights(&self) -> Option<&DiagFim> {
        match self {
            AnchorExtra::Fim(d) | AnchorExtra::Importance(d) => Some(d),
            AnchorExtra::None => None,
        }
    }
}

/// A completed task's parameter snapshot plus strategy state.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub task_id: usize,
    pub params: DVector<f64>,
    pub extra: AnchorExtra,
}

/// Snapshots of all completed tasks, in task order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, anchor: Anchor) -> Result<()> {
        if let Some(last) = self.anchors.last() {
            if anchor.task_id <= last.task_id {
                return Err(Error::InvalidArg(format!(
                    "anchor task ids must increase: {} after {}",
                    anchor.task_id, last.task_id
                )));
            }
            if anchor.params.len() != last.params.len() {
                return Err(Error::ShapeMismatch(
                    "anchor parameter dimensions differ".into(),
                ));
            }
        }
        self.anchors.push(anchor);
        Ok(())
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn last(&self) -> Option<&Anchor> {
        self.anchors.last()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// FIFO queue of sampled per-node gradients, capacity `M`. Evicts from the
/// front; cleared at every task boundary.
#[derive(Debug, Clone)]
pub struct GradCache {
    queue: VecDeque<PerSampleGrad>,
    capacity: usize,
}

impl GradCache {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("gradient cache capacity must be >= 1".into()));
        }
        Ok(Self {
            queue: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    pub fn push(&mut self, grad: PerSampleGrad) {
        if let Some(front) = self.queue.front() {
            assert_eq!(
                front.grad.len(),
                grad.grad.len(),
                "cached gradient dimensions must agree"
            );
        }
        assert!(
            grad.grad.iter().all(|x| x.is_finite()),
            "cached gradients must be finite"
        );
        if self.queue.len() == self.capacity {
            self.queue.pop_front();
        }
        self.queue.push_back(grad);
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &PerSampleGrad> {
        self.queue.iter()
    }
}

/// Quadratic anchoring penalty shared by the EWC variants and MAS:
/// `(lambda/2) * sum_t sum_i w_{t,i} (theta_i - theta_{t,i})^2` with exact
/// gradient `lambda * sum_t w_t .* (theta - theta_t)`.
///
/// Every anchor must carry a diagonal weight vector.
pub fn ewc_penalty(
    theta: &DVector<f64>,
    anchors: &[Anchor],
    lambda: f64,
) -> Result<(f64, DVector<f64>)> {
    let mut penalty = 0.0;
    let mut grad = DVector::zeros(theta.len());
    for anchor in anchors {
        let weights = anchor.extra.weights().ok_or_else(|| {
            Error::Config(format!(
                "anchor for task {} carries no importance weights",
                anchor.task_id
            ))
        })?;
        if weights.len() != theta.len() || anchor.params.len() != theta.len() {
            return Err(Error::ShapeMismatch(
                "anchor and parameter dimensions differ".into(),
            ));
        }
        for i in 0..theta.len() {
            let delta = theta[i] - anchor.params[i];
            let w = weights.values()[i];
            penalty += 0.5 * lambda * w * delta * delta;
            grad[i] += lambda * w * delta;
        }
    }
    Ok((penalty, grad))
}

/// Decayed accumulation of the running diagonal Fisher:
/// `F <- gamma * F + F_new`.
pub fn online_ewc_update(running: &DiagFim, new_task_fim: &DiagFim, gamma: f64) -> Result<DiagFim> {
    if running.len() != new_task_fim.len() {
        return Err(Error::ShapeMismatch(format!(
            "running Fisher has length {}, new has {}",
            running.len(),
            new_task_fim.len()
        )));
    }
    DiagFim::new(running.values() * gamma + new_task_fim.values())
}

/// MAS importance: mean absolute sensitivity of the squared L2 norm of each
/// node's softmax output to each parameter,
/// `Omega_i = (1/|nodes|) * sum_v |d ||p_v||^2 / d theta_i|`.
pub fn mas_importance(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    nodes: &[usize],
    mask: &ClassMask,
) -> Result<DiagFim> {
    if nodes.is_empty() {
        return Err(Error::InvalidArg(
            "MAS importance needs a nonempty node list".into(),
        ));
    }
    let trace = model::forward(params, adjacency, features, mask)?;
    let num_classes = mask.num_classes();
    let mut omega = DVector::zeros(params.dim());
    for &v in nodes {
        if v >= trace.num_nodes() {
            return Err(Error::InvalidArg(format!(
                "node {v} out of range for {} nodes",
                trace.num_nodes()
            )));
        }
        // d ||p||^2 / d logit_j = 2 p_j (p_j - ||p||^2) for active classes.
        let norm_sq: f64 = mask
            .active_classes()
            .map(|c| trace.probs()[(v, c)] * trace.probs()[(v, c)])
            .sum();
        let mut d_logits = DMatrix::zeros(trace.num_nodes(), num_classes);
        for c in mask.active_classes() {
            let p = trace.probs()[(v, c)];
            d_logits[(v, c)] = 2.0 * p * (p - norm_sq);
        }
        let g = model::backward_from_trace(params, adjacency, &trace, &d_logits);
        for i in 0..omega.len() {
            omega[i] += g[i].abs();
        }
    }
    omega /= nodes.len() as f64;
    DiagFim::new(omega)
}

/// Gradient of the squared softmax-output norm of a single node, exposed so
/// the sensitivity computation can be checked against finite differences.
pub fn output_norm_sq(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    node: usize,
    mask: &ClassMask,
) -> Result<f64> {
    let trace = model::forward(params, adjacency, features, mask)?;
    Ok(mask
        .active_classes()
        .map(|c| trace.probs()[(node, c)] * trace.probs()[(node, c)])
        .sum())
}

/// LwF distillation penalty: temperature-softened KL between the previous
/// model's and the current model's predictions over the previously seen
/// classes, summed over the batch, and its exact gradient through the
/// current model.
#[allow(clippy::too_many_arguments)]
pub fn lwf_penalty(
    params: &ModelParams,
    old_params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    batch: &[usize],
    temperature: f64,
    lambda_dist: f64,
    prev_mask: &ClassMask,
) -> Result<(f64, DVector<f64>)> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArg("temperature must be > 0".into()));
    }
    let new_trace = model::forward(params, adjacency, features, prev_mask)?;
    let old_trace = model::forward(old_params, adjacency, features, prev_mask)?;

    let soften = |trace: &model::ForwardTrace, v: usize| -> Vec<f64> {
        let mut max = f64::NEG_INFINITY;
        for c in prev_mask.active_classes() {
            max = max.max(trace.logits()[(v, c)] / temperature);
        }
        let mut exps: Vec<f64> = prev_mask
            .active_classes()
            .map(|c| (trace.logits()[(v, c)] / temperature - max).exp())
            .collect();
        let denom: f64 = exps.iter().sum();
        for e in &mut exps {
            *e /= denom;
        }
        exps
    };

    let mut penalty = 0.0;
    let mut d_logits = DMatrix::zeros(new_trace.num_nodes(), prev_mask.num_classes());
    for &v in batch {
        if v >= new_trace.num_nodes() {
            return Err(Error::InvalidArg(format!(
                "node {v} out of range for {} nodes",
                new_trace.num_nodes()
            )));
        }
        let q = soften(&old_trace, v); // teacher
        let p = soften(&new_trace, v); // student
        for ((qc, pc), c) in q.iter().zip(&p).zip(prev_mask.active_classes()) {
            if *qc > 0.0 {
                penalty += lambda_dist * qc * (qc.ln() - pc.ln());
            }
            d_logits[(v, c)] += lambda_dist * (pc - qc) / temperature;
        }
    }
    let grad = model::backward_from_trace(params, adjacency, &new_trace, &d_logits);
    Ok((penalty, grad))
}

/// Online curvature penalty from the gradient cache:
///
/// ```text
/// penalty = (lambda / (2 |Q|)) * sum_{g in Q} c_g^2,
/// c_g     = sum_t g^T (theta - theta_t),
/// grad    = (lambda / |Q|) * sum_{g in Q} c_g * g
/// ```
///
/// Cached gradients are treated as constants, so the returned gradient is
/// the linear combination of cached directions weighted by their projection
/// coefficients. Empty cache or empty anchor set yields `(0, 0)`.
pub fn curvature_penalty(
    theta: &DVector<f64>,
    anchors: &AnchorSet,
    cache: &GradCache,
    lambda: f64,
) -> (f64, DVector<f64>) {
    let mut grad = DVector::zeros(theta.len());
    if cache.is_empty() || anchors.is_empty() || lambda == 0.0 {
        return (0.0, grad);
    }
    let displacements: Vec<DVector<f64>> = anchors
        .anchors()
        .iter()
        .map(|a| theta - &a.params)
        .collect();
    let scale = lambda / cache.len() as f64;
    let mut penalty = 0.0;
    for sample in cache.iter() {
        let c: f64 = displacements.iter().map(|d| sample.grad.dot(d)).sum();
        penalty += 0.5 * scale * c * c;
        grad.axpy(scale * c, &sample.grad, 1.0);
    }
    (penalty, grad)
}

/// Monte-Carlo check that the batch-sampled quadratic regularizer is an
/// unbiased estimate of the exact-Fisher quadratic form (unit lambda).
#[derive(Debug, Clone, Copy)]
pub struct UnbiasednessReport {
    /// Mean over draws of `(1/2) sum_t (theta-theta_t)^T F_hat (theta-theta_t)`.
    pub mc_mean: f64,
    /// Sample standard deviation of the per-draw values.
    pub mc_std: f64,
    /// `(1/2) sum_t (theta-theta_t)^T F_exact (theta-theta_t)`.
    pub exact: f64,
}

/// Draw `n_draws` fresh sampled-label batch regularizers and compare their
/// mean against the exact-Fisher value. Subject to the dense-Fisher size
/// guard; intended for tiny models.
#[allow(clippy::too_many_arguments)]
pub fn curvature_unbiasedness_check<R: Rng>(
    params: &ModelParams,
    anchors: &AnchorSet,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    batch: &[usize],
    rng: &mut R,
    n_draws: usize,
    mask: &ClassMask,
) -> Result<UnbiasednessReport> {
    if n_draws == 0 {
        return Err(Error::InvalidArg("need at least one draw".into()));
    }
    let theta = params.flatten();
    let displacements: Vec<DVector<f64>> = anchors
        .anchors()
        .iter()
        .map(|a| &theta - &a.params)
        .collect();

    let exact_fim = fim::exact_fim(params, adjacency, features, batch, mask)?;
    let exact = 0.5
        * displacements
            .iter()
            .map(|d| exact_fim.quadratic_form(d))
            .sum::<f64>();

    let trace = model::forward(params, adjacency, features, mask)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_draws {
        let mut value = 0.0;
        for &node in batch {
            let g = fim::sample_node_grad(params, adjacency, &trace, node, rng)?;
            for d in &displacements {
                let proj = g.grad.dot(d);
                value += 0.5 * proj * proj;
            }
        }
        sum += value;
        sum_sq += value * value;
    }
    let mc_mean = sum / n_draws as f64;
    let variance = if n_draws > 1 {
        ((sum_sq - sum * sum / n_draws as f64) / (n_draws as f64 - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(UnbiasednessReport {
        mc_mean,
        mc_std: variance.sqrt(),
        exact,
    })
}
