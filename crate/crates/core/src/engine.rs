//! Sequential task training: seeded batching, Adam on the regularized loss,
//! per-task EMA snapshots, and anchor bookkeeping.
//!
//! Per optimization step the engine runs one forward pass over the task
//! graph, sums the batch cross-entropy, and (from the second task onward)
//! adds the configured penalty. The online curvature strategy additionally
//! samples one node of the batch, draws a label from the model's own
//! prediction, and pushes that node's log-likelihood gradient into the FIFO
//! cache before the penalty is evaluated.
//!
//! After a task finishes, the working parameters are replaced by the EMA
//! snapshot `beta * previous_anchor + (1 - beta) * theta`, which is stored
//! as the task's anchor and initializes the next task.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fim;
use crate::graph::{TaskGraph, TaskSchedule};
use crate::metrics::{self, AccuracyMatrix};
use crate::model::{self, ClassMask, ModelParams};
use crate::regularizer::{self, Anchor, AnchorExtra, AnchorSet, GradCache, RegConfig, Strategy};

/// Training hyperparameters for one continual run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Snapshot smoothing at task boundaries; 0 disables EMA.
    pub ema_beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-5,
            weight_decay: 5e-4,
            ema_beta: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            hidden_dim: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return Err(Error::Config("ema_beta must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam moment vectors with a step counter for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: DVector<f64>,
    v: DVector<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with classic L2 weight decay added to the gradient.
pub fn adam_step(
    theta: &mut DVector<f64>,
    grad: &DVector<f64>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    assert_eq!(
        theta.len(),
        grad.len(),
        "parameter/gradient length mismatch"
    );
    assert_eq!(theta.len(), state.m.len(), "moment length mismatch");
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bias1 = 1.0 - b1.powi(state.step as i32);
    let bias2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..theta.len() {
        let g = grad[i] + cfg.weight_decay * theta[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

/// `beta * previous + (1 - beta) * current`.
pub fn ema_snapshot(
    previous: &DVector<f64>,
    current: &DVector<f64>,
    beta: f64,
) -> Result<DVector<f64>> {
    if previous.len() != current.len() {
        return Err(Error::ShapeMismatch(format!(
            "EMA over vectors of length {} and {}",
            previous.len(),
            current.len()
        )));
    }
    Ok(previous * beta + current * (1.0 - beta))
}

/// Shuffle the train nodes and cut them into contiguous chunks; the last
/// chunk may be short.
pub fn make_batches<R: Rng>(
    train_nodes: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut shuffled = train_nodes.to_vec();
    shuffled.shuffle(rng);
    shuffled.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Mutable state of a continual run: current parameters, optimizer moments,
/// anchors of completed tasks, the gradient cache, and the rng streams.
///
/// Batching and regularizer sampling draw from separate streams of the same
/// seed so that disabling a stochastic regularizer cannot perturb the batch
/// order.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    adam: AdamState,
    pub anchors: AnchorSet,
    pub cache: GradCache,
    pub task_cursor: usize,
    seen_classes: Vec<usize>,
    init_anchor: DVector<f64>,
    batch_rng: ChaCha12Rng,
    reg_rng: ChaCha12Rng,
    pub log: Vec<String>,
}

impl TrainState {
    pub fn new(
        feature_dim: usize,
        total_classes: usize,
        cfg: &TrainConfig,
        reg: &RegConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        reg.validate()?;
        if total_classes == 0 {
            return Err(Error::InvalidArg("model needs at least one class".into()));
        }
        let mut init_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut batch_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        batch_rng.set_stream(1);
        let mut reg_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        reg_rng.set_stream(2);
        let params = ModelParams::glorot(feature_dim, cfg.hidden_dim, total_classes, &mut init_rng);
        let init_anchor = params.flatten();
        Ok(Self {
            params,
            adam: AdamState::new(init_anchor.len()),
            anchors: AnchorSet::new(),
            cache: GradCache::new(reg.queue_capacity)?,
            task_cursor: 0,
            seen_classes: Vec::new(),
            init_anchor,
            batch_rng,
            reg_rng,
            log: Vec::new(),
        })
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen_classes
    }
}

fn effective_ema_beta(cfg: &TrainConfig, reg: &RegConfig) -> f64 {
    reg.ema_beta.unwrap_or(cfg.ema_beta)
}

/// Penalty and penalty gradient for one step. The first task has no
/// anchors and never pays a penalty.
fn step_penalty(
    state: &mut TrainState,
    task: &TaskGraph,
    trace: &model::ForwardTrace,
    batch: &[usize],
    reg: &RegConfig,
    prev_mask: Option<&ClassMask>,
) -> Result<(f64, DVector<f64>)> {
    let zero = || (0.0, DVector::zeros(state.params.dim()));
    if state.anchors.is_empty() || reg.strength() == 0.0 {
        return Ok(zero());
    }
    let adjacency = task.adjacency();
    let features = task.graph().features();
    match reg.strategy {
        Strategy::None => Ok(zero()),
        Strategy::OnlineCurvature => {
            let pick = state.reg_rng.random_range(0..batch.len());
            let node = batch[pick];
            let sample =
                fim::sample_node_grad(&state.params, adjacency, trace, node, &mut state.reg_rng)?;
            state.cache.push(sample);
            let theta = state.params.flatten();
            Ok(regularizer::curvature_penalty(
                &theta,
                &state.anchors,
                &state.cache,
                reg.lambda,
            ))
        }
        Strategy::EwcEmpirical | Strategy::EwcSampled | Strategy::EwcPredicted | Strategy::Mas => {
            let theta = state.params.flatten();
            regularizer::ewc_penalty(&theta, state.anchors.anchors(), reg.lambda)
        }
        Strategy::OnlineEwc => {
            // Single effective anchor: the latest, carrying the running Fisher.
            let theta = state.params.flatten();
            let last = std::slice::from_ref(state.anchors.last().expect("anchors nonempty"));
            regularizer::ewc_penalty(&theta, last, reg.lambda)
        }
        Strategy::Lwf => {
            let prev_mask = prev_mask.expect("LwF penalty requires a previous task");
            let teacher_flat = &state.anchors.last().expect("anchors nonempty").params;
            let teacher = ModelParams::from_flat(
                state.params.feature_dim(),
                state.params.hidden_dim(),
                state.params.num_classes(),
                teacher_flat,
            )?;
            regularizer::lwf_penalty(
                &state.params,
                &teacher,
                adjacency,
                features,
                batch,
                reg.temperature,
                reg.lambda_dist,
                prev_mask,
            )
        }
    }
}

/// Importance weights stored alongside a finished task's anchor.
fn anchor_extra(
    state: &mut TrainState,
    task: &TaskGraph,
    reg: &RegConfig,
    mask: &ClassMask,
) -> Result<AnchorExtra> {
    let adjacency = task.adjacency();
    let features = task.graph().features();
    let nodes = task.train_nodes();
    match reg.strategy {
        Strategy::EwcEmpirical => {
            let labels: Vec<usize> = nodes.iter().map(|&v| task.graph().labels()[v]).collect();
            Ok(AnchorExtra::Fim(fim::diag_fim_empirical(
                &state.params,
                adjacency,
                features,
                nodes,
                &labels,
                mask,
            )?))
        }
        Strategy::EwcSampled => Ok(AnchorExtra::Fim(fim::diag_fim_sampled(
            &state.params,
            adjacency,
            features,
            nodes,
            &mut state.reg_rng,
            mask,
        )?)),
        Strategy::EwcPredicted => Ok(AnchorExtra::Fim(fim::diag_fim_predicted(
            &state.params,
            adjacency,
            features,
            nodes,
            mask,
        )?)),
        Strategy::OnlineEwc => {
            let labels: Vec<usize> = nodes.iter().map(|&v| task.graph().labels()[v]).collect();
            let new =
                fim::diag_fim_empirical(&state.params, adjacency, features, nodes, &labels, mask)?;
            let running = match state.anchors.last().map(|a| &a.extra) {
                Some(AnchorExtra::Fim(prev)) => prev.clone(),
                _ => fim::DiagFim::zeros(state.params.dim()),
            };
            Ok(AnchorExtra::Fim(regularizer::online_ewc_update(
                &running, &new, reg.gamma,
            )?))
        }
        Strategy::Mas => Ok(AnchorExtra::Importance(regularizer::mas_importance(
            &state.params,
            adjacency,
            features,
            nodes,
            mask,
        )?)),
        Strategy::None | Strategy::Lwf | Strategy::OnlineCurvature => Ok(AnchorExtra::None),
    }
}

/// Train one task for `cfg.epochs` epochs, then EMA-snapshot and append the
/// anchor. Emits one log line per epoch:
/// `task=<t> epoch=<k> loss=<f> reg=<f> val_acc=<f>`.
pub fn train_task(
    state: &mut TrainState,
    task: &TaskGraph,
    cfg: &TrainConfig,
    reg: &RegConfig,
) -> Result<()> {
    if task.task_id() != state.task_cursor {
        return Err(Error::InvalidArg(format!(
            "task {} presented to a state expecting task {}",
            task.task_id(),
            state.task_cursor
        )));
    }
    if state.anchors.len() != state.task_cursor {
        return Err(Error::InvalidArg(
            "anchor count must equal the number of completed tasks".into(),
        ));
    }
    let total_classes = state.params.num_classes();
    let prev_mask = if state.seen_classes.is_empty() {
        None
    } else {
        Some(ClassMask::from_classes(&state.seen_classes, total_classes)?)
    };
    state.seen_classes.extend_from_slice(task.class_set());
    state.seen_classes.sort_unstable();
    let mask = ClassMask::from_classes(&state.seen_classes, total_classes)?;

    state.cache.clear();
    state.adam = AdamState::new(state.params.dim());

    let adjacency = task.adjacency();
    let features = task.graph().features();
    let labels = task.graph().labels();
    let reg_active =
        !state.anchors.is_empty() && reg.strategy != Strategy::None && reg.strength() > 0.0;

    for epoch in 0..cfg.epochs {
        let batches = make_batches(task.train_nodes(), cfg.batch_size, &mut state.batch_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_reg = 0.0;
        for batch in &batches {
            let trace = model::forward(&state.params, adjacency, features, &mask)?;
            let batch_labels: Vec<usize> = batch.iter().map(|&v| labels[v]).collect();
            let (loss, mut grad) = model::loss_and_grad_on_trace(
                &state.params,
                adjacency,
                &trace,
                batch,
                &batch_labels,
            )?;
            let mut penalty = 0.0;
            if reg_active {
                let (p, p_grad) =
                    step_penalty(state, task, &trace, batch, reg, prev_mask.as_ref())?;
                penalty = p;
                grad += p_grad;
            }
            let mut theta = state.params.flatten();
            adam_step(&mut theta, &grad, &mut state.adam, cfg);
            state.params.set_from_flat(&theta)?;
            epoch_loss += loss;
            epoch_reg += penalty;
        }
        let val_acc = metrics::split_accuracy(
            &state.params,
            adjacency,
            features,
            labels,
            task.val_nodes(),
            &mask,
        )?;
        state.log.push(format!(
            "task={} epoch={} loss={:.6} reg={:.6} val_acc={:.6}",
            task.task_id() + 1,
            epoch + 1,
            epoch_loss,
            epoch_reg,
            val_acc
        ));
    }

    // Snapshot, store the anchor, and carry the snapshot into the next task.
    let beta = effective_ema_beta(cfg, reg);
    let previous = state
        .anchors
        .last()
        .map(|a| a.params.clone())
        .unwrap_or_else(|| state.init_anchor.clone());
    let snapshot = ema_snapshot(&previous, &state.params.flatten(), beta)?;
    state.params.set_from_flat(&snapshot)?;
    let extra = anchor_extra(state, task, reg, &mask)?;
    state.anchors.push(Anchor {
        task_id: task.task_id(),
        params: snapshot,
        extra,
    })?;
    state.task_cursor += 1;
    Ok(())
}

/// Output of a full continual run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub matrix: AccuracyMatrix,
    pub final_params: ModelParams,
    pub log: Vec<String>,
}

/// Train every task of the schedule in order, evaluating all seen tasks
/// after each one.
pub fn run_continual(
    schedule: &TaskSchedule,
    cfg: &TrainConfig,
    reg: &RegConfig,
) -> Result<RunResult> {
    if schedule.num_tasks() == 0 {
        return Err(Error::InvalidArg("schedule has no tasks".into()));
    }
    let mut state = TrainState::new(schedule.feature_dim(), schedule.total_classes(), cfg, reg)?;
    let mut matrix = AccuracyMatrix::new();
    for task in schedule.tasks() {
        train_task(&mut state, task, cfg, reg)?;
        let row = metrics::evaluate(&state.params, schedule, task.task_id())?;
        matrix.push_row(row)?;
    }
    Ok(RunResult {
        matrix,
        final_params: state.params,
        log: state.log,
    })
}
