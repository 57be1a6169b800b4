//! Graph loading, synthesis, adjacency normalization, and class-incremental
//! task schedules.
//!
//! A [`RawGraph`] is an undirected feature graph with integer class labels.
//! [`build_schedule`] partitions its classes into consecutive tasks, keeps
//! only intra-task edges, and splits each task's nodes into train/val/test
//! per class. All construction is deterministic given the seed.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Undirected graph with dense node features and one class label per node.
///
/// Edges are stored canonically as `(min, max)` pairs, sorted, without
/// duplicates or self-loops (self-loops are added by normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct RawGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: DMatrix<f64>,
    labels: Vec<usize>,
}

impl RawGraph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: DMatrix<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if features.nrows() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "feature matrix has {} rows for {} nodes",
                features.nrows(),
                num_nodes
            )));
        }
        if labels.len() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "{} labels for {} nodes",
                labels.len(),
                num_nodes
            )));
        }
        let mut canonical = BTreeSet::new();
        for &(u, v) in &edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) references a node outside 0..{num_nodes}"
                )));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop on node {u}")));
            }
            if !canonical.insert((u.min(v), u.max(v))) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({u}, {v})")));
            }
        }
        Ok(Self {
            num_nodes,
            edges: canonical.into_iter().collect(),
            features,
            labels,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of classes, taken as `max label + 1` (0 for an empty graph).
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&c| c + 1)
    }
}

/// Symmetrically normalized adjacency with self-loops, stored in compressed
/// sparse row form: entry `(i, j)` is `(A + I)_{ij} / sqrt(deg_i * deg_j)`
/// where `deg` counts the self-loop.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Left-multiply a dense matrix: `self * rhs`.
    pub fn matmul(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.n, rhs.nrows(), "adjacency/matrix row mismatch");
        let cols = rhs.ncols();
        let mut out = DMatrix::zeros(self.n, cols);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let w = self.values[k];
                for c in 0..cols {
                    out[(i, c)] += w * rhs[(j, c)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[(i, self.col_idx[k])] = self.values[k];
            }
        }
        out
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        for k in self.row_ptr[i]..self.row_ptr[i + 1] {
            if self.col_idx[k] == j {
                return self.values[k];
            }
        }
        0.0
    }
}

/// Build the symmetrically normalized adjacency with self-loops.
///
/// Isolated nodes get degree 1 from the self-loop, so their diagonal entry
/// is exactly 1.
pub fn normalize_adjacency(raw: &RawGraph) -> NormalizedAdjacency {
    let n = raw.num_nodes();
    let mut degree = vec![1.0f64; n];
    for &(u, v) in raw.edges() {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();

    let mut rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| vec![(i, inv_sqrt[i] * inv_sqrt[i])])
        .collect();
    for &(u, v) in raw.edges() {
        let w = inv_sqrt[u] * inv_sqrt[v];
        rows[u].push((v, w));
        rows[v].push((u, w));
    }

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for row in &mut rows {
        row.sort_by_key(|&(j, _)| j);
        for &(j, w) in row.iter() {
            col_idx.push(j);
            values.push(w);
        }
        row_ptr.push(col_idx.len());
    }
    NormalizedAdjacency {
        n,
        row_ptr,
        col_idx,
        values,
    }
}

/// One task of a class-incremental stream: the subgraph induced by the
/// task's classes, its normalized adjacency, and per-class node splits.
///
/// Node ids inside the task are local (0..subgraph size); `global_ids` maps
/// them back to the source graph. Labels keep their global class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph {
    task_id: usize,
    graph: RawGraph,
    adjacency: NormalizedAdjacency,
    class_set: Vec<usize>,
    global_ids: Vec<usize>,
    train_nodes: Vec<usize>,
    val_nodes: Vec<usize>,
    test_nodes: Vec<usize>,
}

impl TaskGraph {
    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn graph(&self) -> &RawGraph {
        &self.graph
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.adjacency
    }

    /// Global class ids of this task, ascending.
    pub fn class_set(&self) -> &[usize] {
        &self.class_set
    }

    pub fn global_ids(&self) -> &[usize] {
        &self.global_ids
    }

    pub fn train_nodes(&self) -> &[usize] {
        &self.train_nodes
    }

    pub fn val_nodes(&self) -> &[usize] {
        &self.val_nodes
    }

    pub fn test_nodes(&self) -> &[usize] {
        &self.test_nodes
    }
}

/// Ordered sequence of tasks over disjoint class sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSchedule {
    tasks: Vec<TaskGraph>,
    total_classes: usize,
}

impl TaskSchedule {
    pub fn tasks(&self) -> &[TaskGraph] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Total number of classes across the whole stream; sizes the model head.
    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.graph.feature_dim())
    }

    /// Union of the class sets of tasks `0..=upto`, ascending.
    pub fn classes_through(&self, upto: usize) -> Vec<usize> {
        let mut classes: Vec<usize> = self.tasks[..=upto]
            .iter()
            .flat_map(|t| t.class_set.iter().copied())
            .collect();
        classes.sort_unstable();
        classes
    }
}

fn split_counts(n: usize, ratio: (f64, f64, f64)) -> (usize, usize, usize) {
    debug_assert!(n >= 3);
    let n_train = ((ratio.0 * n as f64).round() as usize).clamp(1, n - 2);
    let n_val = ((ratio.1 * n as f64).round() as usize).clamp(1, n - 1 - n_train);
    (n_train, n_val, n - n_train - n_val)
}

/// Group classes in ascending id order into consecutive tasks and split each
/// task's nodes per class. Edges between nodes of different tasks are
/// dropped; each task keeps only its own subgraph.
///
/// The last task may hold fewer than `classes_per_task` classes. Rejects
/// classes with fewer than 3 nodes (all three splits must be nonempty) and
/// non-contiguous class ids (the classifier head is sized by `max id + 1`).
pub fn build_schedule(
    raw: &RawGraph,
    classes_per_task: usize,
    split_ratio: (f64, f64, f64),
    seed: u64,
) -> Result<TaskSchedule> {
    if classes_per_task == 0 {
        return Err(Error::InvalidArg("classes_per_task must be >= 1".into()));
    }
    let ratio_sum = split_ratio.0 + split_ratio.1 + split_ratio.2;
    if (ratio_sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArg(format!(
            "split fractions must sum to 1, got {ratio_sum}"
        )));
    }
    let observed: BTreeSet<usize> = raw.labels().iter().copied().collect();
    if observed.is_empty() {
        return Err(Error::InvalidGraph("graph has no labeled nodes".into()));
    }
    let classes: Vec<usize> = observed.into_iter().collect();
    if *classes.last().unwrap() != classes.len() - 1 {
        return Err(Error::InvalidGraph(
            "class ids must be contiguous from 0".into(),
        ));
    }
    for &c in &classes {
        let count = raw.labels().iter().filter(|&&l| l == c).count();
        if count < 3 {
            return Err(Error::InvalidGraph(format!(
                "class {c} has only {count} nodes; need at least 3 to split"
            )));
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut tasks = Vec::new();
    for (task_id, class_chunk) in classes.chunks(classes_per_task).enumerate() {
        let class_set: Vec<usize> = class_chunk.to_vec();
        let in_task = |label: usize| class_set.binary_search(&label).is_ok();

        // Local node ids ascend with global ids.
        let global_ids: Vec<usize> = (0..raw.num_nodes())
            .filter(|&v| in_task(raw.labels()[v]))
            .collect();
        let mut local_of = vec![usize::MAX; raw.num_nodes()];
        for (local, &global) in global_ids.iter().enumerate() {
            local_of[global] = local;
        }

        let edges: Vec<(usize, usize)> = raw
            .edges()
            .iter()
            .filter(|&&(u, v)| local_of[u] != usize::MAX && local_of[v] != usize::MAX)
            .map(|&(u, v)| (local_of[u], local_of[v]))
            .collect();
        let features = DMatrix::from_fn(global_ids.len(), raw.feature_dim(), |i, j| {
            raw.features()[(global_ids[i], j)]
        });
        let labels: Vec<usize> = global_ids.iter().map(|&v| raw.labels()[v]).collect();
        let graph = RawGraph::new(global_ids.len(), edges, features, labels)?;
        let adjacency = normalize_adjacency(&graph);

        let mut train_nodes = Vec::new();
        let mut val_nodes = Vec::new();
        let mut test_nodes = Vec::new();
        for &c in &class_set {
            let mut members: Vec<usize> = (0..graph.num_nodes())
                .filter(|&v| graph.labels()[v] == c)
                .collect();
            members.shuffle(&mut rng);
            let (n_train, n_val, _) = split_counts(members.len(), split_ratio);
            train_nodes.extend_from_slice(&members[..n_train]);
            val_nodes.extend_from_slice(&members[n_train..n_train + n_val]);
            test_nodes.extend_from_slice(&members[n_train + n_val..]);
        }
        train_nodes.sort_unstable();
        val_nodes.sort_unstable();
        test_nodes.sort_unstable();

        tasks.push(TaskGraph {
            task_id,
            graph,
            adjacency,
            class_set,
            global_ids,
            train_nodes,
            val_nodes,
            test_nodes,
        });
    }
    Ok(TaskSchedule {
        tasks,
        total_classes: classes.len(),
    })
}

/// Scale of the per-class feature means relative to the unit noise. Chosen
/// so a two-layer GCN reaches high but not saturated accuracy per task.
const SBM_MEAN_SCALE: f64 = 0.5;

/// Generate a stochastic-block-model graph with one block per class.
///
/// Features are a per-class mean vector (drawn once from the seed, scaled
/// standard normal entries) plus unit Gaussian noise. Node `i` belongs to
/// class `i / nodes_per_class`.
pub fn generate_sbm_stream(
    num_classes: usize,
    nodes_per_class: usize,
    feature_dim: usize,
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> Result<RawGraph> {
    if !(0.0..=1.0).contains(&p_out) || !(0.0..=1.0).contains(&p_in) || p_out >= p_in {
        return Err(Error::InvalidArg(format!(
            "need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    if num_classes == 0 || nodes_per_class == 0 {
        return Err(Error::InvalidArg(
            "num_classes and nodes_per_class must be >= 1".into(),
        ));
    }
    let n = num_classes * nodes_per_class;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut means = DMatrix::zeros(num_classes, feature_dim);
    for c in 0..num_classes {
        for j in 0..feature_dim {
            means[(c, j)] = SBM_MEAN_SCALE * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let labels: Vec<usize> = (0..n).map(|i| i / nodes_per_class).collect();
    let mut features = DMatrix::zeros(n, feature_dim);
    for i in 0..n {
        for j in 0..feature_dim {
            features[(i, j)] = means[(labels[i], j)] + rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if p > 0.0 && rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    RawGraph::new(n, edges, features, labels)
}

/// Load a graph from the node/edge text format.
///
/// Node file: one `<node_id> <class_id> <f_1> ... <f_d>` line per node, ids
/// 0..n-1 in order. Edge file: one `<u> <v>` pair per line; reversed and
/// repeated pairs collapse to a single undirected edge. Lines starting with
/// `#` and blank lines are skipped in both files.
pub fn load_graph(node_file: &Path, edge_file: &Path) -> Result<RawGraph> {
    let node_text = std::fs::read_to_string(node_file).map_err(|e| {
        Error::Config(format!(
            "cannot read node file {}: {e}",
            node_file.display()
        ))
    })?;
    let edge_text = std::fs::read_to_string(edge_file).map_err(|e| {
        Error::Config(format!(
            "cannot read edge file {}: {e}",
            edge_file.display()
        ))
    })?;
    let node_path = node_file.display().to_string();
    let edge_path = edge_file.display().to_string();

    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in node_text.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = |tok: &str, what: &str| -> Result<f64> {
            tok.parse::<f64>().map_err(|_| Error::Parse {
                path: node_path.clone(),
                line: line_num,
                msg: format!("bad {what}: {tok:?}"),
            })
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 2 {
            return Err(Error::Parse {
                path: node_path,
                line: line_num,
                msg: "expected <node_id> <class_id> <features...>".into(),
            });
        }
        let id = toks[0].parse::<usize>().map_err(|_| Error::Parse {
            path: node_path.clone(),
            line: line_num,
            msg: format!("bad node id: {:?}", toks[0]),
        })?;
        if id != labels.len() {
            return Err(Error::Parse {
                path: node_path,
                line: line_num,
                msg: format!(
                    "node ids must appear in order; expected {}, got {id}",
                    labels.len()
                ),
            });
        }
        let class = toks[1].parse::<usize>().map_err(|_| Error::Parse {
            path: node_path.clone(),
            line: line_num,
            msg: format!("bad class id: {:?}", toks[1]),
        })?;
        let feats: Vec<f64> = toks[2..]
            .iter()
            .map(|t| parse(t, "feature value"))
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(Error::Parse {
                    path: node_path,
                    line: line_num,
                    msg: format!("expected {d} features, got {}", feats.len()),
                });
            }
            _ => {}
        }
        labels.push(class);
        rows.push(feats);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            path: node_path,
            line: 0,
            msg: "node file contains no nodes".into(),
        });
    }
    let n = labels.len();
    let d = dim.unwrap();
    let features = DMatrix::from_fn(n, d, |i, j| rows[i][j]);

    let mut edges = BTreeSet::new();
    for (lineno, line) in edge_text.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(Error::Parse {
                path: edge_path,
                line: line_num,
                msg: "expected <u> <v>".into(),
            });
        }
        let parse_id = |tok: &str| -> Result<usize> {
            tok.parse::<usize>().map_err(|_| Error::Parse {
                path: edge_path.clone(),
                line: line_num,
                msg: format!("bad node id: {tok:?}"),
            })
        };
        let u = parse_id(toks[0])?;
        let v = parse_id(toks[1])?;
        if u >= n || v >= n {
            return Err(Error::InvalidGraph(format!(
                "edge ({u}, {v}) at {edge_path} line {line_num} references a node outside 0..{n}"
            )));
        }
        if u == v {
            return Err(Error::InvalidGraph(format!(
                "self-loop ({u}, {v}) at {edge_path} line {line_num}"
            )));
        }
        edges.insert((u.min(v), u.max(v)));
    }
    RawGraph::new(n, edges.into_iter().collect(), features, labels)
}
