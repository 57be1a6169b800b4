//! Config-driven experiment grids: one continual run per (strategy, seed)
//! cell, with CSV reports, heatmaps, checkpoints, and a machine-parseable
//! log. Identical configs reproduce identical outputs byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{self, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{self, RawGraph};
use crate::metrics;
use crate::regularizer::{RegConfig, Strategy};

/// Environment variable that re-roots `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "GCL_OUTPUT_ROOT";

/// Where the node data comes from: a synthesized stochastic block model or
/// node/edge files on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Sbm {
        num_classes: usize,
        nodes_per_class: usize,
        feature_dim: usize,
        p_in: f64,
        p_out: f64,
        #[serde(default = "default_dataset_seed")]
        seed: u64,
    },
    Files {
        node_file: PathBuf,
        edge_file: PathBuf,
    },
}

fn default_dataset_seed() -> u64 {
    42
}

impl DatasetSpec {
    pub fn build(&self) -> Result<RawGraph> {
        match self {
            DatasetSpec::Sbm {
                num_classes,
                nodes_per_class,
                feature_dim,
                p_in,
                p_out,
                seed,
            } => graph::generate_sbm_stream(
                *num_classes,
                *nodes_per_class,
                *feature_dim,
                *p_in,
                *p_out,
                *seed,
            ),
            DatasetSpec::Files {
                node_file,
                edge_file,
            } => graph::load_graph(node_file, edge_file),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub classes_per_task: usize,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: [f64; 3],
}

fn default_split_ratio() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

/// One strategy entry of the grid. Defaults follow [`RegConfig::default`];
/// `ema_beta` here overrides the trainer-wide snapshot smoothing for runs of
/// this strategy only. `label` names the entry in reports and file names
/// (defaults to `name`); labels must be unique so that two differently tuned
/// entries of the same strategy do not collide.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySpec {
    pub name: String,
    pub label: Option<String>,
    pub lambda: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub lambda_dist: f64,
    pub queue_capacity: usize,
    pub ema_beta: Option<f64>,
}

impl Default for StrategySpec {
    fn default() -> Self {
        let reg = RegConfig::default();
        Self {
            name: reg.strategy.as_str().to_string(),
            label: None,
            lambda: reg.lambda,
            gamma: reg.gamma,
            temperature: reg.temperature,
            lambda_dist: reg.lambda_dist,
            queue_capacity: reg.queue_capacity,
            ema_beta: reg.ema_beta,
        }
    }
}

impl StrategySpec {
    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.name)
    }

    pub fn to_reg_config(&self) -> Result<RegConfig> {
        let reg = RegConfig {
            strategy: self.name.parse::<Strategy>()?,
            lambda: self.lambda,
            gamma: self.gamma,
            temperature: self.temperature,
            lambda_dist: self.lambda_dist,
            queue_capacity: self.queue_capacity,
            ema_beta: self.ema_beta,
        };
        reg.validate()?;
        Ok(reg)
    }
}

/// Full experiment description, loaded from a JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    /// Shared training hyperparameters; the `seed` field is overridden per
    /// run by the `seeds` list.
    #[serde(default)]
    pub train: TrainConfig,
    pub strategies: Vec<StrategySpec>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut labels = std::collections::BTreeSet::new();
        for spec in &self.strategies {
            spec.to_reg_config()?;
            if !labels.insert(spec.label()) {
                return Err(Error::Config(format!(
                    "duplicate strategy label {:?}; set distinct `label` fields",
                    spec.label()
                )));
            }
        }
        self.train.validate()?;
        let sum: f64 = self.schedule.split_ratio.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split_ratio must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    fn split_ratio(&self) -> (f64, f64, f64) {
        let [a, b, c] = self.schedule.split_ratio;
        (a, b, c)
    }

    /// Output directory, re-rooted under [`OUTPUT_ROOT_ENV`] when set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }
}

/// Result row of one grid cell.
#[derive(Debug, Clone)]
pub struct RunRow {
    pub strategy: String,
    pub seed: u64,
    pub ap_final: f64,
    /// `None` for single-task schedules, where forgetting is undefined.
    pub af_final: Option<f64>,
}

fn af_cell(af: Option<f64>) -> String {
    af.map_or_else(|| "na".to_string(), |v| v.to_string())
}

fn results_csv(rows: &[RunRow]) -> String {
    let mut out = String::from("strategy,seed,AP_final,AF_final\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.strategy,
            row.seed,
            row.ap_final,
            af_cell(row.af_final)
        ));
    }
    out
}

fn summary_lines(rows: &[RunRow], strategies: &[StrategySpec]) -> Vec<String> {
    let mean_std = |values: &[f64]| -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 {
            return (mean, 0.0);
        }
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    };
    strategies
        .iter()
        .map(|spec| {
            let ap: Vec<f64> = rows
                .iter()
                .filter(|r| r.strategy == spec.label())
                .map(|r| r.ap_final)
                .collect();
            let af: Vec<f64> = rows
                .iter()
                .filter(|r| r.strategy == spec.label())
                .filter_map(|r| r.af_final)
                .collect();
            let (ap_mean, ap_std) = mean_std(&ap);
            if af.is_empty() {
                format!(
                    "# summary strategy={} ap_mean={ap_mean:.4} ap_std={ap_std:.4} af_mean=na af_std=na",
                    spec.label()
                )
            } else {
                let (af_mean, af_std) = mean_std(&af);
                format!(
                    "# summary strategy={} ap_mean={ap_mean:.4} ap_std={ap_std:.4} af_mean={af_mean:.4} af_std={af_std:.4}",
                    spec.label()
                )
            }
        })
        .collect()
}

/// Run one grid cell and return its result row plus the engine output.
fn run_cell(
    raw: &RawGraph,
    config: &ExperimentConfig,
    spec: &StrategySpec,
    seed: u64,
) -> Result<(RunRow, engine::RunResult)> {
    let schedule = graph::build_schedule(
        raw,
        config.schedule.classes_per_task,
        config.split_ratio(),
        seed,
    )?;
    let train = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let reg = spec.to_reg_config()?;
    let result = engine::run_continual(&schedule, &train, &reg)?;
    let last = result.matrix.num_tasks() - 1;
    let row = RunRow {
        strategy: spec.label().to_string(),
        seed,
        ap_final: metrics::average_performance(&result.matrix, last),
        af_final: metrics::average_forgetting(&result.matrix, last),
    };
    Ok((row, result))
}

/// Run the full strategy x seed grid described by the config file.
///
/// The output directory receives: a copy of the config, `results.csv` with
/// one row per cell, a heatmap CSV and a final-parameter checkpoint per
/// cell, and `run.log` with the per-epoch engine lines and per-strategy
/// mean/std summaries.
pub fn run(config_path: &Path) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    let out_dir = config.resolved_output_dir();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("config.json"),
        std::fs::read(config_path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", config_path.display()))
        })?,
    )?;

    let raw = config.dataset.build()?;
    let mut rows = Vec::new();
    let mut log = Vec::new();
    for spec in &config.strategies {
        for &seed in &config.seeds {
            let (row, result) = run_cell(&raw, &config, spec, seed)?;
            let tag = format!("{}_seed{}", spec.label(), seed);
            metrics::emit_heatmap(&result.matrix, &out_dir.join(format!("heatmap_{tag}.csv")))?;
            result
                .final_params
                .save_checkpoint(&out_dir.join(format!("checkpoint_{tag}.bin")))?;
            log.push(format!("# run strategy={} seed={}", spec.label(), seed));
            log.extend(result.log);
            rows.push(row);
        }
    }
    let summaries = summary_lines(&rows, &config.strategies);
    for line in &summaries {
        println!("{line}");
    }
    log.extend(summaries);
    std::fs::write(out_dir.join("results.csv"), results_csv(&rows))?;
    std::fs::write(out_dir.join("run.log"), log.join("\n") + "\n")?;
    Ok(())
}

/// Parameters that [`sweep`] can vary.
pub const SWEEP_PARAMS: [&str; 4] = ["lambda", "M", "ema_beta", "gamma"];

fn apply_sweep_value(config: &mut ExperimentConfig, param: &str, value: f64) -> Result<()> {
    match param {
        "lambda" => {
            for spec in &mut config.strategies {
                spec.lambda = value;
            }
        }
        "M" => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!(
                    "queue capacity sweep needs positive integers, got {value}"
                )));
            }
            for spec in &mut config.strategies {
                spec.queue_capacity = value as usize;
            }
        }
        "ema_beta" => {
            config.train.ema_beta = value;
            for spec in &mut config.strategies {
                spec.ema_beta = None; // the swept value must bite everywhere
            }
        }
        "gamma" => {
            for spec in &mut config.strategies {
                spec.gamma = value;
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter {other:?}; expected one of {SWEEP_PARAMS:?}"
            )));
        }
    }
    config.validate()
}

/// Re-run the grid once per swept value, writing `sweep.csv` sorted by
/// value with one row per (value, strategy, seed).
pub fn sweep(config_path: &Path, param: &str, values: &[f64]) -> Result<()> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(Error::Config(format!(
            "unknown sweep parameter {param:?}; expected one of {SWEEP_PARAMS:?}"
        )));
    }
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let base = ExperimentConfig::load(config_path)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("sweep values must not be NaN"));

    // Validate every value before any expensive work.
    for &value in &sorted {
        let mut probe = base.clone();
        apply_sweep_value(&mut probe, param, value)?;
    }

    let out_dir = base.resolved_output_dir();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("config.json"),
        std::fs::read(config_path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", config_path.display()))
        })?,
    )?;

    let raw = base.dataset.build()?;
    let mut out = String::from("param,value,strategy,seed,AP_final,AF_final\n");
    let mut log = Vec::new();
    for &value in &sorted {
        let mut config = base.clone();
        apply_sweep_value(&mut config, param, value)?;
        for spec in &config.strategies {
            for &seed in &config.seeds {
                let (row, result) = run_cell(&raw, &config, spec, seed)?;
                log.push(format!(
                    "# sweep {param}={value} strategy={} seed={}",
                    spec.label(),
                    seed
                ));
                log.extend(result.log);
                out.push_str(&format!(
                    "{param},{value},{},{},{},{}\n",
                    row.strategy,
                    row.seed,
                    row.ap_final,
                    af_cell(row.af_final)
                ));
            }
        }
    }
    std::fs::write(out_dir.join("sweep.csv"), out)?;
    std::fs::write(out_dir.join("run.log"), log.join("\n") + "\n")?;
    Ok(())
}

/// Process exit code for an error: 2 for configuration/input problems,
/// 1 for runtime failures.
pub fn exit_code_for(error: &Error) -> i32 {
    match error {
        Error::Config(_)
        | Error::Json(_)
        | Error::Parse { .. }
        | Error::InvalidGraph(_)
        | Error::InvalidArg(_) => 2,
        Error::ShapeMismatch(_) | Error::FimSizeGuard { .. } | Error::Io(_) => 1,
    }
}
