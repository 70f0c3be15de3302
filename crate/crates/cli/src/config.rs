//! Flat TOML experiment manifest and the datasets it describes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vfb2::data::{
    minmax_normalize_features, minmax_normalize_labels, parse_csv, parse_libsvm, train_test_split,
    vertical_partition_with, PartitionedDataset, RawDataset, Task,
};
use vfb2::runtime::{AggregationKind, CostModel, DelayPolicy, Execution, Straggler};
use vfb2::{make_partition, Algorithm, FeaturePartition, HyperParams, LossKind, Mode, RegularizerKind, SimConfig};

/// Raised for anything wrong with the manifest itself (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// One experiment. Every key is optional in the file; flags given on the
/// command line win over the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Path to a LIBSVM or CSV file; unused for synthetic data.
    pub dataset: Option<PathBuf>,
    /// `libsvm`, `csv` or `synthetic`.
    pub format: String,
    /// Zero-based label column for CSV input.
    pub label_column: usize,
    /// `classification`, `regression` or `informative-passive`.
    pub synthetic: String,
    pub synthetic_n: usize,
    pub synthetic_d: usize,
    /// Label flip rate (classification) or noise level (regression).
    pub synthetic_noise: f64,
    /// Share of the signal owned by passive parties (informative-passive).
    pub passive_share: f64,
    /// Fraction held out for the test metric; 0 evaluates on training data.
    pub test_fraction: f64,
    pub normalize_features: bool,
    pub normalize_labels: bool,

    pub loss: String,
    pub regularizer: String,
    pub lambda: f64,
    /// Step size; pick from a grid such as 5e-1, 1e-1, 5e-2, 1e-2.
    pub gamma: f64,
    pub algorithm: String,

    pub q: usize,
    pub m: usize,
    /// Workers per party; defaults to `m`.
    pub k: Option<usize>,

    pub mode: String,
    pub execution: String,
    pub aggregation: String,
    pub delay_policy: String,
    pub tau1: usize,
    pub tau2: usize,
    pub feature_cost_us: f64,
    pub latency_us: f64,
    pub straggler: Option<usize>,
    pub straggler_factor: f64,

    pub epochs: usize,
    /// Stop once the training objective reaches this value.
    pub target_objective: Option<f64>,
    /// Stop once the objective is within this much of a reference optimum.
    pub target_suboptimality: Option<f64>,
    pub seed: u64,
    pub out: Option<PathBuf>,

    /// Party counts for the speedup table.
    pub q_list: Vec<usize>,
    /// Overrides the default lossless tolerance of the compare report.
    pub lossless_tolerance: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            format: "synthetic".into(),
            label_column: 0,
            synthetic: "classification".into(),
            synthetic_n: 500,
            synthetic_d: 20,
            synthetic_noise: 0.05,
            passive_share: 0.7,
            test_fraction: 0.2,
            normalize_features: false,
            normalize_labels: false,
            loss: "logistic".into(),
            regularizer: "l2".into(),
            lambda: 1e-3,
            gamma: 0.05,
            algorithm: "svrg".into(),
            q: 4,
            m: 2,
            k: None,
            mode: "async".into(),
            execution: "deterministic".into(),
            aggregation: "masked".into(),
            delay_policy: "uniform".into(),
            tau1: 0,
            tau2: 0,
            feature_cost_us: 0.0,
            latency_us: 0.0,
            straggler: None,
            straggler_factor: Straggler::DEFAULT_FACTOR,
            epochs: 10,
            target_objective: None,
            target_suboptimality: None,
            seed: 0,
            out: None,
            q_list: vec![1, 2, 4, 8],
            lossless_tolerance: None,
        }
    }
}

/// Train and test sides partitioned the same way.
pub struct Prepared {
    pub raw_train: RawDataset,
    pub train: PartitionedDataset,
    pub test: Option<PartitionedDataset>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        Ok(self.loss.parse()?)
    }

    fn task(&self) -> Result<Task> {
        Ok(if self.loss_kind()?.is_classification() { Task::Classification } else { Task::Regression })
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            bail!(config_err(format!("gamma must be positive, got {}", self.gamma)));
        }
        let hp = HyperParams {
            gamma: self.gamma,
            lambda: self.lambda,
            algorithm: self.algorithm.parse::<Algorithm>()?,
            loss: self.loss_kind()?,
            regularizer: self.regularizer.parse::<RegularizerKind>()?,
            epochs: self.epochs,
            tau1: self.tau1,
            tau2: self.tau2,
            seed: self.seed,
        };
        let mut sim = SimConfig::new(self.q, self.m, hp);
        sim.k = self.k.unwrap_or(self.m.max(1));
        sim.mode = self.mode.parse::<Mode>()?;
        sim.execution = match self.execution.to_ascii_lowercase().as_str() {
            "deterministic" => Execution::Deterministic,
            "threaded" => Execution::Threaded,
            other => bail!(config_err(format!("unknown execution '{other}'"))),
        };
        sim.aggregation = match self.aggregation.to_ascii_lowercase().as_str() {
            "masked" => AggregationKind::Masked,
            "plain" => AggregationKind::Plain,
            other => bail!(config_err(format!("unknown aggregation '{other}'"))),
        };
        sim.delay_policy = self.delay_policy.parse::<DelayPolicy>()?;
        sim.cost = CostModel { feature_cost_us: self.feature_cost_us, latency_us: self.latency_us };
        sim.straggler = self.straggler.map(|party| Straggler { party, factor: self.straggler_factor });
        sim.target_objective = self.target_objective;
        if self.target_objective.is_some() && self.target_suboptimality.is_some() {
            bail!(config_err("give target_objective or target_suboptimality, not both"));
        }
        sim.validate()?;
        Ok(sim)
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        self.sim_config()?;
        match self.format.as_str() {
            "synthetic" => {}
            "libsvm" | "csv" => match &self.dataset {
                Some(p) if p.is_file() => {}
                Some(p) => bail!(config_err(format!("dataset {} does not exist", p.display()))),
                None => bail!(config_err(format!("format '{}' needs a dataset path", self.format))),
            },
            other => bail!(config_err(format!("unknown format '{other}'"))),
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            bail!(config_err(format!("test_fraction {} outside [0, 1)", self.test_fraction)));
        }
        Ok(())
    }

    fn load_raw(&self) -> Result<(RawDataset, Option<FeaturePartition>)> {
        let task = self.task()?;
        let (n, d, noise, seed) = (self.synthetic_n, self.synthetic_d, self.synthetic_noise, self.seed);
        let (mut raw, partition) = match self.format.as_str() {
            "libsvm" => (parse_libsvm(self.path()?).with_context(|| self.describe())?, None),
            "csv" => (parse_csv(self.path()?, self.label_column, task).with_context(|| self.describe())?, None),
            _ => match self.synthetic.as_str() {
                "classification" => (vfb2::synthetic::classification(n, d, noise, seed)?.data, None),
                "regression" => (vfb2::synthetic::regression(n, d, noise, 0.0, seed)?.data, None),
                "informative-passive" => {
                    let width = (d / self.q.max(1)).max(1);
                    let (s, p) = vfb2::synthetic::informative_passive(n, self.q, width, self.passive_share, seed)?;
                    (s.data, Some(p))
                }
                other => bail!(config_err(format!("unknown synthetic kind '{other}'"))),
            },
        };
        if self.normalize_features {
            raw = minmax_normalize_features(&raw);
        }
        if self.normalize_labels && task == Task::Regression {
            raw = minmax_normalize_labels(raw).0;
        }
        Ok((raw, partition))
    }

    fn path(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| config_err("no dataset path"))
    }

    fn describe(&self) -> String {
        match &self.dataset {
            Some(p) => format!("reading {}", p.display()),
            None => "building synthetic data".into(),
        }
    }

    /// Reads or generates the data, splits it and partitions both sides
    /// with one partition.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let (raw, partition) = self.load_raw()?;
        let partition = match partition {
            Some(p) => p,
            None => make_partition(raw.d(), self.q, self.seed)?,
        };
        let partition = Arc::new(partition);
        let (raw_train, test) = if self.test_fraction > 0.0 {
            let (a, b) = train_test_split(&raw, self.test_fraction, self.seed)?;
            (a, Some(b))
        } else {
            (raw, None)
        };
        let train = vertical_partition_with(&raw_train, partition.clone())?;
        let test = test.map(|t| vertical_partition_with(&t, partition)).transpose()?;
        Ok(Prepared { raw_train, train, test })
    }

    /// Settings that must agree for two runs to be comparable.
    pub fn data_identity(&self) -> (Option<&Path>, &str, &str, &str, usize, usize, u64, u64) {
        (
            self.dataset.as_deref(),
            self.format.as_str(),
            self.synthetic.as_str(),
            self.loss.as_str(),
            self.synthetic_n,
            self.synthetic_d,
            self.seed,
            self.test_fraction.to_bits(),
        )
    }
}
