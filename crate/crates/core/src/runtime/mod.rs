//! Execution engines for the bilevel asynchronous architecture.
//!
//! Two executions share one driver. The deterministic interleaver is a
//! single-threaded seeded scheduler used for replayable tests; the threaded
//! engine runs real dominator and worker threads for wall-time comparisons.
//! Both support the asynchronous, synchronous and frozen-passive modes; the
//! centralized baseline always runs on one worker with exact reads.

mod delay;
mod deterministic;
mod threaded;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{vertical_partition_dataset, PartitionedDataset, RawDataset};
use crate::error::{Error, Result};
use crate::model::{assign_roles, HyperParams};
use crate::objectives::{full_block_gradients, full_objective, test_metric};

pub use delay::{DelayInjector, DelayPolicy};

/// Backward-updating payload sent from a dominator to its collaborators.
/// It has no field able to hold a label or a feature value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaMessage {
    pub theta: f64,
    pub sample: usize,
    pub issuer: usize,
    pub timestamp: u64,
    /// SVRG snapshot the message was computed under.
    pub snapshot_epoch: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Async,
    Sync,
    Centralized,
    FrozenPassive,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "async" => Ok(Self::Async),
            "sync" => Ok(Self::Sync),
            "centralized" | "nonf" => Ok(Self::Centralized),
            "frozen-passive" | "frozenpassive" | "frozen" => Ok(Self::FrozenPassive),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    /// Seeded single-threaded interleaver; replay-identical, including its
    /// simulated clock (configured costs, 1 µs per feature when unset).
    #[default]
    Deterministic,
    /// Real threads: one per active party plus `k` workers per party.
    Threaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Straggler {
    pub party: usize,
    pub factor: f64,
}

impl Straggler {
    pub const DEFAULT_FACTOR: f64 = 1.4;

    pub fn new(party: usize) -> Self {
        Self { party, factor: Self::DEFAULT_FACTOR }
    }
}

/// Synthetic costs charged by the threaded engine.
///
/// A party's per-sample block work costs `feature_cost_us` per feature it
/// owns, times the straggler factor on the slow party. Every message hop
/// costs `latency_us`. Costs are realised as sleeps so that thread-level
/// parallelism shows up in wall time even on a single core.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CostModel {
    pub feature_cost_us: f64,
    pub latency_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    /// Partials summed directly in party order.
    Plain,
    /// Two-tree masked aggregation.
    #[default]
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub q: usize,
    pub m: usize,
    pub k: usize,
    pub mode: Mode,
    pub execution: Execution,
    pub straggler: Option<Straggler>,
    pub hp: HyperParams,
    pub delay_policy: DelayPolicy,
    pub aggregation: AggregationKind,
    pub cost: CostModel,
    /// Stop once the training objective is at or below this value; running
    /// out of epochs first is a non-convergence error.
    pub target_objective: Option<f64>,
    /// Keep the model after every completed iteration (replay tests).
    pub record_trajectory: bool,
}

impl SimConfig {
    /// Deterministic asynchronous run with `k = m` and masked aggregation.
    pub fn new(q: usize, m: usize, hp: HyperParams) -> Self {
        Self {
            q,
            m,
            k: m.max(1),
            mode: Mode::Async,
            execution: Execution::Deterministic,
            straggler: None,
            hp,
            delay_policy: DelayPolicy::Uniform,
            aggregation: AggregationKind::Masked,
            cost: CostModel::default(),
            target_objective: None,
            record_trajectory: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::Config("q must be at least 1".into()));
        }
        if self.m == 0 || self.m > self.q {
            return Err(Error::Config(format!("m must satisfy 1 <= m <= q, got m={} q={}", self.m, self.q)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.mode == Mode::FrozenPassive && self.m == self.q {
            return Err(Error::Config("frozen-passive mode needs at least one passive party".into()));
        }
        if let Some(s) = self.straggler {
            if s.party >= self.q {
                return Err(Error::Config(format!("straggler party {} out of range for q={}", s.party, self.q)));
            }
            if !(1.3..=1.5).contains(&s.factor) {
                return Err(Error::Config(format!("straggler factor {} outside [1.3, 1.5]", s.factor)));
            }
        }
        let c = self.cost;
        if !(c.feature_cost_us >= 0.0 && c.feature_cost_us.is_finite() && c.latency_us >= 0.0 && c.latency_us.is_finite()) {
            return Err(Error::Config("costs must be finite and non-negative".into()));
        }
        if let Some(t) = self.target_objective {
            if !t.is_finite() {
                return Err(Error::Config("target objective must be finite".into()));
            }
        }
        self.hp.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })
    }

    pub(crate) fn slowdown(&self, party: usize) -> f64 {
        match self.straggler {
            Some(s) if s.party == party => s.factor,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: f64,
    pub wall_ms: f64,
    pub objective: f64,
    pub test_metric: f64,
    pub max_staleness: usize,
    /// Euclidean norm of the full training gradient.
    #[serde(skip)]
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    pub final_w: Vec<f64>,
    /// Cumulative per-block update counts after each epoch.
    pub block_versions: Vec<Vec<u64>>,
    /// Reads per staleness value.
    pub staleness_histogram: Vec<u64>,
    /// Largest delivery delay seen by any message, in scheduler ticks for
    /// the deterministic engine.
    pub max_message_age: usize,
    pub trajectory: Vec<Vec<f64>>,
}

pub const TRACE_HEADER: [&str; 5] = ["epoch", "wall_ms", "objective", "test_metric", "max_staleness"];

impl TrainingTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Wall time of the first row whose objective is at or below `target`.
    pub fn time_to_objective(&self, target: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.objective <= target).map(|r| r.wall_ms)
    }

    pub fn max_staleness(&self) -> usize {
        self.rows.iter().map(|r| r.max_staleness).max().unwrap_or(0)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(TRACE_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.wall_ms.to_string(),
                format!("{:e}", r.objective),
                r.test_metric.to_string(),
                r.max_staleness.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) struct EpochStats {
    pub max_staleness: usize,
    pub max_message_age: usize,
}

pub(crate) trait Engine {
    fn run_epoch(&mut self, epoch: u64) -> Result<EpochStats>;
    fn weights(&self) -> Vec<f64>;
    fn versions(&self) -> Vec<u64>;
    fn staleness_histogram(&self) -> Vec<u64>;
    /// Replay-stable clock, when the engine has one.
    fn simulated_ms(&self) -> Option<f64> {
        None
    }
    fn take_trajectory(&mut self) -> Vec<Vec<f64>> {
        Vec::new()
    }
}

pub(crate) fn gather(w: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&j| w[j]).collect()
}

/// Per-party partial products of sample `i` against a full model read.
pub(crate) fn partials(data: &PartitionedDataset, w: &[f64], i: usize) -> Vec<f64> {
    data.blocks()
        .iter()
        .zip(data.partition().blocks())
        .map(|(b, idx)| b.dot(i, &gather(w, idx)))
        .collect()
}

/// Trains on `data`, reporting the test metric on the training set.
pub fn run(config: &SimConfig, data: &PartitionedDataset) -> Result<TrainingTrace> {
    run_with_eval(config, data, None)
}

/// Trains on `train`; the test metric is measured on `test` when given.
pub fn run_with_eval(
    config: &SimConfig,
    train: &PartitionedDataset,
    test: Option<&PartitionedDataset>,
) -> Result<TrainingTrace> {
    config.validate()?;
    if train.q() != config.q {
        return Err(Error::Config(format!("data has {} blocks but q={}", train.q(), config.q)));
    }
    if train.n() == 0 {
        return Err(Error::EmptyData("training set is empty".into()));
    }
    if let Some(t) = test {
        if t.d() != train.d() {
            return Err(Error::Dimension { expected: train.d(), got: t.d() });
        }
    }
    let roles = assign_roles(config.q, config.m)?;
    let data = train.with_label_holders(&roles)?;
    let eval = test.unwrap_or(&data);

    let mut engine: Box<dyn Engine + '_> = match (config.mode, config.execution) {
        (Mode::Centralized, _) | (_, Execution::Deterministic) => {
            Box::new(deterministic::DeterministicEngine::new(config, &data)?)
        }
        (_, Execution::Threaded) => Box::new(threaded::ThreadedEngine::new(config, &data)?),
    };

    let hp = &config.hp;
    let evaluate = |w: &[f64], epoch: f64, wall_ms: f64, stale: usize| -> Result<TraceRow> {
        Ok(TraceRow {
            epoch,
            wall_ms,
            objective: full_objective(&data, w, hp.loss, hp.regularizer, hp.lambda)?,
            test_metric: test_metric(eval, w, hp.loss)?,
            max_staleness: stale,
            grad_norm: full_block_gradients(&data, w, hp.loss, hp.regularizer, hp.lambda)?.norm(),
        })
    };

    let mut trace = TrainingTrace::default();
    let w0 = engine.weights();
    trace.rows.push(evaluate(&w0, 0.0, 0.0, 0)?);
    trace.block_versions.push(engine.versions());
    let reached = |trace: &TrainingTrace| match config.target_objective {
        Some(t) => trace.rows.last().is_some_and(|r| r.objective <= t),
        None => false,
    };
    let mut wall_ms = 0.0;
    let mut epochs_run = 0;
    let mut failure = None;
    while epochs_run < hp.epochs && !reached(&trace) {
        let start = Instant::now();
        let stats = match engine.run_epoch(epochs_run as u64) {
            Ok(s) => s,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        wall_ms = match engine.simulated_ms() {
            Some(ms) => ms,
            None => wall_ms + start.elapsed().as_secs_f64() * 1e3,
        };
        epochs_run += 1;
        trace.max_message_age = trace.max_message_age.max(stats.max_message_age);
        let w = engine.weights();
        match evaluate(&w, epochs_run as f64, wall_ms, stats.max_staleness) {
            Ok(row) => trace.rows.push(row),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
        trace.block_versions.push(engine.versions());
    }
    trace.final_w = engine.weights();
    trace.staleness_histogram = engine.staleness_histogram();
    trace.trajectory = engine.take_trajectory();
    if let Some(e) = failure {
        return Err(e);
    }
    if config.target_objective.is_some() && !reached(&trace) {
        let last_objective = trace.rows.last().map_or(f64::NAN, |r| r.objective);
        return Err(Error::NonConvergence { epochs: epochs_run, last_objective, partial: Box::new(trace) });
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupPoint {
    pub q: usize,
    /// Wall time to the target; `None` when the target was not reached.
    pub wall_ms: Option<f64>,
    pub speedup: Option<f64>,
}

/// Time-to-target for each party count, relative to a single party.
///
/// The features are re-partitioned for every `q`, at most `q` parties are
/// active, and a configured straggler is moved to the last party. A `q = 1`
/// baseline is run even when absent from `party_counts`. A party count that
/// misses the target gets empty cells; a baseline that misses it leaves every
/// speedup empty.
pub fn run_speedup_suite(
    template: &SimConfig,
    raw: &RawDataset,
    party_counts: &[usize],
    partition_seed: u64,
) -> Result<Vec<SpeedupPoint>> {
    let target = template
        .target_objective
        .ok_or_else(|| Error::Config("speedup suite needs a target objective".into()))?;
    if party_counts.is_empty() {
        return Err(Error::Config("no party counts given".into()));
    }
    let time_for = |q: usize| -> Result<f64> {
        let data = vertical_partition_dataset(raw, q, partition_seed)?;
        let mut cfg = template.clone();
        cfg.q = q;
        cfg.m = template.m.min(q);
        cfg.k = template.k;
        cfg.straggler = template.straggler.map(|s| Straggler { party: q - 1, ..s });
        if cfg.mode == Mode::FrozenPassive && cfg.m == q {
            cfg.mode = Mode::Async;
        }
        let trace = run(&cfg, &data)?;
        trace
            .time_to_objective(target)
            .ok_or_else(|| Error::State("target reached but no row records it".into()))
    };
    let converged = |t: Result<f64>| match t {
        Ok(ms) => Ok(Some(ms)),
        Err(Error::NonConvergence { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    if party_counts.contains(&0) {
        return Err(Error::Config("party count 0".into()));
    }
    let base = converged(time_for(1))?;
    party_counts
        .iter()
        .map(|&q| {
            let wall_ms = if q == 1 { base } else { converged(time_for(q))? };
            let speedup = match (base, wall_ms) {
                (Some(_), Some(_)) if q == 1 => Some(1.0),
                (Some(b), Some(ms)) => Some(b / ms),
                _ => None,
            };
            Ok(SpeedupPoint { q, wall_ms, speedup })
        })
        .collect()
}
