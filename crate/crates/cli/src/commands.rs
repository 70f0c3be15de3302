use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use vfb2::reference;
use vfb2::runtime::{run_speedup_suite, run_with_eval, Execution, SpeedupPoint, TrainingTrace};
use vfb2::secure_agg::{audit_pairwise_collusion, audit_transcript, build_tree_pair, masked_aggregate_with, MaskMode};
use vfb2::{Error, Mode, SimConfig};

use crate::config::{ConfigError, ExperimentConfig, Prepared};

/// Writes to `path`, or to stdout when there is none.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

/// Turns a suboptimality target into an objective target.
fn resolve_target(cfg: &ExperimentConfig, sim: &mut SimConfig, data: &Prepared) -> Result<()> {
    if let Some(eps) = cfg.target_suboptimality {
        let hp = &sim.hp;
        let opt = reference::solve(&data.train, hp.loss, hp.regularizer, hp.lambda, 1e-10, 500)?;
        sim.target_objective = Some(opt.objective + eps);
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, mode: Option<Mode>, data: &Prepared) -> Result<TrainingTrace> {
    let mut sim = cfg.sim_config()?;
    if let Some(mode) = mode {
        sim.mode = mode;
    }
    resolve_target(cfg, &mut sim, data)?;
    Ok(run_with_eval(&sim, &data.train, data.test.as_ref())?)
}

pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    let data = cfg.prepare()?;
    let (trace, failure) = match train(cfg, None, &data) {
        Ok(t) => (t, None),
        Err(e) => match e.downcast::<Error>() {
            Ok(Error::NonConvergence { epochs, last_objective, partial }) => {
                (*partial, Some(Error::NonConvergence { epochs, last_objective, partial: Box::default() }))
            }
            Ok(other) => return Err(other.into()),
            Err(e) => return Err(e),
        },
    };
    trace.write_csv(sink(cfg.out.as_deref())?)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let last = trace.last().context("empty trace")?;
    let summary = format!(
        "epochs={} wall_ms={:.3} objective={:e} test_metric={} max_staleness={}",
        last.epoch,
        last.wall_ms,
        last.objective,
        last.test_metric,
        trace.max_staleness()
    );
    // keep stdout clean when it carries the CSV
    if cfg.out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

/// Final test metric of each arm.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub federated: f64,
    pub centralized: f64,
    pub frozen: Option<f64>,
    pub tolerance: f64,
    /// Higher test metric is better (accuracy) or worse (RMSE).
    pub higher_is_better: bool,
}

impl Comparison {
    pub fn delta(&self) -> f64 {
        self.federated - self.centralized
    }

    pub fn lossless(&self) -> bool {
        self.delta().abs() <= self.tolerance
    }

    pub fn ablation_gap(&self) -> bool {
        match self.frozen {
            Some(f) if self.higher_is_better => f < self.federated,
            Some(f) => f > self.federated,
            None => false,
        }
    }

    pub fn report(&self) -> String {
        let mut s = format!("federated   test_metric={}\n", self.federated);
        s += &format!("centralized test_metric={}\n", self.centralized);
        match self.frozen {
            Some(f) => s += &format!("frozen      test_metric={f}\n"),
            None => s += "frozen      n/a (no passive party)\n",
        }
        s += &format!("delta federated-centralized={:e}\n", self.delta());
        if let Some(f) = self.frozen {
            s += &format!("delta frozen-federated={:e}\n", f - self.federated);
        }
        let verdict = if self.lossless() { "LOSSLESS" } else { "NOT-LOSSLESS" };
        s += &format!("{verdict} (tolerance {:e})\n", self.tolerance);
        if self.ablation_gap() {
            s += "ABLATION-GAP\n";
        }
        s
    }
}

fn final_metric(trace: &TrainingTrace) -> Result<f64> {
    Ok(trace.last().context("empty trace")?.test_metric)
}

/// `centralized` and `frozen` default to the federated config with the mode
/// swapped; when given they must describe the same data.
pub fn compare(
    fed: &ExperimentConfig,
    centralized: Option<&ExperimentConfig>,
    frozen: Option<&ExperimentConfig>,
) -> Result<Comparison> {
    for other in [centralized, frozen].into_iter().flatten() {
        if other.data_identity() != fed.data_identity() {
            bail!(ConfigError("compared configs use different datasets, losses or seeds".into()));
        }
    }
    let data = fed.prepare()?;
    let federated = final_metric(&train(fed, None, &data)?)?;
    let centralized = final_metric(&train(centralized.unwrap_or(fed), Some(Mode::Centralized), &data)?)?;
    let frozen_cfg = frozen.unwrap_or(fed);
    let frozen = if frozen_cfg.m < frozen_cfg.q {
        Some(final_metric(&train(frozen_cfg, Some(Mode::FrozenPassive), &data)?)?)
    } else {
        None
    };
    let sim = fed.sim_config()?;
    let tolerance = fed.lossless_tolerance.unwrap_or(match sim.execution {
        Execution::Deterministic => 1e-6,
        Execution::Threaded => 5e-3,
    });
    Ok(Comparison { federated, centralized, frozen, tolerance, higher_is_better: sim.hp.loss.is_classification() })
}

pub fn write_speedup_csv(points: &[SpeedupPoint], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["q", "wall_ms", "speedup"])?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in points {
        w.write_record([p.q.to_string(), cell(p.wall_ms), cell(p.speedup)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn speedup(cfg: &ExperimentConfig) -> Result<Vec<SpeedupPoint>> {
    if cfg.q_list.is_empty() {
        bail!(ConfigError("q_list is empty".into()));
    }
    if cfg.target_objective.is_none() && cfg.target_suboptimality.is_none() {
        bail!(ConfigError("speedup needs target_objective or target_suboptimality".into()));
    }
    let data = cfg.prepare()?;
    let mut sim = cfg.sim_config()?;
    resolve_target(cfg, &mut sim, &data)?;
    let points = run_speedup_suite(&sim, &data.raw_train, &cfg.q_list, cfg.seed)?;
    write_speedup_csv(&points, sink(cfg.out.as_deref())?)?;
    Ok(points)
}

pub const AUDIT_ROUNDS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditSummary {
    pub aggregations: usize,
    pub violations: usize,
}

/// Runs masked aggregations over partial products of a briefly trained
/// model and audits every transcript.
pub fn audit(cfg: &ExperimentConfig, collusion: bool, unmask: bool) -> Result<AuditSummary> {
    let data = cfg.prepare()?;
    let mut warmup = cfg.sim_config()?;
    warmup.hp.epochs = 1;
    warmup.execution = Execution::Deterministic;
    warmup.target_objective = None;
    let w = run_with_eval(&warmup, &data.train, None)?.final_w;
    let trees = build_tree_pair(cfg.q, cfg.seed)?;
    let mode = if unmask { MaskMode::Zero } else { MaskMode::Random };
    let mut out = sink(cfg.out.as_deref())?;
    let mut violations = 0;
    let n = data.train.n();
    for t in 0..AUDIT_ROUNDS {
        let i = (t * 7919) % n;
        let partials: Vec<f64> = (0..cfg.q)
            .map(|l| {
                let block = data.train.block(l)?;
                let w_block = vfb2::block_view(&w, data.train.partition(), l)?;
                Ok(block.dot(i, &w_block))
            })
            .collect::<vfb2::Result<_>>()?;
        let seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ t as u64;
        let (_, transcript) = masked_aggregate_with(&partials, seed, &trees, mode)?;
        let mut report = audit_transcript(&transcript, &partials);
        if collusion {
            report.merge(audit_pairwise_collusion(&transcript, &partials));
        }
        if !report.is_clean() {
            write!(out, "aggregation {t} sample {i}: {report}")?;
        }
        violations += report.len();
    }
    let summary = AuditSummary { aggregations: AUDIT_ROUNDS, violations };
    writeln!(out, "{} aggregations over q={} parties{}", summary.aggregations, cfg.q, trees_note(trees.degraded))?;
    writeln!(out, "{} violations", summary.violations)?;
    out.flush()?;
    Ok(summary)
}

fn trees_note(degraded: bool) -> &'static str {
    if degraded {
        " (fewer than 4 parties: trees only keep leaf receivers apart)"
    } else {
        ""
    }
}

pub fn partition(cfg: &ExperimentConfig) -> Result<()> {
    let data = cfg.prepare()?;
    let mut out = sink(cfg.out.as_deref())?;
    let roles = vfb2::assign_roles(cfg.q, cfg.m)?;
    for (role, block) in roles.iter().zip(data.train.partition().blocks()) {
        let kind = if role.is_active() { "active" } else { "passive" };
        let features: Vec<String> = block.iter().map(usize::to_string).collect();
        writeln!(out, "party {} {kind} width={} features={}", role.party_id, block.len(), features.join(","))?;
    }
    out.flush()?;
    Ok(())
}
