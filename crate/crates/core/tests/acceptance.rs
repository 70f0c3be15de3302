//! Acceptance suite. Runs every criterion sequentially (timings matter, so
//! nothing runs concurrently), prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use vfb2::data::{train_test_split, vertical_partition_dataset, vertical_partition_with, PartitionedDataset, SparseRow};
use vfb2::model::rng_stream;
use vfb2::objectives::{block_gradient, loss_value, reg_value};
use vfb2::reference::solve;
use vfb2::runtime::{AggregationKind, CostModel, Execution, Straggler};
use vfb2::secure_agg::{build_tree_pair, masked_aggregate, significantly_different, AggTree, Group, Phase};
use vfb2::synthetic::{classification, informative_passive};
use vfb2::{run, run_with_eval, Algorithm, HyperParams, LossKind, Mode, RegularizerKind, SimConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Outcome {
    let took = start.elapsed();
    check(took < limit, format!("{detail}; {:.2}s of {}s budget", took.as_secs_f64(), limit.as_secs()))
}

fn err(e: vfb2::Error) -> String {
    e.to_string()
}

fn c1_losslessness() -> Outcome {
    let start = Instant::now();
    let s = classification(500, 20, 0.05, 11).map_err(err)?;
    let (train_raw, test_raw) = train_test_split(&s.data, 0.2, 11).map_err(err)?;
    let train = vertical_partition_dataset(&train_raw, 4, 11).map_err(err)?;
    let test = vertical_partition_with(&test_raw, train.partition_arc()).map_err(err)?;
    let hp = HyperParams { gamma: 0.05, lambda: 1e-3, algorithm: Algorithm::Svrg, epochs: 10, seed: 5, ..Default::default() };

    let mut fed = SimConfig::new(4, 2, hp);
    fed.aggregation = AggregationKind::Plain;
    fed.record_trajectory = true;
    let mut central = fed.clone();
    central.mode = Mode::Centralized;
    let a = run_with_eval(&fed, &train, Some(&test)).map_err(err)?;
    let b = run_with_eval(&central, &train, Some(&test)).map_err(err)?;
    let bitwise = !a.trajectory.is_empty()
        && a.trajectory.len() == b.trajectory.len()
        && a.trajectory.iter().flatten().zip(b.trajectory.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits());

    let mut threaded = fed.clone();
    threaded.execution = Execution::Threaded;
    threaded.aggregation = AggregationKind::Masked;
    threaded.record_trajectory = false;
    threaded.hp.tau1 = 4;
    threaded.hp.tau2 = 4;
    let c = run_with_eval(&threaded, &train, Some(&test)).map_err(err)?;
    let acc_central = b.last().map_or(f64::NAN, |r| r.test_metric);
    let acc_async = c.last().map_or(f64::NAN, |r| r.test_metric);
    let delta = (acc_central - acc_async).abs();
    let detail = format!(
        "trajectory {} over {} iterates; test accuracy central {acc_central:.4} threaded-async {acc_async:.4} (delta {delta:.1e})",
        if bitwise { "bitwise equal" } else { "DIFFERS" },
        a.trajectory.len()
    );
    check(bitwise && delta <= 5e-3, detail.clone())?;
    within(Duration::from_secs(10), start, detail)
}

fn c2_ablation() -> Outcome {
    let start = Instant::now();
    let mut worst_ratio = f64::INFINITY;
    for seed in 0..5u64 {
        let (s, partition) = informative_passive(300, 2, 5, 0.7, seed).map_err(err)?;
        let data = vertical_partition_with(&s.data, Arc::new(partition)).map_err(err)?;
        let final_objective = |mode: Mode, run_seed: u64| -> Result<f64, String> {
            let hp = HyperParams {
                gamma: 0.05,
                lambda: 1e-2,
                algorithm: Algorithm::Svrg,
                epochs: 25,
                seed: run_seed,
                tau1: 2,
                tau2: 2,
                ..Default::default()
            };
            let mut cfg = SimConfig::new(2, 1, hp);
            cfg.mode = mode;
            let t = run(&cfg, &data).map_err(err)?;
            Ok(t.last().map_or(f64::NAN, |r| r.objective))
        };
        let full: Vec<f64> = (0..3).map(|r| final_objective(Mode::Async, 100 + r)).collect::<Result<_, _>>()?;
        let frozen = final_objective(Mode::FrozenPassive, 100)?;
        let hi = full.iter().cloned().fold(f64::MIN, f64::max);
        let lo = full.iter().cloned().fold(f64::MAX, f64::min);
        let noise = hi - lo;
        let gap = frozen - hi;
        if !(gap > 0.0 && gap >= 5.0 * noise) {
            return Err(format!("seed {seed}: frozen {frozen:.6} vs full {hi:.6}, noise {noise:.2e}"));
        }
        worst_ratio = worst_ratio.min(if noise > 0.0 { gap / noise } else { f64::INFINITY });
    }
    within(
        Duration::from_secs(30),
        start,
        format!("frozen-passive objective above full updating on 5 seeds; smallest gap/noise ratio {worst_ratio:.1e}"),
    )
}

fn rate_data() -> Result<PartitionedDataset, String> {
    let s = classification(200, 20, 0.1, 7).map_err(err)?;
    vertical_partition_dataset(&s.data, 4, 1).map_err(err)
}

fn c3_convergence_rate() -> Outcome {
    let start = Instant::now();
    let data = rate_data()?;
    let lambda = 1e-2;
    let reference = solve(&data, LossKind::Logistic, RegularizerKind::L2, lambda, 1e-14, 100).map_err(err)?;
    let floor = 1e-8;
    let mut parts = Vec::new();
    let mut sgd_plateau = 0.0;
    for alg in [Algorithm::Sgd, Algorithm::Svrg, Algorithm::Saga] {
        let hp = HyperParams { gamma: 0.05, lambda, algorithm: alg, epochs: 60, seed: 3, tau1: 2, tau2: 2, ..Default::default() };
        let t = run(&SimConfig::new(4, 2, hp), &data).map_err(err)?;
        let subopt: Vec<f64> = t.rows.iter().map(|r| r.objective - reference.objective).collect();
        match alg {
            Algorithm::Sgd => {
                sgd_plateau = subopt[subopt.len() - 10..].iter().cloned().fold(f64::MAX, f64::min);
                if sgd_plateau < 1e2 * floor {
                    return Err(format!("SGD reached {sgd_plateau:.1e}, below its expected plateau"));
                }
            }
            _ => {
                let Some(hit) = subopt.iter().position(|&v| v <= floor) else {
                    return Err(format!("{alg:?} ended at suboptimality {:.1e}", subopt[subopt.len() - 1]));
                };
                // linear rate: the log-suboptimality decreases at a steady negative slope
                let slope_a = (subopt[hit / 2].max(1e-300).ln() - subopt[1].ln()) / (hit / 2 - 1).max(1) as f64;
                let slope_b = (subopt[hit].max(1e-300).ln() - subopt[hit / 2].ln()) / (hit - hit / 2).max(1) as f64;
                if !(slope_a < 0.0 && slope_b < 0.0 && slope_a / slope_b < 4.0 && slope_b / slope_a < 4.0) {
                    return Err(format!("{alg:?} slopes {slope_a:.2} and {slope_b:.2} are not a steady linear rate"));
                }
                parts.push(format!("{alg:?} hit 1e-8 at epoch {hit}"));
            }
        }
    }
    within(
        Duration::from_secs(60),
        start,
        format!("{}; SGD plateau {sgd_plateau:.1e}", parts.join(", ")),
    )
}

fn c4_nonconvex() -> Outcome {
    let start = Instant::now();
    let data = rate_data()?;
    let mut parts = Vec::new();
    for alg in [Algorithm::Svrg, Algorithm::Saga] {
        let hp = HyperParams {
            gamma: 0.05,
            lambda: 1e-2,
            regularizer: RegularizerKind::Nonconvex,
            algorithm: alg,
            epochs: 100,
            seed: 3,
            tau1: 2,
            tau2: 2,
            ..Default::default()
        };
        let t = run(&SimConfig::new(4, 2, hp), &data).map_err(err)?;
        match t.rows.iter().position(|r| r.grad_norm < 1e-4) {
            Some(e) => parts.push(format!("{alg:?} gradient norm < 1e-4 at epoch {e}")),
            None => return Err(format!("{alg:?} final gradient norm {:.1e}", t.last().map_or(f64::NAN, |r| r.grad_norm))),
        }
    }
    within(Duration::from_secs(60), start, parts.join(", "))
}

fn c5_mask_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_stream(2024, 0);
    let pairs: Vec<_> = (2..=16).map(|q| build_tree_pair(q, q as u64)).collect::<Result<_, _>>().map_err(err)?;
    let mut worst = 0.0f64;
    let mut bare = 0usize;
    for k in 0..10_000u64 {
        let pair = &pairs[(k % 15) as usize];
        let q = pair.t1.q();
        let scale = 10f64.powi(rng.gen_range(-3..4));
        let partials: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let (result, transcript) = masked_aggregate(&partials, k, pair).map_err(err)?;
        let mut direct = 0.0;
        for p in &partials {
            direct += p;
        }
        let magnitude: f64 = partials.iter().map(|p| p.abs()).sum();
        worst = worst.max((result - direct).abs() / magnitude);
        bare += transcript
            .messages
            .iter()
            .filter(|m| m.phase == Phase::Masked)
            .filter(|m| partials.iter().any(|&p| (m.payload.decode() - p).abs() <= 1e-12))
            .count();
    }
    let detail = format!("10^4 aggregations, q in 2..=16: worst relative error {worst:.1e}, {bare} bare-partial payloads");
    check(worst <= 1e-9 && bare == 0, detail.clone())?;
    within(Duration::from_secs(5), start, detail)
}

fn c6_tree_checker() -> Outcome {
    let start = Instant::now();
    let g = |a: usize, b: usize| Group::Node(vec![Group::Leaf(a), Group::Leaf(b)]);
    let t1 = AggTree::from_groups(&Group::Node(vec![g(0, 1), g(2, 3)])).map_err(err)?;
    let t2 = AggTree::from_groups(&Group::Node(vec![g(0, 2), g(1, 3)])).map_err(err)?;
    let accepts = significantly_different(&t1, &t2).map_err(err)?;
    let rejects_identical = !significantly_different(&t1, &t1.clone()).map_err(err)?;
    let mut seeded = 0;
    for seed in 0..100u64 {
        let pair = build_tree_pair(8, seed).map_err(err)?;
        if significantly_different(&pair.t1, &pair.t2).map_err(err)? && !pair.degraded {
            seeded += 1;
        }
    }
    let detail = format!(
        "crossed q=4 pair {}, identical trees {}, {seeded}/100 seeded q=8 pairs significantly different",
        if accepts { "accepted" } else { "REJECTED" },
        if rejects_identical { "rejected" } else { "ACCEPTED" }
    );
    check(accepts && rejects_identical && seeded == 100, detail.clone())?;
    within(Duration::from_secs(1), start, detail)
}

fn c7_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_stream(77, 0);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for loss in [LossKind::Logistic, LossKind::Square, LossKind::RobustLinear] {
        for reg in [RegularizerKind::L2, RegularizerKind::Nonconvex, RegularizerKind::None] {
            for _ in 0..100 {
                let width = rng.gen_range(1..6);
                let w: Vec<f64> = (0..width).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let x: Vec<f64> = (0..width).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let rest = rng.gen_range(-1.0..1.0);
                let y = if loss.is_classification() {
                    if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
                } else {
                    rng.gen_range(-3.0..3.0)
                };
                let lambda = rng.gen_range(0.01..1.0);
                let f = |v: &[f64]| {
                    let inner = rest + v.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
                    loss_value(loss, inner, y) + lambda * reg_value(reg, v)
                };
                let inner = rest + SparseRow { indices: &(0..width as u32).collect::<Vec<_>>(), values: &x }.dot(&w);
                let t = vfb2::objectives::theta(loss, inner, y).map_err(err)?;
                let g = block_gradient(t, &x, lambda, reg, &w).map_err(err)?;
                let mut diff2 = 0.0;
                let mut norm2 = 0.0;
                for j in 0..width {
                    let (mut up, mut dn) = (w.clone(), w.clone());
                    up[j] += h;
                    dn[j] -= h;
                    let fd = (f(&up) - f(&dn)) / (2.0 * h);
                    diff2 += (fd - g[j]).powi(2);
                    norm2 += g[j] * g[j];
                }
                worst = worst.max(diff2.sqrt() / norm2.sqrt().max(1e-3));
            }
        }
    }
    let detail = format!("9 loss/regularizer pairs x 100 points, worst relative error {worst:.1e}");
    check(worst < 1e-5, detail.clone())?;
    within(Duration::from_secs(5), start, detail)
}

fn c8_bounded_staleness() -> Outcome {
    let start = Instant::now();
    let s = classification(1000, 4, 0.05, 0).map_err(err)?;
    let data = vertical_partition_dataset(&s.data, 2, 0).map_err(err)?;
    let hp = HyperParams { gamma: 0.05, lambda: 1e-2, algorithm: Algorithm::Sgd, epochs: 100, seed: 1, tau1: 3, tau2: 3, ..Default::default() };
    let t = run(&SimConfig::new(2, 1, hp), &data).map_err(err)?;
    let steps: u64 = t.staleness_histogram.iter().sum();
    let hits = t.staleness_histogram.get(3).copied().unwrap_or(0);
    let detail = format!(
        "{steps} steps, realized max staleness {}, {hits} reads at 3, max message age {}",
        t.max_staleness(),
        t.max_message_age
    );
    check(
        steps >= 100_000 && t.staleness_histogram.len() == 4 && t.max_staleness() == 3 && hits > 0 && t.max_message_age <= 3,
        detail.clone(),
    )?;
    within(Duration::from_secs(10), start, detail)
}

fn c9_async_vs_sync() -> Outcome {
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let s = classification(300, 32, 0.05, seed).map_err(err)?;
        let data = vertical_partition_dataset(&s.data, 8, seed).map_err(err)?;
        let lambda = 1e-2;
        let reference = solve(&data, LossKind::Logistic, RegularizerKind::L2, lambda, 1e-12, 100).map_err(err)?;
        let target = reference.objective + 1e-4;
        let time = |mode: Mode| -> Result<f64, String> {
            let hp = HyperParams { gamma: 0.05, lambda, algorithm: Algorithm::Svrg, epochs: 30, seed, tau1: 8, tau2: 8, ..Default::default() };
            let mut cfg = SimConfig::new(8, 3, hp);
            cfg.mode = mode;
            cfg.execution = Execution::Threaded;
            cfg.straggler = Some(Straggler::new(7));
            cfg.cost = CostModel { feature_cost_us: 25.0, latency_us: 100.0 };
            cfg.target_objective = Some(target);
            let t = run(&cfg, &data).map_err(err)?;
            t.time_to_objective(target).ok_or_else(|| "target not recorded".to_string())
        };
        let (a, b) = (time(Mode::Async)?, time(Mode::Sync)?);
        if a >= b {
            return Err(format!("seed {seed}: async {a:.0} ms >= sync {b:.0} ms"));
        }
        parts.push(format!("{a:.0}<{b:.0}"));
    }
    Ok(format!("async < sync wall ms to target on 3 seeds: {}", parts.join(", ")))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("losslessness", c1_losslessness),
        ("ablation ordering", c2_ablation),
        ("convergence-rate shape", c3_convergence_rate),
        ("nonconvex stationarity", c4_nonconvex),
        ("mask-cancellation exactness", c5_mask_exactness),
        ("tree-difference checker", c6_tree_checker),
        ("gradient correctness", c7_gradients),
        ("bounded staleness", c8_bounded_staleness),
        ("async-vs-sync efficiency", c9_async_vs_sync),
    ];
    let mut failed = Vec::new();
    for (k, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(d) => println!("criterion {} {name}: PASS ({d})", k + 1),
            Err(d) => {
                println!("criterion {} {name}: FAIL ({d})", k + 1);
                failed.push(k + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
