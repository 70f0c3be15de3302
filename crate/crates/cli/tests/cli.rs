use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfb2-sim")).args(args).current_dir(dir).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Tiny separable CSV: label in column 0, {0, 1} labels.
fn tiny_csv(dir: &TempDir) -> PathBuf {
    let mut text = String::from("y,a,b,c,d\n");
    for i in 0..40 {
        let a = (i as f64 * 0.7).sin();
        let b = (i as f64 * 1.3).cos();
        let y = u8::from(a + 0.5 * b > 0.0);
        text += &format!("{y},{a},{b},{},{}\n", a * b, (i % 5) as f64 / 5.0);
    }
    write(dir, "tiny.csv", &text)
}

const SMALL: &str = "synthetic_n = 200\nsynthetic_d = 8\nq = 4\nm = 2\ngamma = 0.05\n";

#[derive(Debug, serde::Deserialize)]
struct Row {
    epoch: f64,
    wall_ms: f64,
    objective: f64,
    test_metric: f64,
    max_staleness: usize,
}

fn read_trace(path: &Path) -> Vec<Row> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["epoch", "wall_ms", "objective", "test_metric", "max_staleness"]);
    rdr.deserialize().map(|r| r.unwrap()).collect()
}

#[test]
fn centralized_sgd_on_csv_writes_one_row_per_epoch_plus_baseline() {
    let dir = TempDir::new().unwrap();
    tiny_csv(&dir);
    write(
        &dir,
        "c.toml",
        "format = \"csv\"\ndataset = \"tiny.csv\"\nq = 2\nm = 1\nalgorithm = \"sgd\"\nmode = \"centralized\"\nepochs = 2\n",
    );
    let out = sim(&["run", "--config", "c.toml", "--out", "trace.csv"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("epochs=2 "));
    let rows = read_trace(&dir.path().join("trace.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), [0.0, 1.0, 2.0]);
    assert!(rows.iter().all(|r| r.max_staleness == 0 && r.wall_ms >= 0.0));
    assert!(rows[2].objective < rows[0].objective);
    assert!((0.0..=1.0).contains(&rows[2].test_metric));
}

#[test]
fn emitted_csv_round_trips_every_value() {
    let dir = TempDir::new().unwrap();
    write(&dir, "c.toml", &format!("{SMALL}tau1 = 2\ntau2 = 2\nepochs = 3\n"));
    let out = sim(&["run", "--config", "c.toml"], dir.path());
    assert_eq!(code(&out), 0);
    // the CSV goes to stdout when no output file is named
    let text = stdout(&out);
    let path = write(&dir, "copy.csv", &text);
    let rows = read_trace(&path);
    assert_eq!(rows.len(), 4);
    let mut again = String::from("epoch,wall_ms,objective,test_metric,max_staleness\n");
    for r in &rows {
        again += &format!("{},{},{:e},{},{}\n", r.epoch, r.wall_ms, r.objective, r.test_metric, r.max_staleness);
    }
    assert_eq!(again, text);
}

#[test]
fn deterministic_runs_write_identical_csvs() {
    let dir = TempDir::new().unwrap();
    write(&dir, "c.toml", &format!("{SMALL}algorithm = \"saga\"\ntau1 = 3\ntau2 = 1\nepochs = 3\nexecution = \"threaded\"\n"));
    for name in ["a.csv", "b.csv"] {
        let out = sim(&["run", "--config", "c.toml", "--deterministic", "--out", name], dir.path());
        assert_eq!(code(&out), 0);
    }
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    let out = sim(&["run", "--config", "c.toml", "--deterministic", "--seed", "1", "--out", "c.csv"], dir.path());
    assert_eq!(code(&out), 0);
    assert_ne!(a, fs::read(dir.path().join("c.csv")).unwrap());
}

#[test]
fn svrg_objective_decreases_every_epoch_after_the_first() {
    let dir = TempDir::new().unwrap();
    write(&dir, "c.toml", &format!("{SMALL}lambda = 1e-2\nepochs = 12\nout = \"t.csv\"\n"));
    assert_eq!(code(&sim(&["run", "--config", "c.toml"], dir.path())), 0);
    let rows = read_trace(&dir.path().join("t.csv"));
    for pair in rows[1..].windows(2) {
        assert!(pair[1].objective < pair[0].objective, "{} !< {}", pair[1].objective, pair[0].objective);
    }
}

#[test]
fn config_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    write(&dir, "bad_m.toml", "q = 2\nm = 3\n");
    write(&dir, "bad_key.toml", "gama = 0.1\n");
    write(&dir, "bad_gamma.toml", "gamma = -0.1\n");
    write(&dir, "missing.toml", "format = \"libsvm\"\ndataset = \"nowhere.svm\"\n");
    for cfg in ["bad_m.toml", "bad_key.toml", "bad_gamma.toml", "missing.toml", "absent.toml"] {
        let out = sim(&["run", "--config", cfg], dir.path());
        assert_eq!(code(&out), 1, "{cfg}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(code(&sim(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&sim(&["run", "--seed", "x"], dir.path())), 1);
    assert_eq!(code(&sim(&["--help"], dir.path())), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    write(&dir, "bad.svm", "1 1:0.5\n-1 2:x\n");
    write(&dir, "bad.csv", "y,a\n1,2\n0,oops\n");
    write(&dir, "svm.toml", "format = \"libsvm\"\ndataset = \"bad.svm\"\nq = 1\nm = 1\n");
    write(&dir, "csv.toml", "format = \"csv\"\ndataset = \"bad.csv\"\nq = 1\nm = 1\n");
    for cfg in ["svm.toml", "csv.toml"] {
        let out = sim(&["run", "--config", cfg], dir.path());
        assert_eq!(code(&out), 2, "{cfg}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
    }
}

#[test]
fn missed_target_exits_with_three_and_keeps_partial_csv() {
    let dir = TempDir::new().unwrap();
    write(&dir, "c.toml", &format!("{SMALL}epochs = 2\ntarget_objective = 1e-3\n"));
    let out = sim(&["run", "--config", "c.toml", "--out", "partial.csv"], dir.path());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("target not reached"));
    assert_eq!(read_trace(&dir.path().join("partial.csv")).len(), 3);
}

#[test]
fn reachable_target_stops_early() {
    let dir = TempDir::new().unwrap();
    write(&dir, "c.toml", &format!("{SMALL}epochs = 50\ntarget_suboptimality = 1e-2\nout = \"t.csv\"\n"));
    assert_eq!(code(&sim(&["run", "--config", "c.toml"], dir.path())), 0);
    assert!(read_trace(&dir.path().join("t.csv")).len() < 51);
}

#[test]
fn zero_delay_compare_is_exactly_lossless() {
    let dir = TempDir::new().unwrap();
    write(&dir, "c.toml", &format!("{SMALL}epochs = 5\n"));
    let out = sim(&["compare", "--config", "c.toml"], dir.path());
    assert_eq!(code(&out), 0);
    let report = stdout(&out);
    assert!(report.contains("delta federated-centralized=0e0"), "{report}");
    assert!(report.contains("LOSSLESS (tolerance 1e-6)"));
}

#[test]
fn frozen_passive_shows_an_ablation_gap() {
    let dir = TempDir::new().unwrap();
    write(
        &dir,
        "c.toml",
        "synthetic = \"informative-passive\"\nsynthetic_n = 300\nsynthetic_d = 10\nq = 2\nm = 1\nepochs = 10\nlambda = 1e-2\n",
    );
    let out = sim(&["compare", "--config", "c.toml", "--out", "report.txt"], dir.path());
    assert_eq!(code(&out), 0);
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert_eq!(report, stdout(&out));
    assert!(report.contains("ABLATION-GAP"), "{report}");
    assert!(report.contains("\nLOSSLESS"));
}

#[test]
fn compare_rejects_mismatched_datasets() {
    let dir = TempDir::new().unwrap();
    write(&dir, "a.toml", SMALL);
    write(&dir, "b.toml", &format!("{SMALL}seed = 4\n"));
    let out = sim(&["compare", "--config", "a.toml", "--centralized", "b.toml"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("different datasets"));
}

fn speedup_rows(text: &str) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["q", "wall_ms", "speedup"]);
    rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}

const SPEEDUP: &str = "synthetic_n = 80\nsynthetic_d = 16\nq = 4\nm = 2\nepochs = 20\ntest_fraction = 0\n\
                       execution = \"threaded\"\nfeature_cost_us = 10\n";

#[test]
fn single_party_speedup_is_one() {
    let dir = TempDir::new().unwrap();
    write(&dir, "c.toml", &format!("{SPEEDUP}target_objective = 0.6\n"));
    let out = sim(&["speedup", "--config", "c.toml", "--q-list", "1"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = speedup_rows(&stdout(&out));
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0][0].as_str(), rows[0][2].as_str()), ("1", "1"));
}

#[test]
fn speedup_rows_follow_the_requested_order() {
    let dir = TempDir::new().unwrap();
    write(&dir, "c.toml", &format!("{SPEEDUP}target_objective = 0.6\nq_list = [4, 1, 2]\nout = \"s.csv\"\n"));
    assert_eq!(code(&sim(&["speedup", "--config", "c.toml"], dir.path())), 0);
    let rows = speedup_rows(&fs::read_to_string(dir.path().join("s.csv")).unwrap());
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["4", "1", "2"]);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn unreachable_speedup_targets_leave_empty_cells() {
    let dir = TempDir::new().unwrap();
    write(&dir, "c.toml", &format!("{SPEEDUP}target_objective = 1e-3\n"));
    let out = sim(&["speedup", "--config", "c.toml", "--q-list", "1,2", "--seed", "2"], dir.path());
    assert_eq!(code(&out), 0);
    let rows = speedup_rows(&stdout(&out));
    assert_eq!(rows, [["1", "", ""], ["2", "", ""]]);
    write(&dir, "none.toml", SPEEDUP);
    assert_eq!(code(&sim(&["speedup", "--config", "none.toml"], dir.path())), 1);
}

fn last_line(out: &Output) -> String {
    stdout(out).lines().last().unwrap().to_string()
}

#[test]
fn honest_audit_finds_nothing() {
    let dir = TempDir::new().unwrap();
    write(&dir, "c.toml", SMALL);
    let out = sim(&["audit", "--config", "c.toml"], dir.path());
    assert_eq!(code(&out), 0);
    assert_eq!(last_line(&out), "0 violations");
    assert!(stdout(&out).contains("100 aggregations over q=4 parties"));
}

#[test]
fn collusion_is_flagged() {
    let dir = TempDir::new().unwrap();
    write(&dir, "c.toml", SMALL);
    let out = sim(&["audit", "--config", "c.toml", "--simulate-collusion"], dir.path());
    assert_eq!(code(&out), 0);
    let n: usize = last_line(&out).strip_suffix(" violations").unwrap().parse().unwrap();
    assert!(n >= 1);
}

#[test]
fn unmasked_debug_exposes_every_party_each_time() {
    let dir = TempDir::new().unwrap();
    for q in [3, 4, 6] {
        write(&dir, "c.toml", &format!("synthetic_n = 100\nsynthetic_d = 12\nq = {q}\nm = 1\n"));
        let out = sim(&["audit", "--config", "c.toml", "--unmask-debug"], dir.path());
        assert_eq!(last_line(&out), format!("{} violations", 100 * q));
    }
}

#[test]
fn partition_lists_every_feature_once() {
    let dir = TempDir::new().unwrap();
    write(&dir, "c.toml", "synthetic_d = 10\nq = 3\nm = 1\n");
    let out = sim(&["partition", "--config", "c.toml"], dir.path());
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("party 0 active"));
    assert!(lines[1].starts_with("party 1 passive"));
    let mut seen: Vec<usize> = lines
        .iter()
        .flat_map(|l| l.split("features=").nth(1).unwrap().split(',').map(|f| f.parse::<usize>().unwrap()))
        .collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
}
