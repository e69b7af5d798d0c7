use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use comln::tasks::{load_all, sample_episode, TaskGenConfig};
use comln::trainer::{load_checkpoint, TrainConfig};

fn comln(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comln")).args(args).current_dir(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Everything but the trailing wall-time column.
fn without_timing(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
}

const SMALL: &[&str] = &[
    "--set",
    "tasks.way=3",
    "--set",
    "tasks.input_dim=4",
    "--set",
    "tasks.test_shots=4",
    "--set",
    "eval.episodes=5",
];

#[test]
fn missing_config_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = comln(dir.path(), &["train", "--config", "absent.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.toml"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = comln(dir.path(), &["train", "--config", "c.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"));
}

#[test]
fn zero_iterations_writes_initial_checkpoint_and_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--iterations", "0", "--out", "run"];
    args.extend_from_slice(SMALL);
    let out = comln(dir.path(), &args);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("run");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert!(metrics.starts_with("iteration,"));
    let expected = TrainConfig::default().init_params(3, 4);
    assert_eq!(load_checkpoint(run.join("checkpoint.ckpt")).unwrap(), expected);
    let resolved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("iterations = 0"));
    assert!(resolved.contains("way = 3"));
}

#[test]
fn training_reruns_are_identical_apart_from_timing() {
    let dir = tempfile::tempdir().unwrap();
    let mut first = None;
    for name in ["a", "b"] {
        let mut args = vec!["train", "--iterations", "4", "--out", name];
        args.extend_from_slice(SMALL);
        let out = comln(dir.path(), &args);
        assert!(out.status.success(), "{}", stderr(&out));
        let csv = fs::read_to_string(dir.path().join(name).join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        let ckpt = fs::read(dir.path().join(name).join("checkpoint.ckpt")).unwrap();
        let this = (without_timing(&csv), ckpt);
        match &first {
            None => first = Some(this),
            Some(f) => assert_eq!(f, &this),
        }
    }
}

#[test]
fn grad_check_passes_with_one_row_per_component() {
    let dir = tempfile::tempdir().unwrap();
    let out = comln(dir.path(), &["grad-check", "--seeds", "1"]);
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("0,")).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.ends_with(",PASS")));
    assert_eq!(text.lines().last(), Some("PASS"));
}

#[test]
fn grad_check_covers_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = comln(dir.path(), &["grad-check", "--seeds", "3"]);
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.ends_with(",PASS")).count(), 15);
}

#[test]
fn grad_check_reports_a_corrupted_component() {
    let dir = tempfile::tempdir().unwrap();
    for component in ["grad_W0", "grad_phi_test", "grad_T"] {
        let out = comln(dir.path(), &["grad-check", "--seeds", "1", "--inject-fault", component]);
        assert_eq!(out.status.code(), Some(1));
        let err = stderr(&out);
        assert!(err.contains(component) && err.contains("seed 0"), "{err}");
        let failing: Vec<String> =
            stdout(&out).lines().filter(|l| l.ends_with(",FAIL")).map(str::to_string).collect();
        assert_eq!(failing, vec![format!("0,{component},2.000e0,2.000e0,FAIL")]);
    }
    let out = comln(dir.path(), &["grad-check", "--inject-fault", "grad_X"]);
    assert_eq!(out.status.code(), Some(2));
}

fn bench_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn bench_memory_shape() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["bench", "--mode", "memory", "--horizons", "steps=10,T=1,steps=1000", "--out", "mem.csv"];
    let out = comln(dir.path(), &args);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("mem.csv")).unwrap();
    assert!(csv.starts_with("method,t,steps,bytes,rhs_evals,status,wall_time_s\n"));
    let rows = bench_rows(&csv);
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r[5] == "ok"));
    let bytes = |method: &str| -> Vec<f64> {
        rows.iter().filter(|r| r[0] == method).map(|r| r[3].parse().unwrap()).collect()
    };
    for method in ["comln-euler", "comln-dopri5"] {
        let b = bytes(method);
        assert!(b.iter().all(|&x| x == b[0]), "{method}: {b:?}");
    }
    let bptt = bytes("bptt");
    let growth = bptt[2] / bptt[0];
    assert!((80.0..=120.0).contains(&growth), "growth {growth}");

    let again = comln(dir.path(), &args);
    assert!(again.status.success());
    assert_eq!(without_timing(&csv), without_timing(&fs::read_to_string(dir.path().join("mem.csv")).unwrap()));
}

#[test]
fn bench_runtime_counts_solver_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = comln(dir.path(), &["bench", "--mode", "runtime", "--repeats", "1", "--horizons", "T=1,T=10"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = bench_rows(&stdout(&out));
    let evals = |method: &str, steps: &str| -> u64 {
        rows.iter().find(|r| r[0] == method && r[2] == steps).unwrap()[4].parse().unwrap()
    };
    assert_eq!(evals("comln-euler", "1000"), 1000);
    assert!(evals("comln-dopri5", "1000") <= evals("comln-euler", "1000"));
    assert!(evals("comln-dopri5", "100") <= evals("comln-euler", "100"));
}

#[test]
fn bench_marks_rows_over_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = comln(dir.path(), &["bench", "--horizons", "steps=10,steps=1000", "--budget-bytes", "100000"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = bench_rows(&stdout(&out));
    let bptt: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == "bptt").collect();
    assert_eq!(bptt[0][5], "ok");
    assert!(bptt[1][5].starts_with("over-budget"));
    assert!(bptt[1][3].is_empty());
}

#[test]
fn bench_rejects_malformed_horizons() {
    let dir = tempfile::tempdir().unwrap();
    let out = comln(dir.path(), &["bench", "--horizons", "K=10"]);
    assert_eq!(out.status.code(), Some(2));
}

fn ratio(text: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with("ratio:")).expect("ratio line");
    line["ratio:".len()..].trim().parse().unwrap()
}

#[test]
fn adjoint_demo_defaults_show_instability() {
    let dir = tempfile::tempdir().unwrap();
    let out = comln(dir.path(), &["adjoint-demo"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(ratio(&stdout(&out)) >= 1e3);

    let csv = fs::read_to_string(dir.path().join("adjoint_trajectories.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("trajectory,t,w0,w1"));
    let block = |name: &str| -> Vec<String> {
        csv.lines().filter(|l| l.starts_with(&format!("{name},"))).map(|l| l.split(',').nth(1).unwrap().to_string()).collect()
    };
    let (fwd, bwd) = (block("forward"), block("backward"));
    assert!(fwd.len() > 1);
    assert_eq!(fwd, bwd);
    assert_eq!(fwd.len() * 2 + 1, csv.lines().count());
}

#[test]
fn adjoint_demo_tiny_horizon_has_no_amplification() {
    let dir = tempfile::tempdir().unwrap();
    let out = comln(dir.path(), &["adjoint-demo", "--T", "1e-6", "--out", "tiny.csv"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let r = ratio(&stdout(&out));
    assert!((1e-2..=1e2).contains(&r), "ratio {r}");
    assert!(dir.path().join("tiny.csv").exists());
}

#[test]
fn gen_tasks_round_trips_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.ep", "b.ep"] {
        let out = comln(dir.path(), &["gen-tasks", "--out", name, "--count", "4", "--set", "tasks.seed=9"]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).contains("4 episodes"));
    }
    let a = fs::read(dir.path().join("a.ep")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.ep")).unwrap());
    let cfg = TaskGenConfig { seed: 9, ..TaskGenConfig::default() };
    let expected: Vec<_> = (0..4).map(|i| sample_episode(&cfg, i)).collect();
    assert_eq!(load_all(dir.path().join("a.ep")).unwrap(), expected);
}

#[test]
fn gen_tasks_count_zero_is_a_valid_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = comln(dir.path(), &["gen-tasks", "--out", "empty.ep", "--count", "0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(load_all(dir.path().join("empty.ep")).unwrap().is_empty());
}

#[test]
fn trains_on_an_episode_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = comln(dir.path(), &["gen-tasks", "--out", "t.ep", "--count", "8"]);
    assert!(out.status.success());
    let out = comln(dir.path(), &["train", "--iterations", "2", "--out", "run", "--set", "episodes=\"t.ep\""]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap().lines().count(), 3);
}

#[test]
fn shipped_config_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    let out = comln(dir.path(), &["train", "--config", config, "--iterations", "0", "--set", "eval.episodes=2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let resolved = fs::read_to_string(dir.path().join("run/config.toml")).unwrap();
    assert!(resolved.contains("noise_std = 0.6"));
}
