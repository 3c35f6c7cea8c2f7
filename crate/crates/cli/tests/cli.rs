use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[data]\ntrain = 120\ntest = 40\n[train]\nepochs_per_stage = 1\n";

fn cpcomp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpcomp")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Rows of a report table keyed by their first column.
fn row<'a>(table: &'a str, name: &str) -> Vec<&'a str> {
    table.lines().map(|l| l.split('\t').collect::<Vec<_>>()).find(|c| c[0] == name).unwrap_or_else(|| panic!("no row `{name}` in\n{table}"))
}

fn small_config(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
}

#[test]
fn alexnet_analytic_report_matches_published_totals() {
    let dir = tempfile::tempdir().unwrap();
    let o = cpcomp(dir.path(), &["decompose", "--arch", "alexnet", "--analytic-only"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let total = row(&out, "total");
    let weights: f64 = total[4].parse().unwrap();
    let ratio: f64 = total[5].parse().unwrap();
    assert!((weights / 8.7e6 - 1.0).abs() < 0.03, "{weights}");
    assert!((ratio / 6.98 - 1.0).abs() < 0.03, "{ratio}");
    assert_eq!(out.lines().next().unwrap().split('\t').count(), 9);
}

#[test]
fn full_rank_leaves_every_ratio_at_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cpcomp(dir.path(), &["init", "--kind", "toy", "--out", "toy.cpnet"])), 0);
    let o = cpcomp(dir.path(), &["decompose", "--model", "toy.cpnet", "--full-rank", "--out", "same.cpnet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for line in stdout(&o).lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[5], "1.0000", "{line}");
        assert_eq!(cols[8], "1.0000", "{line}");
    }
    assert_eq!(fs::read(dir.path().join("toy.cpnet")).unwrap(), fs::read(dir.path().join("same.cpnet")).unwrap());
}

#[test]
fn missing_model_exits_1_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = cpcomp(dir.path(), &["report", "--model", "nowhere.cpnet"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nowhere.cpnet"), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
}

#[test]
fn corrupted_model_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cpcomp(dir.path(), &["init", "--out", "m.cpnet"])), 0);
    let path = dir.path().join("m.cpnet");
    let mut bytes = fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    fs::write(&path, bytes).unwrap();
    let o = cpcomp(dir.path(), &["report", "--model", "m.cpnet"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn allocate_splits_the_fc_budget() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.tsv"), "group\tlayer\tprobe_accuracy\tloss\trank\nfc\tfc6\t-\t28.59\t-\nfc\tfc7\t-\t21.50\t-\nfc\tfc8\t-\t20.31\t-\n").unwrap();
    let o = cpcomp(dir.path(), &["allocate", "--sensitivity", "s.tsv", "--rank-budget", "fc=900", "--out", "r.txt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "fc6 = 365\nfc7 = 275\nfc8 = 260\n");
    assert_eq!(fs::read_to_string(dir.path().join("r.txt")).unwrap(), stdout(&o));

    let o = cpcomp(dir.path(), &["allocate", "--sensitivity", "s.tsv", "--rank-budget", "fc=2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_fresh_random_model_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cpcomp(dir.path(), &["init", "--out", "m.cpnet", "--seed", "4"])), 0);
    let o = cpcomp(dir.path(), &["verify", "--model", "m.cpnet", "--cases", "60"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 5);
    assert!(out.lines().skip(1).all(|l| l.split('\t').nth(1) == Some("ok")), "{out}");
}

#[test]
fn decompose_with_ranks_writes_a_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cpcomp(dir.path(), &["init", "--kind", "toy", "--out", "toy.cpnet"])), 0);
    fs::write(dir.path().join("r.txt"), "conv2 = 7 # spatial\nfc1 = 8\n").unwrap();
    let o = cpcomp(dir.path(), &["decompose", "--model", "toy.cpnet", "--ranks", "r.txt", "--out", "small.cpnet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = cpcomp(dir.path(), &["report", "--model", "small.cpnet"]);
    assert_eq!(stdout(&report), stdout(&o));
    assert_eq!(row(&stdout(&o), "conv2")[2], "7");
    assert_eq!(row(&stdout(&o), "conv1")[2], "-");
    // fc1 is 192 inputs to 32 outputs.
    assert_eq!(row(&stdout(&o), "fc1")[4], (8 * (192 + 32)).to_string());
}

#[test]
fn rank_budget_without_probe_splits_evenly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cpcomp(dir.path(), &["init", "--kind", "toy", "--out", "toy.cpnet"])), 0);
    let o = cpcomp(dir.path(), &["decompose", "--model", "toy.cpnet", "--rank-budget", "conv=10,fc=7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let ranks: Vec<&str> = ["conv1", "conv2", "fc1", "fc2"].iter().map(|n| row(&out, n)[2]).collect();
    assert_eq!(ranks, ["5", "5", "4", "3"]);
}

#[test]
fn invalid_ranks_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cpcomp(dir.path(), &["init", "--kind", "toy", "--out", "toy.cpnet"])), 0);
    for (name, text) in [("big.txt", "conv1 = 100000\n"), ("zero.txt", "fc1 = 0\n"), ("ghost.txt", "conv9 = 3\n")] {
        fs::write(dir.path().join(name), text).unwrap();
        let o = cpcomp(dir.path(), &["decompose", "--model", "toy.cpnet", "--ranks", name]);
        assert_eq!(code(&o), 2, "{name}: {}", stderr(&o));
    }
    fs::write(dir.path().join("syntax.txt"), "conv1: 3\n").unwrap();
    assert_eq!(code(&cpcomp(dir.path(), &["decompose", "--model", "toy.cpnet", "--ranks", "syntax.txt"])), 1);
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cpcomp(dir.path(), &["--no-such-flag"])), 1);
    assert_eq!(code(&cpcomp(dir.path(), &["verify", "--cases", "many"])), 1);
    assert_eq!(code(&cpcomp(dir.path(), &["decompose", "--model", "a", "--arch", "alexnet", "--analytic-only"])), 1);
    fs::write(dir.path().join("bad.toml"), "[train]\nlearnig_rate = 1\n").unwrap();
    let o = cpcomp(dir.path(), &["--config", "bad.toml", "config"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.toml"));
    assert_eq!(code(&cpcomp(dir.path(), &["--help"])), 0);
}

#[test]
fn config_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let defaults = stdout(&cpcomp(dir.path(), &["config"]));
    assert!(defaults.contains("learning_rate = 0.02"), "{defaults}");
    small_config(dir.path());
    let o = cpcomp(dir.path(), &["--config", "small.toml", "config"]);
    assert!(stdout(&o).contains("epochs_per_stage = 1"));
    assert!(stdout(&o).contains("train = 120"));
    assert!(stdout(&o).contains("batch_size = 16"));
}

#[test]
fn train_is_deterministic_given_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let run = |log: &str| {
        let o = cpcomp(dir.path(), &["--config", "small.toml", "train", "--schedule", "iterative", "--seed", "7", "--log", log]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        stdout(&o)
    };
    let (a, b) = (run("a.jsonl"), run("b.jsonl"));
    assert_eq!(a, b);
    assert_eq!(fs::read(dir.path().join("a.jsonl")).unwrap(), fs::read(dir.path().join("b.jsonl")).unwrap());
    let layers: Vec<&str> = a.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(layers, ["conv1", "conv2", "fc1", "fc2"]);
}

#[test]
fn oneshot_schedule_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    assert_eq!(code(&cpcomp(dir.path(), &["--config", "small.toml", "init", "--kind", "trained", "--out", "t.cpnet"])), 0);
    let o = cpcomp(
        dir.path(),
        &["--config", "small.toml", "train", "--model", "t.cpnet", "--schedule", "oneshot", "--epochs-per-stage", "2", "--out", "c.cpnet"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let last = out.lines().last().unwrap().split('\t').collect::<Vec<_>>();
    assert_eq!((last[1], last[3]), ("*", "8"));
    let report = stdout(&cpcomp(dir.path(), &["report", "--model", "c.cpnet"]));
    assert!(report.lines().skip(1).take(4).all(|l| l.split('\t').nth(2) != Some("-")), "{report}");
}

#[test]
fn divergence_exits_3_and_keeps_the_partial_log() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    assert_eq!(code(&cpcomp(dir.path(), &["--config", "small.toml", "init", "--kind", "trained", "--out", "t.cpnet"])), 0);
    let o = cpcomp(
        dir.path(),
        &["--config", "small.toml", "train", "--model", "t.cpnet", "--learning-rate", "1e100", "--log", "partial.jsonl"],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(dir.path().join("partial.jsonl").exists());
}

#[test]
fn probe_emits_a_sensitivity_table() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    assert_eq!(code(&cpcomp(dir.path(), &["--config", "small.toml", "init", "--kind", "trained", "--out", "t.cpnet"])), 0);
    let o = cpcomp(dir.path(), &["--config", "small.toml", "probe", "--model", "t.cpnet", "--probe-rank", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("# baseline\t"));
    assert_eq!(out.lines().nth(1), Some("group\tlayer\tprobe_accuracy\tloss\trank"));
    assert_eq!(out.lines().count(), 6);
    fs::write(dir.path().join("p.tsv"), &out).unwrap();
    let o = cpcomp(dir.path(), &["allocate", "--sensitivity", "p.tsv", "--rank-budget", "conv=12,fc=9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let total: usize = stdout(&o).lines().map(|l| l.split(" = ").nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 21);

    let o = cpcomp(dir.path(), &["probe", "--model", "t.cpnet", "--probe-rank", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn probe_rejects_models_for_other_inputs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cpcomp(dir.path(), &["init", "--out", "r.cpnet"])), 0);
    let o = cpcomp(dir.path(), &["probe", "--model", "r.cpnet"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("built-in task"), "{}", stderr(&o));
}
