use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cpokit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpokit"))
        .args(args)
        .env("CPOKIT_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Chain config shortened to `iterations` updates.
fn short_chain(dir: &Path, iterations: usize, oracle: bool) -> PathBuf {
    let text = fs::read_to_string(repo_config("chain.json")).unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    cfg["iterations"] = iterations.into();
    cfg["oracle"] = oracle.into();
    cfg["batch_steps"] = 600.into();
    let path = dir.join("chain.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

fn data_rows(path: &Path) -> Vec<csv::StringRecord> {
    let text = fs::read_to_string(path).unwrap();
    let body: String = text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    csv::Reader::from_reader(body.as_bytes())
        .records()
        .collect::<Result<_, _>>()
        .unwrap()
}

fn column(path: &Path, name: &str) -> usize {
    let text = fs::read_to_string(path).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    header.split(',').position(|c| c == name).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_one_row_per_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_chain(tmp.path(), 7, true);
    let out = tmp.path().join("run");
    let o = cpokit(&["train", "--config", path_str(&cfg), "--out", path_str(&out), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_rows(&out.join("run.csv")).len(), 7);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 3);
    assert_eq!(summary["iterations"], 7);
}

#[test]
fn sampled_reruns_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_chain(tmp.path(), 4, false);
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = cpokit(&["train", "--config", path_str(&cfg), "--out", path_str(&out), "--algo", "cpo"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        csvs.push(fs::read(out.join("run.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn seed_sweep_aggregate_matches_run_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_chain(tmp.path(), 5, false);
    let out = tmp.path().join("sweep");
    let o = cpokit(&[
        "train",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
        "--seed",
        "1..5",
        "--jobs",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let finals: Vec<f64> = (1..=5)
        .map(|s| {
            let csv = out.join(format!("seed_{s}/run.csv"));
            let jc = column(&csv, "jc");
            data_rows(&csv).last().unwrap()[jc].parse().unwrap()
        })
        .collect();
    let mean = finals.iter().sum::<f64>() / 5.0;
    let std = (finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    let agg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    let got_mean = agg["final_jc"]["mean"].as_f64().unwrap();
    let got_std = agg["final_jc"]["std"].as_f64().unwrap();
    assert!((got_mean - mean).abs() <= 1e-12 * mean.abs().max(1.0), "{got_mean} vs {mean}");
    assert!((got_std - std).abs() <= 1e-12 * std.max(1.0), "{got_std} vs {std}");
    assert_eq!(agg["seeds"].as_array().unwrap().len(), 5);
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_chain(tmp.path(), 2, true);
    let out = tmp.path().join("x");
    let o = cpokit(&["train", "--config", path_str(&cfg), "--out", path_str(&out), "--algo", "ppo"]);
    assert_eq!(o.status.code(), Some(2));
    let missing = tmp.path().join("missing.json");
    let o = cpokit(&["train", "--config", path_str(&missing), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(tmp.path().join("bad.json"), r#"{"algorithm": "cpo", "typo_field": 1}"#).unwrap();
    let o = cpokit(&["train", "--config", path_str(&tmp.path().join("bad.json")), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = cpokit(&["verify", "--suite", "nonexistent"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_chain(tmp.path(), 2, true);
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let o = cpokit(&["train", "--config", path_str(&cfg), "--out", path_str(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn verify_prints_table_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cpokit(&["verify", "--suite", "cg", "--out", path_str(tmp.path())]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("[pass]"), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report[0]["suite"], "cg");
}

#[test]
fn shipped_configs_parse() {
    for name in ["chain.json", "point_circle.json"] {
        let tmp = tempfile::tempdir().unwrap();
        let text = fs::read_to_string(repo_config(name)).unwrap();
        let mut cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
        cfg["iterations"] = 1.into();
        cfg["batch_steps"] = 500.into();
        let path = tmp.path().join(name);
        fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let o = cpokit(&["train", "--config", path_str(&path), "--out", path_str(&tmp.path().join("o"))]);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
