use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn spgptd(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spgptd"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_owned)
        .collect()
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error record on stderr");
    serde_json::from_str(line).expect("error record is JSON")
}

#[test]
fn default_validate_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = spgptd(&["validate"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("validate.json"));
    assert_eq!(report["pass"], true);
    let suites = report["suites"].as_array().unwrap();
    assert_eq!(suites.len(), 5);
    for s in suites {
        assert!(s["max_error"].as_f64().unwrap() <= s["tolerance"].as_f64().unwrap());
    }
    let equivalence = suites.iter().find(|s| s["suite"] == "oracle-equivalence").unwrap();
    assert!(equivalence["max_error"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn zero_noise_variance_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"run": {"noise_var": 0.0}}"#).unwrap();
    let out = spgptd(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"]["kind"], "config");
    assert!(rec["error"]["message"].as_str().unwrap().contains("noise_var"));

    let out = spgptd(&["posterior", "--noise-var", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tampered_tolerance_fails_and_reports_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = spgptd(
        &["validate", "--tolerance", "1e-20", "--lemma-cases", "20", "--equivalence-cases", "5"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "suite");
    let report = json(&dir.path().join("validate.json"));
    assert_eq!(report["pass"], false);
    let lemma = &report["suites"][0];
    assert_eq!(lemma["pass"], false);
    assert!(lemma["max_error"].as_f64().unwrap() > 1e-20);
}

#[test]
fn bench_smoke_run_and_repeatable_spot_checks() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["bench", "--steps", "10", "--spot-check-every", "5", "--repeats", "1", "--seed", "4"];
    for dir in [&a, &b] {
        let out = spgptd(&args, dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let rows = data_rows(&a.path().join("bench.csv"));
    assert_eq!(rows.len(), 10);
    assert!(rows[0].starts_with("1,"));
    let spots = |d: &Path| json(&d.join("bench.json"))["spot_checks"].clone();
    let first = spots(a.path());
    assert_eq!(first.as_array().unwrap().len(), 2);
    assert_eq!(first, spots(b.path()));
}

#[test]
fn posterior_single_point_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = spgptd(&["posterior", "--grid", "1", "--transitions", "20", "--budget", "50"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&dir.path().join("posterior.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].split(',').count(), 7);
}

#[test]
fn posterior_rejects_zero_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let out = spgptd(&["posterior", "--transitions", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn posterior_default_refines_towards_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = spgptd(&["posterior"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("posterior.json"));
    let (random, refined) = (report["random_rmse"].as_f64().unwrap(), report["refined_rmse"].as_f64().unwrap());
    assert!(refined <= random, "refined {refined} random {random}");
    assert_eq!(data_rows(&dir.path().join("posterior.csv")).len(), 50);
}

#[test]
fn chain_run_tracks_dynamic_programming() {
    let dir = tempfile::tempdir().unwrap();
    let out = spgptd(&["run"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&dir.path().join("values.csv"));
    assert_eq!(rows.len(), 10);
    let worst = rows
        .iter()
        .filter_map(|r| r.split(',').nth(5).and_then(|e| e.parse::<f64>().ok()))
        .fold(0.0, f64::max);
    assert!(worst <= 0.1, "dp error {worst}");
    assert!(dir.path().join("state.json").exists());
    assert_eq!(json(&dir.path().join("episodes.json"))["episodes"], 20);
}

#[test]
fn run_is_deterministic_given_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        assert_eq!(spgptd(&["run", "--seed", "9", "--epsilon", "0.3"], dir.path()).status.code(), Some(0));
    }
    for f in ["values.csv", "episodes.csv"] {
        assert_eq!(
            fs::read_to_string(a.path().join(f)).unwrap(),
            fs::read_to_string(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn single_episode_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = spgptd(&["run", "--episodes", "1", "--estimator", "batch"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar = json(&dir.path().join("episodes.json"));
    assert_eq!(sidecar["episodes"], 1);
    // Always-right walks 0..4, then exits from the last state.
    assert_eq!(sidecar["transitions"], 5);
    assert!(!dir.path().join("state.json").exists());
}

#[test]
fn unknown_names_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"run": {"mdp": {"kind": "gridworld"}}}"#).unwrap();
    let out = spgptd(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"]["kind"], "config");

    assert_eq!(spgptd(&["run", "--estimator", "dense"], dir.path()).status.code(), Some(2));
    assert_eq!(spgptd(&["run", "--bogus-flag", "1"], dir.path()).status.code(), Some(2));
    let missing = dir.path().join("absent.json");
    assert_eq!(spgptd(&["validate", "--config", missing.to_str().unwrap()], dir.path()).status.code(), Some(2));
}

#[test]
fn headers_embed_version_and_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(spgptd(&["run", "--episodes", "2"], dir.path()).status.code(), Some(0));
    let report = json(&dir.path().join("run.json"));
    let hash = report["header"]["config_sha256"].as_str().unwrap().to_owned();
    assert_eq!(hash.len(), 64);
    assert_eq!(report["header"]["version"], env!("CARGO_PKG_VERSION"));
    for f in ["values.csv", "episodes.csv"] {
        let text = fs::read_to_string(dir.path().join(f)).unwrap();
        let header: Vec<&str> = text.lines().take_while(|l| l.starts_with('#')).collect();
        assert!(header.iter().any(|l| l.contains(&hash) && l.contains(env!("CARGO_PKG_VERSION"))), "{f}");
    }
    assert_eq!(json(&dir.path().join("episodes.json"))["episodes"], 2);

    // Flags feed the hash; the output directory does not.
    let other = tempfile::tempdir().unwrap();
    spgptd(&["run", "--episodes", "2"], other.path());
    assert_eq!(json(&other.path().join("run.json"))["header"]["config_sha256"], hash.as_str());
    spgptd(&["run", "--episodes", "3"], other.path());
    assert_ne!(json(&other.path().join("run.json"))["header"]["config_sha256"], hash.as_str());
}
