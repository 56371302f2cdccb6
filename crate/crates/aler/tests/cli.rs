//! Drives the `aler` binary end to end on small synthetic corpora.

use std::collections::BTreeMap;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use aler_core::CandidatePair;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_aler");

fn aler(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("spawn aler")
}

fn ok(args: &[&str]) -> String {
    let out = aler(args);
    assert!(out.status.success(), "aler {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap(), "--dim", "32", "--seed", "5"];
    if !extra.contains(&"--records") {
        args.extend_from_slice(&["--records", "300"]);
    }
    args.extend_from_slice(extra);
    PathBuf::from(ok(&args).trim())
}

fn stage(manifest: &Path, cmds: &[&str], overrides: &[&str]) {
    for cmd in cmds {
        let mut args = vec![*cmd, "--manifest", manifest.to_str().unwrap()];
        for o in overrides {
            args.extend_from_slice(&["--override", o]);
        }
        ok(&args);
    }
}

/// Manifest overrides that keep a training run small.
const SMALL: &[&str] = &["batch_budget=60", "max_iterations=2", "validation_cap=120"];

fn staged(dir: &Path) -> PathBuf {
    let m = synth(dir, &[]);
    stage(&m, &["ingest", "index", "partition", "train"], SMALL);
    m
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn kv(path: &Path) -> BTreeMap<String, String> {
    aler::commands::read_kv(path).unwrap()
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).skip(1).map(String::from).collect()
}

#[test]
fn pipeline_is_reproducible_and_reports_consistent_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let m = staged(dir.path());
    stage(&m, &["resolve", "eval"], SMALL);
    let art = dir.path().join("artifacts");
    let first = snapshot(&art);
    for name in ["emb_r.bin", "index.hnsw", "chunks.csv", "recall.model", "thresholds.txt", "ledger.csv", "matches.csv", "metrics.json"] {
        assert!(first.contains_key(name), "{name} missing");
    }

    stage(&m, &["ingest", "index", "partition", "train", "resolve", "eval"], SMALL);
    let second = snapshot(&art);
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (name, bytes) in &first {
        assert!(bytes == &second[name], "{name} changed between identical runs");
    }

    let report = kv(&art.join("metrics.txt"));
    let get = |k: &str| report[k].parse::<f64>().unwrap();
    for k in ["precision", "recall", "f1", "blocking_recall"] {
        assert!((0.0..=1.0).contains(&get(k)), "{k}");
    }
    let (p, r) = (get("precision"), get("recall"));
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    assert!((get("f1") - f1).abs() < 1e-12);
    assert!(get("f1") > 0.5, "{report:?}");

    let json: Value = serde_json::from_slice(&first["metrics.json"]).unwrap();
    assert_eq!(json["f1"].as_f64().unwrap(), get("f1"));

    let train_prov = kv(&art.join("train.provenance"));
    let hash = &train_prov["config_hash"];
    assert_eq!(hash.len(), 64);
    for name in ["thresholds.txt", "ledger.csv", "f1_history.csv", "labeled.csv", "matches.csv", "metrics.txt"] {
        let text = String::from_utf8(first[name].clone()).unwrap();
        let head = text.lines().next().unwrap();
        assert!(head.starts_with("# aler ") && head.contains(&format!("config_hash={hash}")) && head.ends_with("seed=5"), "{name}: {head}");
    }

    let ledger = data_rows(&art.join("ledger.csv"));
    let cols: Vec<usize> = ledger[0].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(cols[1] + cols[2] + cols[3], cols[4]);
    assert_eq!(data_rows(&art.join("labeled.csv")).len(), cols[4]);
}

#[test]
fn theta_p_of_one_yields_no_matches() {
    let dir = tempfile::tempdir().unwrap();
    let m = staged(dir.path());
    let out = ok(&["resolve", "--manifest", m.to_str().unwrap(), "--theta-p", "1.0"]);
    assert!(out.trim().ends_with(" 0 matches"), "{out}");
    assert!(data_rows(&dir.path().join("artifacts/matches.csv")).is_empty());

    let out = ok(&["resolve", "--manifest", m.to_str().unwrap(), "--theta-r", "1.0"]);
    assert!(out.contains("0 after stage 1"), "{out}");
    assert_eq!(kv(&dir.path().join("artifacts/resolve.txt"))["lexical_computations"], "0");
}

#[test]
fn strategies_share_a_validation_set() {
    let dir = tempfile::tempdir().unwrap();
    let m = staged(dir.path());
    let art = dir.path().join("artifacts");
    let hybrid = fs::read_to_string(art.join("f1_history.csv")).unwrap();
    let mut args = vec!["train", "--manifest", m.to_str().unwrap(), "--strategy", "random"];
    for o in SMALL {
        args.extend_from_slice(&["--override", o]);
    }
    ok(&args);
    let random = fs::read_to_string(art.join("f1_history.csv")).unwrap();
    assert!(kv(&art.join("run.txt"))["strategy"] == "random");

    let hashes = |t: &str| -> Vec<String> {
        t.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.rsplit(',').next().unwrap().to_string()).collect()
    };
    let (h, r) = (hashes(&hybrid), hashes(&random));
    assert!(!h.is_empty() && !r.is_empty());
    assert!(h.iter().chain(&r).all(|x| x == &h[0]));
    let header = |t: &str| t.lines().nth(1).unwrap().to_string();
    assert_eq!(header(&hybrid), header(&random));
    let hash = |t: &str| t.lines().next().unwrap().to_string();
    assert_ne!(hash(&hybrid), hash(&random));
}

#[test]
fn missing_embeddings_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &[]);
    fs::remove_file(dir.path().join("emb_r.emb")).unwrap();
    let out = aler(&["ingest", "--manifest", m.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("embeddings_r"));
}

#[test]
fn manifest_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &[]);
    let m = m.to_str().unwrap();
    for bad in ["colour=red", "seed=x", "sample_proportion=1.5"] {
        let out = aler(&["ingest", "--manifest", m, "--override", bad]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
        let field = bad.split('=').next().unwrap();
        assert!(String::from_utf8_lossy(&out.stderr).contains(field), "{bad}");
    }
    let out = aler(&["train", "--manifest", m]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest"));
}

#[test]
fn budget_exhaustion_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &[]);
    stage(&m, &["ingest", "index", "partition"], &[]);
    let out = aler(&["train", "--manifest", m.to_str().unwrap(), "--override", "label_cap=20"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let ledger = data_rows(&dir.path().join("artifacts/ledger.csv"));
    let cols: Vec<usize> = ledger[0].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(cols[1] + cols[2] + cols[3], cols[4]);
    assert!(cols[4] <= 20);
}

#[test]
fn partition_samples_a_fifth_of_r() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &["--records", "1000", "--unmatched-fraction", "0"]);
    stage(&m, &["ingest", "partition"], &[]);
    let rows = data_rows(&dir.path().join("artifacts/chunks.csv"));
    assert_eq!(rows.len(), 200);
    let ids: std::collections::BTreeSet<_> = rows.iter().map(|r| r.split(',').next().unwrap().to_string()).collect();
    assert_eq!(ids.len(), 200);
}

#[test]
fn artifact_dir_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &[]);
    let text = fs::read_to_string(&m).unwrap().replace("output_dir = artifacts\n", "");
    let m2 = dir.path().join("env.manifest");
    fs::write(&m2, text).unwrap();
    let target = dir.path().join("elsewhere");
    let out = Command::new(BIN)
        .args(["ingest", "--manifest", m2.to_str().unwrap()])
        .env(aler::commands::ARTIFACT_DIR_ENV, &target)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(target.join("emb_r.bin").exists() && target.join("ingest.provenance").exists());
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn http_oracle_trains_from_labels_posted_over_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &[]);
    stage(&m, &["ingest", "index", "partition"], &[]);
    let truth = aler::io::load_truth(&dir.path().join("truth.csv"), b',').unwrap();
    let addr = format!("127.0.0.1:{}", free_port());

    let mut child = Command::new(BIN)
        .args(["train", "--manifest", m.to_str().unwrap(), "--oracle", "http"])
        .args(["--override", &format!("http_addr={addr}")])
        .args(SMALL.iter().flat_map(|o| ["--override", o]))
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .spawn()
        .unwrap();

    let base = format!("http://{addr}");
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let deadline = Instant::now() + Duration::from_secs(120);
    let mut answered = 0usize;
    let mut saw_status = false;
    let status = loop {
        if let Some(s) = child.try_wait().unwrap() {
            break s;
        }
        assert!(Instant::now() < deadline, "train did not finish");
        let tasks: Option<Value> = agent
            .get(&format!("{base}/api/tasks?limit=50"))
            .call()
            .ok()
            .and_then(|mut r| r.body_mut().read_json().ok());
        let Some(Value::Array(tasks)) = tasks else {
            thread::sleep(Duration::from_millis(50));
            continue;
        };
        if !saw_status {
            let s: Value = agent.get(&format!("{base}/api/status")).call().unwrap().body_mut().read_json().unwrap();
            saw_status = s.get("f1_history").is_some() && s.get("budget").is_some();
        }
        if tasks.is_empty() {
            thread::sleep(Duration::from_millis(20));
        }
        for t in tasks {
            assert!(t["r"].is_array() && t["s"].is_array());
            let pair = CandidatePair::new(t["r_id"].as_str().unwrap(), t["s_id"].as_str().unwrap());
            let label = u8::from(truth.contains(&pair));
            let resp = agent.post(&format!("{base}/api/labels")).send_json(json!({"task_id": t["task_id"], "label": label})).unwrap();
            assert_eq!(resp.status().as_u16(), 200);
            answered += 1;
        }
    };
    assert!(status.success());
    assert!(saw_status);

    let art = dir.path().join("artifacts");
    let labeled = data_rows(&art.join("labeled.csv"));
    assert_eq!(labeled.len(), answered);
    for row in labeled {
        let f: Vec<&str> = row.split(',').collect();
        let y = u8::from(truth.contains(&CandidatePair::new(f[0], f[1])));
        assert_eq!(f[2], y.to_string());
    }
}
