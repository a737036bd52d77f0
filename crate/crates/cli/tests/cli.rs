use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn usp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usp"))
        .args(args)
        .output()
        .expect("run usp")
}

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "{e}\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SIM: &[&str] = &[
    "simulate", "--seqlen", "64", "--heads", "8", "--kv-heads", "8", "--head-size", "16",
    "--ulysses", "4", "--ring", "2", "--causal", "--check",
];

fn collective<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["results"]["collectives"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["collective"] == name)
        .unwrap()
}

#[test]
fn simulate_check_passes() {
    let mut args = SIM.to_vec();
    args.push("--json");
    let out = usp(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&out);
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["exit_status"], 0);
    assert_eq!(r["results"]["check"]["passed"], true);
    assert!(r["results"]["check"]["output"]["max_abs"].as_f64().unwrap() <= 1e-10);
    assert_eq!(collective(&r, "all_to_all")["calls_per_rank"], 8);
    assert_eq!(r["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn simulate_is_deterministic() {
    let mut args = SIM.to_vec();
    args.extend(["--json", "--seed", "11"]);
    let a = usp(&args);
    let b = usp(&args);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn simulate_rejects_ulysses_above_kv_heads() {
    let out = usp(&[
        "simulate", "--seqlen", "64", "--heads", "16", "--kv-heads", "8", "--head-size", "4",
        "--ulysses", "16",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cannot exceed the number of attention heads"));
}

#[test]
fn simulate_single_rank_moves_nothing() {
    let out = usp(&[
        "simulate", "--seqlen", "16", "--heads", "4", "--head-size", "8", "--ulysses", "1",
        "--ring", "1", "--json",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["results"]["total_bytes"], 0.0);
}

#[test]
fn simulate_tolerance_failure_exits_one() {
    let mut args = SIM.to_vec();
    args.extend(["--tolerance", "1e-300", "--json"]);
    let out = usp(&args);
    assert_eq!(out.status.code(), Some(1));
    let r = json(&out);
    assert_eq!(r["exit_status"], 1);
    assert_eq!(r["results"]["check"]["passed"], false);
}

#[test]
fn simulate_writes_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.csv");
    let mut args = SIM.to_vec();
    args.extend(["--ledger-out", path.to_str().unwrap()]);
    let out = usp(&args);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(&path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,collective,group,rank,bytes"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.iter().filter(|l| l.contains("all_to_all")).count(), 64);
}

#[test]
fn balance_counts() {
    let out = usp(&["balance", "--seqlen", "16", "--ring", "4", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let r = json(&out);
    assert_eq!(r["results"]["zigzag"]["pairs"], serde_json::json!([34, 34, 34, 34]));
    assert_eq!(r["results"]["contiguous"]["pairs"], serde_json::json!([10, 26, 42, 58]));
    let text = usp(&["balance", "--seqlen", "16", "--ring", "4"]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("chunks 0 and 7"));
}

#[test]
fn balance_rejects_bad_split() {
    let out = usp(&["balance", "--seqlen", "10", "--ring", "4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plan_lists_ulysses_8_ring_2() {
    let out = usp(&[
        "plan",
        "--model",
        &config("model_llama8b.json"),
        "--cluster",
        &config("cluster_2x8.json"),
        "--options",
        &config("plan_sp_only.json"),
        "--top",
        "3",
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&out);
    let plans = r["results"]["plans"].as_array().unwrap();
    assert!(plans.len() <= 3);
    assert!(plans
        .iter()
        .any(|p| p["strategy"]["ulysses"] == 8 && p["strategy"]["ring"] == 2));
    assert!(plans.iter().all(|p| p["verdict"]["status"] == "ok"));
    assert!(r["results"]["rejections"]["head-limit"].as_u64().unwrap() > 0);
}

#[test]
fn cost_single_device_is_unsharded() {
    let out = usp(&[
        "cost",
        "--model",
        &config("model_llama8b.json"),
        "--cluster",
        &config("cluster_1gpu.json"),
        "--table",
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&out);
    let mem = &r["results"]["cost"]["memory"];
    assert_eq!(mem["params_bytes"], mem["unsharded_params_bytes"]);
    assert_eq!(r["results"]["cost"]["comm"]["param_bytes"], 0.0);
    let rows = r["results"]["table"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 9);
    for row in rows {
        assert_eq!(row["memory"]["params_bytes"], mem["params_bytes"]);
    }
}

#[test]
fn cost_text_output() {
    let out = usp(&[
        "cost",
        "--model",
        &config("model_llama8b.json"),
        "--ulysses",
        "8",
        "--ring",
        "2",
        "--zero",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("P2P+8*all2all"));
    assert!(text.contains("tp(1) < ulysses(8) < ring(2) < dp(1) < pp(1)"));
}

#[test]
fn malformed_config_reports_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("model.json");
    std::fs::write(
        &bad,
        r#"{"seq_len": 1024, "hidden": "wide", "heads": 8, "kv_heads": 8, "batch": 1, "layers": 2}"#,
    )
    .unwrap();
    let out = usp(&["cost", "--model", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("at `hidden`"), "{err}");

    std::fs::write(
        &bad,
        r#"{"seq_len": 1024, "hidden": 64, "heads": 8, "kv_heads": 8, "batch": 1, "layers": 2, "bogus": 1}"#,
    )
    .unwrap();
    let out = usp(&["cost", "--model", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"));

    std::fs::write(&bad, "{ not json").unwrap();
    let out = usp(&["cost", "--model", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = usp(&["cost", "--model", "/nonexistent/model.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_model_values_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("model.json");
    std::fs::write(
        &bad,
        r#"{"seq_len": 1024, "hidden": 64, "heads": 8, "kv_heads": 3, "batch": 1, "layers": 2}"#,
    )
    .unwrap();
    let out = usp(&["cost", "--model", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("kv_heads"));
}
