use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use objmem::experiment::{strip_timing, ExperimentConfig};
use objmem::sim::World;
use serde_json::{json, Value};
use tempfile::TempDir;

const SMALL: [&str; 6] = [
    "--set",
    "world.n_objects=6",
    "--set",
    "world.stream_length=400",
    "--set",
    "queries.count=30",
];

fn objmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objmem"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs the small oracle configuration into `dir/run`.
fn small_run(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("run");
    let cfg = config_path();
    let mut args = vec!["run", "-c", path(&cfg), "-o", path(&out)];
    args.extend(SMALL);
    args.extend(extra);
    ok(&objmem(&args));
    out
}

#[test]
fn shipped_config_is_the_default() {
    let text = fs::read_to_string(config_path()).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::default());
}

#[test]
fn generate_is_idempotent_and_audited() {
    let dir = TempDir::new().unwrap();
    let cfg = config_path();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for target in [&a, &b] {
        ok(&objmem(&["generate", "-c", path(&cfg), "--seed", "7", "-o", path(target)]));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let world: World = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    assert!(world.audit().is_empty());
    assert_eq!(world.objects.len(), 20);
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("w.json");
    assert_eq!(objmem(&["generate", "-o", path(&out)]).status.code(), Some(1));
    assert_eq!(
        objmem(&["generate", "-c", "/no/such/config.toml", "-o", path(&out)]).status.code(),
        Some(1)
    );
    let cfg = config_path();
    assert_eq!(
        objmem(&["generate", "-c", path(&cfg), "--set", "world.no_such_key=1", "-o", path(&out)])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(objmem(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(objmem(&["--help"]).status.code(), Some(0));
}

#[test]
fn oracle_run_keeps_one_object_per_instance() {
    let dir = TempDir::new().unwrap();
    let run = small_run(dir.path(), &["--audit-every-step"]);
    let report = read(&run.join("report.json"));
    assert_eq!(report["population"]["final_objects"], report["gt_objects"]);
    assert_eq!(report["gt_objects"], 6);
    let steps = fs::read_to_string(run.join("steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 400);
}

#[test]
fn budgeted_run_stays_under_cap() {
    let dir = TempDir::new().unwrap();
    let run = small_run(dir.path(), &["--set", "budget_cap=60000000", "--set", "dump_format=\"binary\""]);
    let report = read(&run.join("report.json"));
    let size = report["population"]["final_size_bytes"].as_u64().unwrap();
    let warned = report["population"]["over_budget_warning"].as_bool().unwrap();
    assert!(size <= 60_000_000 || warned);
    assert!(fs::read(run.join("memory.bin")).unwrap().starts_with(b"OBJMEM"));
}

#[test]
fn rerun_gives_same_digest() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let ra = read(&small_run(a.path(), &[]).join("report.json"));
    let rb = read(&small_run(b.path(), &[]).join("report.json"));
    assert_eq!(ra["digest"], rb["digest"]);
}

#[test]
fn query_answers_from_dump_alone() {
    let dir = TempDir::new().unwrap();
    let run = small_run(dir.path(), &[]);
    let memory = run.join("memory.json");
    let queries = run.join("queries.json");
    let results = dir.path().join("results.json");
    ok(&objmem(&["query", "-m", path(&memory), "-q", path(&queries), "-o", path(&results)]));

    let answers = read(&results);
    let gt = read(&queries);
    let answers = answers.as_array().unwrap();
    assert_eq!(answers.len(), 30);
    for (a, q) in answers.iter().zip(gt.as_array().unwrap()) {
        assert_eq!(a["query_id"], q["query_id"]);
        assert_eq!(a["result"]["track"], q["ground_truth"]);
    }

    let again = dir.path().join("again.json");
    ok(&objmem(&["query", "-m", path(&memory), "-q", path(&queries), "-o", path(&again)]));
    let (mut x, mut y) = (read(&results), read(&again));
    strip_timing(&mut x);
    strip_timing(&mut y);
    assert_eq!(x, y);

    let empty = dir.path().join("empty.json");
    fs::write(&empty, "[]").unwrap();
    ok(&objmem(&["query", "-m", path(&memory), "-q", path(&empty), "-o", path(&results)]));
    assert_eq!(read(&results), json!([]));
}

#[test]
fn tampered_dump_fails_audit() {
    let dir = TempDir::new().unwrap();
    let run = small_run(dir.path(), &[]);
    let memory = run.join("memory.json");
    let mut dump = read(&memory);
    dump["frames"][0]["refcount"] = json!(99);
    fs::write(&memory, dump.to_string()).unwrap();
    let results = dir.path().join("r.json");
    let out = objmem(&["query", "-m", path(&memory), "-q", path(&run.join("queries.json")), "-o", path(&results)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

fn evaluate(dir: &Path, results: &Value, gt: &Value) -> Value {
    let (r, g) = (dir.join("r.json"), dir.join("g.json"));
    fs::write(&r, results.to_string()).unwrap();
    fs::write(&g, gt.to_string()).unwrap();
    let out = objmem(&["evaluate", "--results", path(&r), "--ground-truth", path(&g)]);
    ok(&out);
    serde_json::from_slice(&out.stdout).unwrap()
}

fn track(start: u64, len: usize) -> Value {
    let entries: Vec<Value> = (0..len as u64)
        .map(|k| json!({"t": start + k, "bbox": {"x": 0.0, "y": 0.0, "w": 10.0, "h": 10.0}}))
        .collect();
    Value::Array(entries)
}

fn gt_query(id: u64, start: u64) -> Value {
    json!({"query_id": id, "object_gt": id, "query_t": 500, "features": [1.0], "ground_truth": track(start, 10)})
}

fn answer(id: u64, start: u64, score: f64) -> Value {
    json!({"query_id": id, "result": {
        "matched": 0, "score": score, "track": track(start, 10), "similarity_ops": 1,
        "timing": {"elapsed_s": 0.0}}})
}

#[test]
fn evaluate_scores_results_files() {
    let dir = TempDir::new().unwrap();
    let gt = json!([gt_query(0, 0), gt_query(1, 100), gt_query(2, 200)]);

    let perfect = json!([answer(0, 0, 0.9), answer(1, 100, 0.8), answer(2, 200, 0.7)]);
    let report = evaluate(dir.path(), &perfect, &gt);
    assert_eq!((report["success"].as_f64(), report["t_ap25"].as_f64()), (Some(100.0), Some(100.0)));

    let report = evaluate(dir.path(), &json!([]), &gt);
    assert_eq!(report["success"].as_f64(), Some(0.0));

    // 0.9 hit, 0.8 miss, 0.7 hit.
    let mixed = json!([answer(0, 0, 0.9), answer(1, 300, 0.8), answer(2, 200, 0.7)]);
    let report = evaluate(dir.path(), &mixed, &gt);
    let expected = (1.0 + 2.0 / 3.0) / 3.0 * 100.0;
    assert!((report["t_ap25"].as_f64().unwrap() - expected).abs() < 1e-9);
    assert!((report["st_ap25"].as_f64().unwrap() - expected).abs() < 1e-9);
}

#[test]
fn curve_mode_writes_four_points_and_charts() {
    let dir = TempDir::new().unwrap();
    let cfg = config_path();
    let plots = dir.path().join("plots");
    let mut args = vec!["evaluate", "--curve", "-c", path(&cfg), "--plots", path(&plots)];
    args.extend(SMALL);
    let out = objmem(&args);
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let points = report["points"].as_array().unwrap();
    assert_eq!(points.len(), 4);
    assert!(points.iter().all(|p| p["metrics"]["success"].as_f64() == Some(100.0)));
    for chart in ["success", "size", "time"] {
        assert!(fs::read_to_string(plots.join(format!("{chart}.svg"))).unwrap().starts_with("<svg"));
    }
}

#[test]
fn budget_sweep_table_respects_caps() {
    let dir = TempDir::new().unwrap();
    let cfg = config_path();
    let table = dir.path().join("t.json");
    let mut args = vec![
        "sweep", "-c", path(&cfg), "--axis", "budget-cap", "--values", "20MB,40MB,60MB,80MB", "--format", "json",
        "-o", path(&table),
    ];
    args.extend(SMALL);
    ok(&objmem(&args));
    let rows = read(&table);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for (row, cap) in rows.iter().zip([20e6, 40e6, 60e6, 80e6]) {
        let peak = row["peak_size_bytes"].as_f64().unwrap();
        assert!(peak <= cap || row["over_budget_warning"].as_bool().unwrap());
    }
}

#[test]
fn single_value_sweep_matches_run() {
    let dir = TempDir::new().unwrap();
    let cfg = config_path();
    let run = read(&small_run(dir.path(), &[]).join("report.json"));
    let table = dir.path().join("t.csv");
    let mut args = vec!["sweep", "-c", path(&cfg), "--axis", "seed", "--values", "0", "-o", path(&table)];
    args.extend(SMALL);
    ok(&objmem(&args));
    let csv = fs::read_to_string(&table).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(lines.next().is_none());
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("digest"), run["digest"].as_str().unwrap());
    assert_eq!(col("success").parse::<f64>().unwrap(), run["metrics"]["success"].as_f64().unwrap());
}
