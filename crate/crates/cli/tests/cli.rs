use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stochtree"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn records(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["quantize"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["plan-trees", "--g", "1.5", "--delta", "0.95"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn quantize_writes_an_enveloped_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["quantize", "--b", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = records(&dir.path().join("quantizer.jsonl"));
    assert_eq!(recs.len(), 1);
    let r = &recs[0];
    assert_eq!(r["schemaVersion"], 1);
    assert_eq!(r["command"], "quantize");
    assert!(r.get("seed").is_some());
    assert_eq!(r["kind"], "quantizer");
    let pts = r["data"]["points"].as_array().unwrap();
    assert!((pts[1].as_f64().unwrap() - 0.79788).abs() < 1e-4);
}

#[test]
fn plan_trees_reports_the_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["plan-trees", "--g", "0.01", "--delta", "0.95"]);
    assert!(o.status.success());
    let recs = records(&dir.path().join("plan.jsonl"));
    assert_eq!(recs[0]["kind"], "plan");
}

#[test]
fn solve_learn_simulate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(d, &["solve", "--problem", "assembly", "--b", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sol = records(&d.join("solution.jsonl"));
    let v = sol[0]["data"]["objective"].as_f64().unwrap();
    assert!((v + 397.80).abs() <= 1.0, "{v}");

    let sol_path = d.join("solution.jsonl");
    let o = run(d, &["learn", "--solution", sol_path.to_str().unwrap(), "--theta", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pol = d.join("policies.jsonl");
    let o = run(
        d,
        &["simulate", "--problem", "assembly", "--policy", pol.to_str().unwrap(), "--n", "50"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(d.join("reports.jsonl")).unwrap();
    assert_eq!(text.matches("\"problem\":").count(), 1);
    let reps = records(&d.join("reports.jsonl"));
    assert_eq!(reps[0]["kind"], "report");
    assert_eq!(reps[0]["data"]["problem"], "assembly");
    assert_eq!(reps[0]["data"]["values"].as_array().unwrap().len(), 50);
    assert!(reps[0]["data"]["mean"].as_f64().unwrap().is_finite());
}

#[test]
fn bang_bang_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(d, &["simulate", "--problem", "swing", "--eta", "2", "--bang-bang", "--n", "2000"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reps = records(&d.join("reports.jsonl"));
    let v = reps[0]["data"]["mean"].as_f64().unwrap();
    assert!((v + 0.40).abs() < 0.05, "{v}");
}

#[test]
fn pipeline_on_one_small_tree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(
        d,
        &[
            "pipeline",
            "--problem",
            "assembly",
            "--b",
            "3",
            "--trees",
            "1",
            "--theta",
            "1",
            "--validation-n",
            "50",
            "--test-n",
            "50",
            "--seed",
            "7",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = d.join("run-7");
    for f in [
        "config.jsonl",
        "trees/tree-000.jsonl",
        "reports/validation.jsonl",
        "policies/winner.jsonl",
        "reports/test.jsonl",
        "summary.jsonl",
    ] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let s = records(&run_dir.join("summary.jsonl"));
    assert_eq!(s[0]["seed"], 7);
    let v = s[0]["data"]["trees"][0]["objective"].as_f64().unwrap();
    assert!((v + 397.80).abs() <= 1.0, "{v}");
}

#[test]
fn pipeline_without_trees_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["pipeline", "--b", "3", "--trees", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn plot_writes_chart_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let csv = d.join("series.csv");
    fs::write(&csv, "series,x,y\nb,3,-397.658\nb,5,-383.222\n").unwrap();
    let o = run(d, &["plot", csv.to_str().unwrap(), "--name", "fig"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(d.join("fig.csv")).unwrap(), fs::read_to_string(&csv).unwrap());
    assert!(fs::read_to_string(d.join("fig.svg")).unwrap().contains("<polyline"));

    let empty = d.join("empty.csv");
    fs::write(&empty, "series,x,y\n").unwrap();
    let o = run(d, &["plot", empty.to_str().unwrap(), "--name", "none"]);
    assert!(!o.status.success());
}
