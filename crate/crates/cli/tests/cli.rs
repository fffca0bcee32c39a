use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn picpq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_picpq")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("picpq-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

const SMALL: &str = r#"{
  "data": {"synthetic": {"train": 200, "test": 60, "seed": 2}},
  "baseline": {"steps": 80, "learning_rate": 0.02},
  "stages": {
    "pruned": {"steps": 20},
    "act_quantized": {"steps": 20},
    "fully_quantized": {"steps": 20}
  },
  "search": {"population_size": 3, "sample_size": 2, "iterations": 1, "scoring_steps": 5},
  "rank": {"batches": 2},
  "budget_ratio": 30
}"#;

#[test]
fn stages_chain_through_files() {
    let dir = scratch("chain");
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let run = dir.join("run");
    ok(&picpq(&["pipeline", "--config", s(&cfg), "--out", s(&run), "--threads", "2"]));
    for name in ["baseline.picw", "fp.json", "ab.json", "history.jsonl", "plan.json", "final.picw", "report.json"] {
        assert!(run.join(name).exists(), "{name}");
    }

    let data = dir.join("data");
    ok(&picpq(&["synth", "--seed", "2", "--out", s(&data)]));
    let (train, test) = (data.join("train.picd"), data.join("test.picd"));
    let weights = run.join("baseline.picw");

    let fp = dir.join("fp.json");
    ok(&picpq(&["rank", "--config", s(&cfg), "--weights", s(&weights), "--data", s(&train), "--out", s(&fp)]));
    let table: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&fp).unwrap()).unwrap();
    assert_eq!(table["1"].as_array().unwrap().len(), 16);

    let search = dir.join("search");
    ok(&picpq(&[
        "search",
        "--config",
        s(&cfg),
        "--weights",
        s(&weights),
        "--data",
        s(&train),
        "--fp",
        s(&fp),
        "--out",
        s(&search),
    ]));
    let ab = search.join("ab.json");

    let plan = dir.join("plan.json");
    ok(&picpq(&["plan", "--fp", s(&fp), "--ab", s(&ab), "--budget-ratio", "12", "--out", s(&plan)]));

    let report = picpq(&["report", "--plan", s(&plan)]);
    ok(&report);
    let report: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert!(report["bops_ratio"].as_f64().unwrap() >= 12.0);

    let tuned = dir.join("tuned");
    ok(&picpq(&[
        "finetune",
        "--config",
        s(&cfg),
        "--weights",
        s(&weights),
        "--data",
        s(&train),
        "--plan",
        s(&plan),
        "--test",
        s(&test),
        "--out",
        s(&tuned),
    ]));
    assert!(tuned.join("report.json").exists());
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn exit_codes() {
    let dir = scratch("codes");
    let fp = dir.join("fp.json");
    let ab = dir.join("ab.json");
    let fp_text = serde_json::json!({
        "1": vec![4.0; 16], "3": vec![4.0; 16], "5": vec![4.0; 32], "7": vec![4.0; 32],
        "sample_count": 96, "tolerance": 1e-6
    });
    std::fs::write(&fp, fp_text.to_string()).unwrap();
    std::fs::write(&ab, r#"{"pairs": [{"layer": 1, "a": 1, "b": 0}, {"layer": 3, "a": 1, "b": 0}, {"layer": 5, "a": 1, "b": 0}, {"layer": 7, "a": 1, "b": 0}]}"#).unwrap();
    let plan = dir.join("plan.json");

    let out = picpq(&["plan", "--fp", s(&fp), "--ab", s(&ab), "--budget-ratio", "100000", "--out", s(&plan)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reachable"));

    let out = picpq(&["plan", "--fp", "/nonexistent/fp.json", "--ab", s(&ab), "--out", s(&plan)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/fp.json"));

    std::fs::write(&ab, "{not json").unwrap();
    let out = picpq(&["plan", "--fp", s(&fp), "--ab", s(&ab), "--out", s(&plan)]);
    assert_eq!(out.status.code(), Some(2));

    let out = picpq(&["plan", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(dir).unwrap();
}
