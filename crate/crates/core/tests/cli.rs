use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ppcc(args: &[&str]) -> Output {
    ppcc_env(args, &[])
}

fn ppcc_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ppcc"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn step_by_step_matches_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (ds, graph, beliefs, stats, report, ranks) = (
        t.join("ds"),
        t.join("graph.bin"),
        t.join("beliefs.bin"),
        t.join("stats.jsonl"),
        t.join("report.json"),
        t.join("ranks.csv"),
    );
    ok(&ppcc(&["synth", "--preset", "hard", "--seed", "7", "--out", p(&ds)]));
    ok(&ppcc(&["build-graph", "--dataset", p(&ds), "--knn", "20", "--floor", "0.0", "--fusion", "0.8,0.2", "--out", p(&graph)]));
    ok(&ppcc(&[
        "propagate", "--graph", p(&graph), "--mode", "ppcc", "--temperature", "0.1", "--topk", "1", "--schedule", "step",
        "--max-iters", "8", "--order", "seq", "--out", p(&beliefs), "--stats", p(&stats),
    ]));
    ok(&ppcc(&[
        "evaluate", "--beliefs", p(&beliefs), "--dataset", p(&ds), "--setting", "across", "--out", p(&report),
        "--dump-rankings", p(&ranks),
    ]));
    let run_dir = t.join("run");
    let stdout = ok(&ppcc(&["run", "--preset", "hard", "--seed", "7", "--method", "ppcc-vt", "--out", p(&run_dir)]));
    assert!(stdout.contains("ppcc-vt across: mAP"), "{stdout}");

    assert_eq!(fs::read(&report).unwrap(), fs::read(run_dir.join("report.json")).unwrap());
    assert_eq!(fs::read(&beliefs).unwrap(), fs::read(run_dir.join("beliefs.bin")).unwrap());
    assert_eq!(fs::read(&graph).unwrap(), fs::read(run_dir.join("graph.bin")).unwrap());
    assert!(fs::read_to_string(&ranks).unwrap().starts_with("query,rank,tracklet,score,relevant"));
    assert!(!fs::read_to_string(&stats).unwrap().is_empty());
}

#[test]
fn evaluate_prints_report_without_out() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    ok(&ppcc(&["run", "--preset", "easy", "--seed", "2", "--out", p(&run_dir)]));
    let stdout = ok(&ppcc(&[
        "evaluate", "--beliefs", p(&run_dir.join("beliefs.bin")), "--dataset", p(&run_dir.join("dataset")),
        "--setting", "in", "--rk-include-others",
    ]));
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["setting"], "in");
    assert_eq!(v["map"], 1.0);
}

#[test]
fn synth_seed_and_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = t.join("synth.json");
    fs::write(&cfg, r#"{"num_classes": 3, "num_tracklets": 12, "face_dim": 8, "body_dim": 8}"#).unwrap();
    for (name, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        ok(&ppcc(&["synth", "--config", p(&cfg), "--seed", seed, "--out", p(&t.join(name))]));
    }
    let face = |n: &str| fs::read(t.join(n).join("face.f32")).unwrap();
    assert_eq!(face("a"), face("b"));
    assert_ne!(face("a"), face("c"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(t.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["num_classes"], 3);
    assert_eq!(manifest["num_tracklets"], 12);
}

#[test]
fn ablate_prints_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&ppcc(&[
        "ablate", "--preset", "hard", "--seed", "7", "--axis", "schedule", "--values", "none,threshold,step", "--out",
        p(tmp.path()),
    ]));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "schedule,mAP,R@1,R@3,R@5");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("step,"));
    assert!(tmp.path().join("ablation_schedule.csv").exists());
}

#[test]
fn config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = p(tmp.path());
    for args in [
        vec!["run", "--preset", "easy", "--schedule", "sometimes", "--out", out],
        vec!["run", "--preset", "easy", "--temperature", "0", "--out", out],
        vec!["build-graph", "--dataset", out, "--knn", "0", "--out", out],
        vec!["build-graph", "--dataset", out, "--fusion", "0.5,0.2", "--out", out],
        vec!["ablate", "--preset", "easy", "--axis", "topk", "--values", "x", "--out", out],
        vec!["frobnicate"],
    ] {
        let o = ppcc(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = ppcc_env(&["run", "--preset", "easy", "--out", out], &[("PPCC_THREADS", "many")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn step_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let o = ppcc(&["build-graph", "--dataset", p(&missing), "--out", p(&tmp.path().join("g.bin"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing file"));

    let junk = tmp.path().join("junk.bin");
    fs::write(&junk, b"garbage").unwrap();
    let o = ppcc(&["propagate", "--graph", p(&junk), "--out", p(&tmp.path().join("b.bin"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = |d: &Path| {
        vec!["run".to_string(), "--preset".into(), "noisy".into(), "--order".into(), "sync".into(), "--out".into(), p(d).into()]
    };
    let run = |d: &Path, threads: &str| {
        let owned = args(d);
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        ok(&ppcc_env(&refs, &[("PPCC_THREADS", threads)]));
    };
    run(&a, "1");
    run(&b, "3");
    assert_eq!(fs::read(a.join("beliefs.bin")).unwrap(), fs::read(b.join("beliefs.bin")).unwrap());
}
