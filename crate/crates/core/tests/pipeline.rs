use std::fs;
use std::path::Path;

use ppcc::pipeline::{
    ablation_csv, BELIEFS_FILE, CONFIG_FILE, DATASET_DIR, GRAPH_FILE, RANKINGS_FILE, REPORT_FILE, STATS_FILE,
};
use ppcc::{
    evaluate, load_dataset, run_ablation, run_pipeline, AblationAxis, BeliefState, EvalOptions, Error, Method, Preset,
    PropagationGraph, RunConfig,
};

fn cfg(preset: Preset, seed: u64, method: Method, out: &Path) -> RunConfig {
    RunConfig::for_preset(preset, seed, method, out)
}

fn values(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn easy_preset_is_solved_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    for method in [Method::PpccVt, Method::PpccV, Method::FaceMatch] {
        let out = run_pipeline(&cfg(Preset::Easy, 1, method, tmp.path().join(method.name()).as_path())).unwrap();
        assert_eq!(out.report.map, 1.0, "{}", method.name());
    }
}

#[test]
fn every_artifact_reloads_and_reproduces_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cfg(Preset::Hard, 7, Method::PpccVt, tmp.path());
    let out = run_pipeline(&c).unwrap();
    let dir = tmp.path();

    let ds = load_dataset(&dir.join(DATASET_DIR)).unwrap();
    let g = PropagationGraph::load(&dir.join(GRAPH_FILE)).unwrap();
    assert_eq!(g.num_tracklets(), ds.num_tracklets());
    let b = BeliefState::load(&dir.join(BELIEFS_FILE)).unwrap();
    assert_eq!(b, out.beliefs);
    let stats = fs::read_to_string(dir.join(STATS_FILE)).unwrap();
    assert_eq!(stats.lines().count(), out.stats.len());
    for line in stats.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["touched"].is_number() && v["frozen"].is_number() && v["mean_confidence"].is_number());
    }
    let (again, _) = evaluate(&b, &ds, c.setting, EvalOptions::default()).unwrap();
    assert_eq!(again.to_json(), fs::read_to_string(dir.join(REPORT_FILE)).unwrap());
    assert!(fs::read_to_string(dir.join(RANKINGS_FILE)).unwrap().starts_with("query,rank,tracklet,score,relevant\n"));

    let resolved = RunConfig::load(&dir.join(CONFIG_FILE)).unwrap();
    assert_eq!(resolved.preset, None);
    assert_eq!(resolved.synth, c.resolved_synth());
}

#[test]
fn identical_configs_give_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    for method in [Method::PpccVt, Method::PpccV, Method::Lp] {
        let a = tmp.path().join(format!("{}_a", method.name()));
        let b = tmp.path().join(format!("{}_b", method.name()));
        run_pipeline(&cfg(Preset::Noisy, 4, method, &a)).unwrap();
        run_pipeline(&cfg(Preset::Noisy, 4, method, &b)).unwrap();
        for f in [REPORT_FILE, BELIEFS_FILE, GRAPH_FILE, STATS_FILE, RANKINGS_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }
}

#[test]
fn hard_preset_method_sweep_ordering() {
    let tmp = tempfile::tempdir().unwrap();
    let base = cfg(Preset::Hard, 7, Method::PpccVt, tmp.path());
    let rows = run_ablation(&base, AblationAxis::Method, &values(&["face-match", "lp", "ppcc-v", "ppcc-vt"])).unwrap();
    let map = |name: &str| rows.iter().find(|r| r.value == name).unwrap().map;
    assert!(map("ppcc-vt") > map("ppcc-v"));
    assert!(map("ppcc-v") > map("face-match"));
    assert!(map("ppcc-vt") > map("lp"));
    assert!(tmp.path().join("ablation_method.csv").exists());
}

#[test]
fn schedule_sweep_ordering() {
    let tmp = tempfile::tempdir().unwrap();
    let base = cfg(Preset::Hard, 7, Method::PpccVt, tmp.path());
    let rows = run_ablation(&base, AblationAxis::Schedule, &values(&["none", "threshold", "step"])).unwrap();
    assert!(rows[2].map >= rows[1].map && rows[1].map >= rows[0].map, "{rows:?}");
}

#[test]
fn temperature_sweep_is_nonincreasing() {
    let tmp = tempfile::tempdir().unwrap();
    let base = cfg(Preset::Hard, 7, Method::PpccVt, tmp.path());
    let rows = run_ablation(&base, AblationAxis::Temperature, &values(&["0.05", "0.1", "0.5", "1.0"])).unwrap();
    for w in rows.windows(2) {
        assert!(w[0].map >= w[1].map, "{rows:?}");
    }
}

#[test]
fn single_value_sweep_equals_base_run() {
    let tmp = tempfile::tempdir().unwrap();
    let base = cfg(Preset::Hard, 7, Method::PpccVt, &tmp.path().join("base"));
    let direct = run_pipeline(&base).unwrap();
    let rows = run_ablation(&base, AblationAxis::Topk, &values(&["1"])).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].map, direct.report.map);
    assert_eq!(rows[0].r1, direct.report.recall_at(1));
    let csv = fs::read_to_string(tmp.path().join("base").join("ablation_topk.csv")).unwrap();
    assert_eq!(csv, ablation_csv(AblationAxis::Topk, &rows));
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("topk,mAP,R@1,R@3,R@5\n"));
}

#[test]
fn empty_or_bad_sweeps_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let base = cfg(Preset::Easy, 1, Method::PpccVt, tmp.path());
    assert!(matches!(run_ablation(&base, AblationAxis::Topk, &[]), Err(Error::Config(_))));
    assert!(run_ablation(&base, AblationAxis::Temperature, &values(&["hot"])).unwrap_err().is_config());
    assert!(run_ablation(&base, AblationAxis::Temperature, &values(&["0"])).unwrap_err().is_config());
}

#[test]
fn step_failures_name_the_step() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join(DATASET_DIR), b"not a directory").unwrap();
    match run_pipeline(&cfg(Preset::Easy, 1, Method::PpccVt, tmp.path())) {
        Err(Error::Step { step, .. }) => assert_eq!(step, "synth"),
        other => panic!("expected a synth step error, got {:?}", other.map(|o| o.report.map)),
    }
    assert!(!tmp.path().join(REPORT_FILE).exists());
}

#[test]
fn config_file_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = cfg(Preset::Hard, 9, Method::PpccV, tmp.path());
    c.propagation.temperature = 0.2;
    c.graph.knn = 7;
    let path = tmp.path().join("cfg.json");
    fs::write(&path, serde_json::to_string(&c).unwrap()).unwrap();
    let loaded = RunConfig::load(&path).unwrap();
    assert_eq!(loaded.resolved_synth(), c.resolved_synth());
    assert_eq!(loaded.propagation, c.propagation);
    assert_eq!(loaded.graph, c.graph);
    assert_eq!(loaded.method, Method::PpccV);
}

#[test]
fn partial_config_files_fill_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cfg.json");
    fs::write(&path, r#"{"preset": "hard", "method": "lp", "propagation": {"temperature": 0.5}}"#).unwrap();
    let c = RunConfig::load(&path).unwrap();
    assert_eq!(c.preset, Some(Preset::Hard));
    assert_eq!(c.method, Method::Lp);
    assert_eq!(c.propagation.temperature, 0.5);
    assert_eq!(c.propagation.top_k, 1);
    assert_eq!(c.graph.knn, 20);
}
