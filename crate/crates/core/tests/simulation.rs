//! End-to-end simulations: server and clients in one process over a real transport.

use std::path::{Path, PathBuf};

use fedsim_core::model::decode_model;
use fedsim_core::server::{read_marker, Workflow, BEST_MARKER, LATEST_MARKER};
use fedsim_core::sim::{run_simulation, SimConfig, SimError, SimReport, CHECKPOINT_DIR, EVENTS_FILE};
use serde_json::Value;

fn golden(out: &Path) -> SimConfig {
    let text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/golden.json"),
    )
    .unwrap();
    let mut cfg = SimConfig::from_json(&text).unwrap();
    cfg.out_dir = out.to_owned();
    cfg
}

fn small(out: &Path) -> SimConfig {
    let mut cfg = golden(out);
    cfg.rounds = 2;
    cfg.local_baselines = false;
    cfg.selection_metric = None;
    cfg
}

/// The report as JSON with wall-clock fields removed.
fn comparable(report: &SimReport) -> Value {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(map) => {
                map.remove("wall_ms");
                map.values_mut().for_each(strip);
            }
            Value::Array(items) => items.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v = serde_json::to_value(report).unwrap();
    strip(&mut v);
    v
}

fn config_field(err: SimError) -> String {
    match err {
        SimError::Config { field, .. } => field,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn golden_scenario_beats_every_local_model() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_simulation(&golden(dir.path())).unwrap();
    assert!(report.completed(), "{:?}", report.error);
    assert_eq!(report.rounds.len(), 5);
    let fl = report.final_metrics["accuracy"];
    assert_eq!(report.local_baselines.len(), 3);
    for local in &report.local_baselines {
        assert!(fl >= local.metrics["accuracy"], "FL {fl} < {} {}", local.name, local.metrics["accuracy"]);
    }

    let ckpt = dir.path().join(CHECKPOINT_DIR);
    assert_eq!(report.checkpoints.len(), 5);
    let mut last_round = None;
    for c in &report.checkpoints {
        let m = decode_model(&std::fs::read(dir.path().join(c)).unwrap()).unwrap();
        assert!(last_round < Some(m.current_round), "{c}");
        last_round = Some(m.current_round);
    }
    let latest = read_marker(&ckpt, LATEST_MARKER).unwrap();
    assert_eq!(format!("{CHECKPOINT_DIR}/{latest}"), *report.checkpoints.last().unwrap());
    let best = read_marker(&ckpt, BEST_MARKER).unwrap();
    assert_eq!(Some(format!("{CHECKPOINT_DIR}/{best}")), report.best_checkpoint);
    assert!(report.best_metric.unwrap() > 0.5);

    let events = std::fs::read_to_string(dir.path().join(EVENTS_FILE)).unwrap();
    let parsed: Vec<Value> = events.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(parsed.len() >= 5);
    let written: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(written["status"], "completed");
}

#[test]
fn reruns_and_drivers_agree_bit_for_bit() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut reports = Vec::new();
    for (dir, driver) in dirs.iter().zip(["inproc", "inproc", "tcp"]) {
        let mut cfg = small(dir.path());
        cfg.driver = driver.into();
        reports.push(run_simulation(&cfg).unwrap());
    }
    let sha = reports[0].final_checkpoint_sha256.clone().unwrap();
    for r in &reports[1..] {
        assert_eq!(r.final_checkpoint_sha256.as_ref(), Some(&sha));
        assert_eq!(comparable(r), comparable(&reports[0]));
    }
    let files = |d: &Path| -> Vec<Vec<u8>> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(d.join(CHECKPOINT_DIR))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        names.iter().map(|p| std::fs::read(p).unwrap()).collect()
    };
    assert_eq!(files(dirs[0].path()), files(dirs[2].path()));
}

#[test]
fn byte_buckets_sum_to_transport_totals() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_simulation(&small(dir.path())).unwrap();
    let b = &report.bytes;
    let per_round: u64 = report.rounds.iter().map(|r| r.bytes_sent).sum();
    let per_round_in: u64 = report.rounds.iter().map(|r| r.bytes_received).sum();
    assert_eq!(per_round, b.rounds.sent);
    assert_eq!(per_round_in, b.rounds.received);
    assert_eq!(b.registration.sent + b.rounds.sent + b.teardown.sent, b.total.sent);
    assert_eq!(
        b.registration.received + b.rounds.received + b.teardown.received,
        b.total.received
    );
    let clients = b.clients.unwrap();
    assert_eq!(clients.received, b.total.sent);
    assert_eq!(clients.sent, b.total.received);
    assert!(report.rounds.iter().all(|r| r.bytes_sent > 0 && r.bytes_received > 0));
}

#[test]
fn cyclic_visits_clients_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.workflow = Workflow::Cyclic;
    cfg.clients = 2;
    let report = run_simulation(&cfg).unwrap();
    assert!(report.completed(), "{:?}", report.error);
    for r in &report.rounds {
        let order: Vec<&str> = r.clients.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(order, ["site-1", "site-2"]);
    }

    let dir = tempfile::tempdir().unwrap();
    cfg.out_dir = dir.path().to_owned();
    cfg.cyclic_order = vec!["site-2".into(), "site-1".into()];
    let report = run_simulation(&cfg).unwrap();
    let order: Vec<&str> = report.rounds[0].clients.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(order, ["site-2", "site-1"]);
}

fn regression(out: &Path, lr: f64) -> SimConfig {
    SimConfig::from_json(&format!(
        r#"{{
            "rounds": 3, "clients": 2, "seed": 1,
            "dataset": {{"kind": "regression", "n": 400, "dim": 3, "noise": 0.1}},
            "trainer": {{"arch": {{"kind": "linear"}}, "lr": {lr}, "epochs": 20}},
            "weighting": "uniform",
            "out_dir": {out:?}
        }}"#
    ))
    .unwrap()
}

#[test]
fn regression_job_with_uniform_weighting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = regression(dir.path(), 0.1);
    let report = run_simulation(&cfg).unwrap();
    assert!(report.completed());
    let mse: Vec<f64> = report.rounds.iter().map(|r| r.global_metrics["mse"]).collect();
    assert!(mse.windows(2).all(|w| w[1] <= w[0]), "{mse:?}");
    assert!(mse[2] < 0.05, "{mse:?}");
}

#[test]
fn diverging_clients_fail_the_job_with_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = regression(dir.path(), 1e12);
    let report = run_simulation(&cfg).unwrap();
    assert!(!report.completed());
    assert!(report.error.as_deref().unwrap().contains("OK results"), "{:?}", report.error);
    let written: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(written["status"], "failed");
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path());
    let check = |edit: &dyn Fn(&mut SimConfig), field: &str| {
        let mut cfg = base.clone();
        edit(&mut cfg);
        assert_eq!(config_field(run_simulation(&cfg).unwrap_err()), field);
    };
    check(&|c| c.min_clients = Some(4), "min_clients");
    check(&|c| c.min_responses = Some(0), "min_responses");
    check(&|c| c.alpha = 0.0, "alpha");
    check(&|c| c.driver = "carrier-pigeon".into(), "driver");
    check(&|c| c.chunk_size = Some(10), "chunk_size");
    check(&|c| c.selection_metric = Some("mse".into()), "selection_metric");
    check(&|c| c.cyclic_order = vec!["site-9".into()], "cyclic_order");
    check(&|c| c.trainer.arch = fedsim_core::data::Arch::Linear, "trainer.arch");

    let err = SimConfig::from_json(r#"{"rounds": 1, "clients": 1, "colour": 3}"#).unwrap_err();
    assert_eq!(config_field(err), "colour");
    let err = SimConfig::from_json(r#"{"rounds": "two"}"#).unwrap_err();
    assert_eq!(config_field(err), "rounds");
    let err = SimConfig::from_json(r#"{"rounds": 1, "clients": 1}"#).unwrap_err();
    assert_eq!(config_field(err), "dataset");
    let mut json: Value = serde_json::from_str(&std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/golden.json"),
    ).unwrap()).unwrap();
    json["trainer"]["lr"] = "fast".into();
    let err = SimConfig::from_json(&json.to_string()).unwrap_err();
    assert_eq!(config_field(err), "trainer.lr");
    json["trainer"]["lr"] = 0.5.into();
    json["trainer"]["momentum"] = 0.9.into();
    let err = SimConfig::from_json(&json.to_string()).unwrap_err();
    assert_eq!(config_field(err), "trainer.momentum");
}
