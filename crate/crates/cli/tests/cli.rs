use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cdrtool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdrtool"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = cdrtool(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = r#"{
  "seed": 3,
  "n_stations": 10,
  "n_low_activity_stations": 2,
  "n_background_stations": 5,
  "n_devices": 1500,
  "total_cdrs": 30000,
  "event": { "event_share": 0.3 }
}"#;

fn small_scenario(dir: &Path) {
    let cfg = dir.join("synth.json");
    fs::write(&cfg, SMALL).unwrap();
    let summary = ok(&["synth", "--config", p(&cfg), "--out-dir", p(&dir.join("data"))]);
    assert_eq!(summary["cdr_rows"], 30000);
}

#[test]
fn staged_commands_match_run_all() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_scenario(d);
    let data = d.join("data");
    let f = |name: &str| data.join(name).to_str().unwrap().to_string();
    let store = d.join("store.bin");
    let event = d.join("event.bin");
    let aggs = d.join("aggregates.csv");
    let report = d.join("report.json");

    ok(&[
        "ingest",
        "--cdr",
        &f("cdr.csv"),
        "--cells",
        &f("cell.csv"),
        "--devices",
        &f("device.csv"),
        "--date-from",
        "2014-08-18 00:00:00",
        "--date-to",
        "2014-08-23 00:00:00",
        "--out",
        p(&store),
    ]);
    ok(&["--store", p(&store), "merge-cells"]);
    let coverage = ok(&[
        "--store",
        p(&store),
        "fuse",
        "--tacdb",
        &f("tacdb.csv"),
        "--reference",
        "2014-08",
    ]);
    assert_eq!(coverage["total"], 30000);
    let subset = ok(&[
        "--store",
        p(&store),
        "filter-event",
        "--event",
        &f("event.json"),
        "--seeds",
        &f("seeds.json"),
        "--out",
        p(&event),
    ]);
    assert_eq!(subset["removed_stations"].as_array().unwrap().len(), 2);
    ok(&["--store", p(&event), "aggregate", "--out", p(&aggs)]);
    ok(&[
        "correlate",
        "--aggregates",
        p(&aggs),
        "--labels",
        &f("areas.json"),
        "--out",
        p(&report),
    ]);

    let all = d.join("all");
    let summary = ok(&["run-all", "--config", &f("run.json"), "--out-dir", p(&all)]);
    assert_eq!(summary["status"], "ok");
    for name in ["aggregates.csv", "report.json"] {
        assert_eq!(
            fs::read(d.join(name)).unwrap(),
            fs::read(all.join(name)).unwrap(),
            "{name}"
        );
    }

    let svg = d.join("price.svg");
    let geojson = d.join("price.geojson");
    ok_silent(&[
        "render",
        "choropleth",
        "--in",
        p(&aggs),
        "--out",
        p(&svg),
        "--geojson",
        p(&geojson),
    ]);
    let fc: Value = serde_json::from_str(&fs::read_to_string(&geojson).unwrap()).unwrap();
    assert_eq!(fc["type"], "FeatureCollection");
    assert!(fs::read_to_string(&svg).unwrap().contains("data-station"));

    let series = d.join("series.csv");
    ok(&["--store", p(&store), "series", "--bin", "900", "--out", p(&series)]);
    let plot = d.join("series.svg");
    ok_silent(&[
        "render",
        "series",
        "--in",
        p(&series),
        "--out",
        p(&plot),
        "--event",
        &f("event.json"),
        "--series",
        "all,0",
    ]);
    assert!(fs::read_to_string(&plot).unwrap().contains("class=\"rule\""));
    ok_silent(&[
        "render",
        "scatter",
        "--in",
        p(&report),
        "--out",
        p(&d.join("scatter.svg")),
    ]);
}

fn ok_silent(args: &[&str]) {
    let out = cdrtool(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn threads_flag_selects_the_sequential_path() {
    let tmp = tempfile::tempdir().unwrap();
    small_scenario(tmp.path());
    let config = tmp.path().join("data/run.json");
    let seq = tmp.path().join("seq");
    let par = tmp.path().join("par");
    ok(&[
        "--threads",
        "1",
        "run-all",
        "--config",
        p(&config),
        "--out-dir",
        p(&seq),
    ]);
    ok(&[
        "run-all",
        "--threads",
        "3",
        "--config",
        p(&config),
        "--out-dir",
        p(&par),
    ]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(seq.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["mode"], "sequential");
    for name in ["aggregates.csv", "report.json", "series.csv"] {
        assert_eq!(
            fs::read(seq.join(name)).unwrap(),
            fs::read(par.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let missing = d.join("nope.csv");

    let out = cdrtool(&[
        "ingest",
        "--cdr",
        p(&missing),
        "--cells",
        p(&missing),
        "--devices",
        p(&missing),
        "--out",
        p(&d.join("s.bin")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("s.bin").exists());

    assert_eq!(cdrtool(&["merge-cells"]).status.code(), Some(2));
    assert_eq!(
        cdrtool(&["--threads", "0", "synth", "--out-dir", p(d)]).status.code(),
        Some(2)
    );
    assert_eq!(cdrtool(&["no-such-command"]).status.code(), Some(2));

    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"n_stations": 10, "colour": "blue"}"#).unwrap();
    assert_eq!(
        cdrtool(&["synth", "--config", p(&bad), "--out-dir", p(&d.join("x"))])
            .status
            .code(),
        Some(2)
    );

    small_scenario(d);
    let data = d.join("data");
    let cdr = fs::read_to_string(data.join("cdr.csv")).unwrap();
    let mut lines: Vec<&str> = cdr.lines().collect();
    for line in lines.iter_mut().skip(1).step_by(20) {
        *line = "garbage";
    }
    fs::write(data.join("cdr.csv"), lines.join("\n")).unwrap();
    let out_dir = d.join("out");
    let run = cdrtool(&[
        "run-all",
        "--config",
        p(&data.join("run.json")),
        "--out-dir",
        p(&out_dir),
    ]);
    assert_eq!(run.status.code(), Some(1));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failed_stage"], "ingest");
    assert!(!out_dir.join("aggregates.csv").exists());
}

#[test]
fn merging_twice_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_scenario(d);
    let data = d.join("data");
    let store = d.join("store.bin");
    ok(&[
        "ingest",
        "--cdr",
        p(&data.join("cdr.csv")),
        "--cells",
        p(&data.join("cell.csv")),
        "--devices",
        p(&data.join("device.csv")),
        "--out",
        p(&store),
    ]);
    ok(&["--store", p(&store), "merge-cells"]);
    let before = fs::read(&store).unwrap();
    assert_ne!(cdrtool(&["--store", p(&store), "merge-cells"]).status.code(), Some(0));
    assert_eq!(fs::read(&store).unwrap(), before);
    let out = cdrtool(&["--store", p(&store), "aggregate", "--out", p(&d.join("a.csv"))]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "aggregating an unfused store is a usage error"
    );
}

#[test]
fn json_logs_are_one_object_per_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cdrtool(&[
        "--log-json",
        "run-all",
        "--config",
        p(&tmp.path().join("missing.json")),
        "--out-dir",
        p(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(!stderr.trim().is_empty());
    for line in stderr.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["level"].is_string());
    }
}
