use std::collections::{BTreeMap, BTreeSet};

use cdrtool_core::analytics::Weighting;
use cdrtool_core::event::EventConfig;
use cdrtool_core::pipeline::{self, RunConfig};
use cdrtool_core::synth::{self, GroundTruth, ScenarioConfig, SynthEvent};
use cdrtool_core::tac::flag_anomalies;

fn small() -> ScenarioConfig {
    ScenarioConfig {
        seed: 11,
        n_stations: 12,
        n_low_activity_stations: 3,
        n_background_stations: 6,
        n_devices: 2000,
        total_cdrs: 40_000,
        anomaly_rate: 0.02,
        event: SynthEvent {
            event_share: 0.3,
            ..SynthEvent::default()
        },
        ..ScenarioConfig::default()
    }
}

#[test]
fn staged_pipeline_recovers_planted_truth() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = synth::generate(&small()).unwrap();
    scenario.write(dir.path()).unwrap();
    let truth: GroundTruth =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ground_truth.json")).unwrap()).unwrap();
    assert_eq!(truth, scenario.ground_truth);

    let cfg = RunConfig::load(&dir.path().join("run.json")).unwrap();
    let mut store = pipeline::ingest(&cfg.cdr, &cfg.cells, &cfg.devices, &cfg.ingest_options().unwrap()).unwrap();
    assert_eq!(store.cdrs().len() as u64, truth.n_cdr_rows);
    store.merge_cells().unwrap();
    assert_eq!(store.stations.len(), truth.stations.len());

    // pipeline station id -> planted station id, via the member cell hashes
    let by_hash: BTreeMap<&str, u32> = truth
        .stations
        .iter()
        .flat_map(|s| s.cell_hashes.iter().map(move |h| (h.as_str(), s.station_id)))
        .collect();
    let planted_of: BTreeMap<u32, u32> = store
        .stations
        .iter()
        .map(|s| {
            let owners: BTreeSet<u32> = s
                .member_cell_ids
                .iter()
                .map(|&c| by_hash[store.cells.dict.key(c).unwrap()])
                .collect();
            assert_eq!(owners.len(), 1, "station {} merges cells of {owners:?}", s.station_id);
            (s.station_id, *owners.first().unwrap())
        })
        .collect();

    let coverage = pipeline::fuse(&mut store, &cfg.tacdb, cfg.reference().unwrap(), 0.01).unwrap();
    assert_eq!(
        (coverage.matched, coverage.unmatched),
        (truth.matched_cdrs, truth.unmatched_cdrs)
    );
    let (_, anomalous) = flag_anomalies(&store.samples().unwrap());
    assert_eq!(anomalous.len() as u64, truth.anomalous_cdrs);

    let event = EventConfig::load(&cfg.event).unwrap();
    let subset = pipeline::filter_event(&store, &event, &pipeline::load_seeds(&cfg.seeds).unwrap()).unwrap();
    let meta = subset.meta.event.as_ref().unwrap();
    let map = |ids: &mut dyn Iterator<Item = u32>| ids.map(|id| planted_of[&id]).collect::<BTreeSet<_>>();
    assert_eq!(
        map(&mut meta.selected_stations.iter().copied()),
        truth.event_station_ids.iter().copied().collect()
    );
    assert_eq!(
        map(&mut meta.kept_stations.iter().copied()),
        truth.expected_kept_station_ids.iter().copied().collect()
    );
    assert_eq!(
        map(&mut meta.removed_stations.iter().map(|s| s.station_id)),
        truth.expected_removed_station_ids.iter().copied().collect()
    );
    assert_eq!([meta.window.0, meta.window.1], truth.attendance_window);

    let aggs = pipeline::aggregate(&subset, Weighting::PerSample).unwrap();
    for a in &aggs {
        let planted = &truth.stations[planted_of[&a.station_id] as usize];
        assert_eq!(planted.station_id, planted_of[&a.station_id]);
        assert_eq!(a.n_total, planted.event_window_count, "station {}", a.station_id);
    }
}

#[test]
fn per_device_weighting_counts_each_device_once() {
    let dir = tempfile::tempdir().unwrap();
    synth::generate(&small()).unwrap().write(dir.path()).unwrap();
    let cfg = RunConfig::load(&dir.path().join("run.json")).unwrap();
    let mut store = pipeline::ingest(&cfg.cdr, &cfg.cells, &cfg.devices, &cfg.ingest_options().unwrap()).unwrap();
    store.merge_cells().unwrap();
    pipeline::fuse(&mut store, &cfg.tacdb, cfg.reference().unwrap(), 0.01).unwrap();
    let subset = pipeline::filter_event(
        &store,
        &EventConfig::load(&cfg.event).unwrap(),
        &pipeline::load_seeds(&cfg.seeds).unwrap(),
    )
    .unwrap();
    let per_sample = pipeline::aggregate(&subset, Weighting::PerSample).unwrap();
    let per_device = pipeline::aggregate(&subset, Weighting::PerDevice).unwrap();
    for (s, d) in per_sample.iter().zip(&per_device) {
        assert_eq!(s.station_id, d.station_id);
        assert_eq!(s.n_devices, d.n_devices);
        assert_eq!(s.gender, d.gender);
        assert!(d.n_with_ses <= d.n_devices);
        assert!(d.n_with_ses <= s.n_with_ses);
    }
}
