//! Pipeline stages and the end-to-end run with its manifest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analytics::{
    self, activity_series, aggregate_station, correlation_report, write_aggregates, write_series, AreaLabels,
    CorrelationReport, StationAggregate, Weighting,
};
use crate::error::{Error, ErrorClass, Result};
use crate::event::{self, EventConfig};
use crate::geo::{select_buffer_stations, voronoi, BaseStation, BoundingBox, SeedGeometry};
use crate::ingest::{self, parse_timestamp, IngestOptions, Zone};
use crate::par;
use crate::store::Store;
use crate::tac::{CoverageReport, PhoneTable, YearMonth};
use crate::viz::{self, Indicator};

/// `run.json`: inputs and settings for a full run. Relative paths resolve
/// against the directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub cdr: PathBuf,
    pub cells: PathBuf,
    pub devices: PathBuf,
    pub tacdb: PathBuf,
    pub event: PathBuf,
    pub seeds: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default = "default_tz")]
    pub tz: String,
    pub reference: String,
    /// Declared dataset interval `[from, to)` as local timestamps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_range: Option<[String; 2]>,
    #[serde(default = "default_bin")]
    pub bin_s: i64,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default = "default_max_malformed")]
    pub max_malformed_fraction: f64,
}

fn default_tz() -> String {
    Zone::BUDAPEST.name().to_string()
}

fn default_bin() -> i64 {
    3600
}

fn default_max_malformed() -> f64 {
    0.01
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.cdr,
            &mut cfg.cells,
            &mut cfg.devices,
            &mut cfg.tacdb,
            &mut cfg.event,
            &mut cfg.seeds,
        ] {
            *p = base.join(&*p);
        }
        if let Some(l) = &mut cfg.labels {
            *l = base.join(&*l);
        }
        Ok(cfg)
    }

    pub fn zone(&self) -> Result<Zone> {
        self.tz.parse()
    }

    pub fn reference(&self) -> Result<YearMonth> {
        self.reference.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn ingest_options(&self) -> Result<IngestOptions> {
        let zone = self.zone()?;
        let date_range = match &self.date_range {
            Some([a, b]) => {
                let p = |s: &str| parse_timestamp(s, zone).map_err(|e| Error::Config(format!("date_range: {e}")));
                Some((p(a)?, p(b)?))
            }
            None => None,
        };
        Ok(IngestOptions {
            zone,
            date_range,
            max_malformed_fraction: self.max_malformed_fraction,
            ..IngestOptions::default()
        })
    }
}

fn require_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("input {} does not exist", path.display())))
    }
}

pub fn ingest(cdr: &Path, cells: &Path, devices: &Path, opts: &IngestOptions) -> Result<Store> {
    for p in [cdr, cells, devices] {
        require_input(p)?;
    }
    let dataset = ingest::ingest_all(cdr, cells, devices, opts)?;
    for r in &dataset.reports {
        if r.rows_in != r.records_out + r.errors {
            return Err(Error::Consistency(format!(
                "{}: row accounting does not balance",
                r.file
            )));
        }
    }
    Store::new(opts.zone, dataset)
}

pub fn fuse(store: &mut Store, tacdb: &Path, reference: YearMonth, max_malformed: f64) -> Result<CoverageReport> {
    require_input(tacdb)?;
    let (phones, report) = PhoneTable::load(tacdb, max_malformed)?;
    store.meta.ingest.push(report);
    let coverage = store.attach_phones(phones, reference)?;
    if coverage.matched + coverage.unmatched != coverage.total || coverage.total != store.cdrs().len() as u64 {
        return Err(Error::Consistency("TAC coverage does not add up".into()));
    }
    tracing::info!(
        matched = coverage.matched,
        unmatched = coverage.unmatched,
        "fused phone properties"
    );
    Ok(coverage)
}

pub fn load_seeds(path: &Path) -> Result<SeedGeometry> {
    require_input(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Buffer selection, attendance window and activity threshold.
pub fn filter_event(store: &Store, event_cfg: &EventConfig, seeds: &SeedGeometry) -> Result<Store> {
    store.require_merged()?;
    let stations = select_buffer_stations(&store.stations, seeds).map_err(|e| Error::Config(e.to_string()))?;
    tracing::info!(stations = stations.len(), "selected event stations");
    let spec = event_cfg.spec(stations, store.zone()?)?;
    event::event_subset(store, &spec)
}

/// Stations an aggregate table covers: the kept event stations of a subset
/// store, otherwise every station.
pub fn aggregation_stations(store: &Store) -> Result<Vec<&BaseStation>> {
    store.require_merged()?;
    let ids: Vec<u32> = match &store.meta.event {
        Some(e) => e.kept_stations.clone(),
        None => store.stations.iter().map(|s| s.station_id).collect(),
    };
    ids.iter()
        .map(|&id| {
            store
                .station(id)
                .ok_or_else(|| Error::Consistency(format!("station {id} missing from store")))
        })
        .collect()
}

pub fn aggregate(store: &Store, weighting: Weighting) -> Result<Vec<StationAggregate>> {
    let stations = aggregation_stations(store)?;
    let samples = store.samples()?;
    aggregate_station(&samples, &stations, &store.devices, weighting)
}

/// Stations of aggregate rows, for tessellation.
pub fn aggregate_sites(aggregates: &[StationAggregate]) -> Vec<BaseStation> {
    aggregates
        .iter()
        .map(|a| BaseStation {
            station_id: a.station_id,
            lat: a.lat,
            lon: a.lon,
            member_cell_ids: Vec::new(),
        })
        .collect()
}

pub const AUTO_BBOX_PAD_M: f64 = 500.0;

pub fn render_choropleth(
    aggregates: &[StationAggregate],
    bbox: Option<BoundingBox>,
    indicator: Indicator,
) -> Result<viz::Choropleth> {
    let sites = aggregate_sites(aggregates);
    let bbox = match bbox {
        Some(b) => b,
        None => BoundingBox::around(
            &sites.iter().map(BaseStation::site).collect::<Vec<_>>(),
            AUTO_BBOX_PAD_M,
        )?,
    };
    let tess = voronoi(&sites, &bbox)?;
    viz::render_choropleth(&tess, aggregates, indicator)
}

/// Writes `bytes` to `path` via a `.partial` sibling that is renamed in
/// place by [`Outputs::commit`].
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn partial_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.partial"))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.partial_path(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(path)
    }

    pub fn persist_store(&mut self, name: &str, store: &Store) -> Result<PathBuf> {
        let path = self.partial_path(name);
        store.persist(&path)?;
        self.written.push(name.to_string());
        Ok(path)
    }

    pub fn commit(self) -> Result<Vec<PathBuf>> {
        self.written
            .iter()
            .map(|name| {
                let (from, to) = (self.partial_path(name), self.dir.join(name));
                std::fs::rename(&from, &to).map_err(|e| Error::io(&from, e))?;
                Ok(to)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: String,
    pub elapsed_ms: f64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub counts: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: String,
    pub mode: String,
    pub threads: usize,
    pub status: String,
    pub exit_code: i32,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub stages: Vec<StageRecord>,
    /// Row counts along the conservation chain, by stage.
    pub row_counts: Value,
}

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::DataQuality => 1,
        ErrorClass::Config => 2,
        ErrorClass::Internal => 3,
    }
}

pub const STAGES: [&str; 8] = [
    "ingest",
    "merge-cells",
    "fuse",
    "filter-event",
    "aggregate",
    "correlate",
    "series",
    "render",
];

pub const OUTPUTS: [&str; 12] = [
    "store.bin",
    "event.bin",
    "aggregates.csv",
    "report.json",
    "series.csv",
    "choropleth_price.svg",
    "choropleth_price.geojson",
    "choropleth_age.svg",
    "choropleth_age.geojson",
    "scatter.svg",
    "series.svg",
    "manifest.json",
];

struct Runner {
    stages: Vec<StageRecord>,
    current: Option<(String, Instant)>,
}

impl Runner {
    fn start(&mut self, name: &str) {
        tracing::info!(stage = name, "stage started");
        self.current = Some((name.to_string(), Instant::now()));
    }

    fn finish(&mut self, inputs: Vec<String>, outputs: Vec<String>, counts: Value) {
        let (name, t) = self.current.take().expect("a stage is running");
        let elapsed_ms = t.elapsed().as_secs_f64() * 1e3;
        tracing::info!(stage = %name, elapsed_ms, "stage finished");
        self.stages.push(StageRecord {
            name,
            status: "ok".into(),
            elapsed_ms,
            inputs,
            outputs,
            counts,
        });
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

/// Outcome of [`run_all`]: the manifest is always produced.
pub struct RunOutcome {
    pub manifest: Manifest,
    pub result: Result<()>,
}

/// Runs every stage in order, writing outputs and `manifest.json` into
/// `out_dir`. Outputs of a failed run keep their `.partial` suffix.
pub fn run_all(config_path: &Path, out_dir: &Path) -> RunOutcome {
    let mut runner = Runner {
        stages: Vec::new(),
        current: None,
    };
    let mut counts = json!({});
    let result = run_stages(config_path, out_dir, &mut runner, &mut counts);
    let (exit, failed_stage, error) = match &result {
        Ok(()) => (0, None, None),
        Err(e) => {
            let stage = runner.current.as_ref().map(|(n, _)| n.clone());
            if let Some((name, t)) = runner.current.take() {
                runner.stages.push(StageRecord {
                    name,
                    status: "failed".into(),
                    elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
                    inputs: Vec::new(),
                    outputs: Vec::new(),
                    counts: Value::Null,
                });
            }
            tracing::error!(stage = stage.as_deref().unwrap_or("setup"), error = %e, "run failed");
            (
                exit_code(e.class()),
                stage.or(Some("setup".into())),
                Some(e.to_string()),
            )
        }
    };
    let manifest = Manifest {
        tool: "cdrtool".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: show(config_path),
        mode: format!("{:?}", par::mode()).to_lowercase(),
        threads: current_threads(),
        status: if exit == 0 { "ok" } else { "failed" }.into(),
        exit_code: exit,
        failed_stage,
        error,
        stages: runner.stages,
        row_counts: counts,
    };
    let mut result = result;
    let path = out_dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    if let Err(e) = std::fs::create_dir_all(out_dir).and_then(|_| std::fs::write(&path, body)) {
        tracing::error!(error = %e, "cannot write manifest");
        if result.is_ok() {
            result = Err(Error::io(&path, e));
        }
    }
    RunOutcome { manifest, result }
}

fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    if par::mode() == par::Mode::Parallel {
        return rayon::current_num_threads();
    }
    1
}

fn run_stages(config_path: &Path, out_dir: &Path, r: &mut Runner, counts: &mut Value) -> Result<()> {
    r.start("setup");
    let cfg = RunConfig::load(config_path)?;
    let zone = cfg.zone()?;
    let reference = cfg.reference()?;
    let opts = cfg.ingest_options()?;
    if cfg.bin_s <= 0 {
        return Err(Error::Config(format!("bin_s must be positive, got {}", cfg.bin_s)));
    }
    let mut out = Outputs::new(out_dir)?;
    for name in OUTPUTS {
        let _ = std::fs::remove_file(out.partial_path(name));
    }
    r.finish(vec![show(config_path)], vec![], Value::Null);

    r.start("ingest");
    let mut store = ingest(&cfg.cdr, &cfg.cells, &cfg.devices, &opts)?;
    let cdr_report = store.meta.ingest.last().cloned().unwrap_or_default();
    counts["cdr_rows_in"] = json!(cdr_report.rows_in);
    counts["cdr_records"] = json!(cdr_report.records_out);
    counts["cdr_errors"] = json!(cdr_report.errors);
    counts["cdr_out_of_range"] = json!(cdr_report.out_of_range);
    r.finish(
        vec![show(&cfg.cdr), show(&cfg.cells), show(&cfg.devices)],
        vec![],
        json!({ "reports": store.meta.ingest }),
    );

    r.start("merge-cells");
    store.merge_cells()?;
    if store.cdrs().len() as u64 != cdr_report.records_out {
        return Err(Error::Consistency("merging changed the number of records".into()));
    }
    counts["merged_records"] = json!(store.cdrs().len());
    r.finish(
        vec![],
        vec![],
        json!({ "cells": store.cells.rows.len(), "stations": store.stations.len() }),
    );

    r.start("fuse");
    let coverage = fuse(&mut store, &cfg.tacdb, reference, cfg.max_malformed_fraction)?;
    counts["fused_records"] = json!(coverage.total);
    let store_path = out.persist_store("store.bin", &store)?;
    r.finish(
        vec![show(&cfg.tacdb)],
        vec![show(&store_path)],
        json!({ "matched": coverage.matched, "unmatched": coverage.unmatched, "unmatched_tacs": coverage.unmatched_tacs.len() }),
    );

    r.start("filter-event");
    require_input(&cfg.event)?;
    let event_cfg = EventConfig::load(&cfg.event)?;
    let seeds = load_seeds(&cfg.seeds)?;
    let subset = filter_event(&store, &event_cfg, &seeds)?;
    let meta = subset.meta.event.clone().expect("subset has event metadata");
    // Linear-scan cross-check of the indexed window query.
    let selected: BTreeSet<u32> = meta.selected_stations.iter().copied().collect();
    let (w0, w1) = meta.window;
    let brute = store
        .cdrs()
        .records()
        .iter()
        .filter(|x| selected.contains(&x.cell_id) && x.ts >= w0 && x.ts < w1)
        .count() as u64;
    let removed: u64 = meta.removed_stations.iter().map(|s| s.count).sum();
    if brute != meta.records_in_window || meta.records_kept + removed != meta.records_in_window {
        return Err(Error::Consistency(format!(
            "event filter kept {} of {} window records ({} removed) but a scan finds {brute}",
            meta.records_kept, meta.records_in_window, removed
        )));
    }
    counts["window_records"] = json!(meta.records_in_window);
    counts["removed_records"] = json!(removed);
    counts["event_records"] = json!(meta.records_kept);
    let subset_path = out.persist_store("event.bin", &subset)?;
    r.finish(
        vec![show(&cfg.event), show(&cfg.seeds)],
        vec![show(&subset_path)],
        json!({
            "window": [zone.format(w0), zone.format(w1)],
            "selected_stations": meta.selected_stations.len(),
            "kept_stations": meta.kept_stations,
            "removed_stations": meta.removed_stations,
        }),
    );

    r.start("aggregate");
    let aggregates = aggregate(&subset, cfg.weighting)?;
    let total: u64 = aggregates.iter().map(|a| a.n_total).sum();
    if total != meta.records_kept {
        return Err(Error::Consistency(format!(
            "aggregates hold {total} records, event subset has {}",
            meta.records_kept
        )));
    }
    counts["aggregated_records"] = json!(total);
    let mut buf = Vec::new();
    write_aggregates(&mut buf, &aggregates)?;
    let agg_path = out.write("aggregates.csv", &buf)?;
    r.finish(
        vec![show(&subset_path)],
        vec![show(&agg_path)],
        json!({
            "stations": aggregates.len(),
            "with_ses": aggregates.iter().map(|a| a.n_with_ses).sum::<u64>(),
            "anomalous": aggregates.iter().map(|a| a.n_anomalous).sum::<u64>(),
        }),
    );

    r.start("correlate");
    let labels: AreaLabels = match &cfg.labels {
        Some(p) => {
            require_input(p)?;
            analytics::load_labels(p)?
        }
        None => AreaLabels::new(),
    };
    let report = correlation_report(&aggregates, &labels)?;
    let report_path = out.write("report.json", report_json(&report).as_bytes())?;
    r.finish(
        cfg.labels.iter().map(|p| show(p)).collect(),
        vec![show(&report_path)],
        json!({ "r": report.r, "n": report.n, "n_excluded": report.n_excluded }),
    );

    r.start("series");
    let kept: BTreeSet<u32> = meta.kept_stations.iter().copied().collect();
    let records: Vec<_> = store
        .cdrs()
        .records()
        .iter()
        .filter(|x| kept.contains(&x.cell_id))
        .copied()
        .collect();
    let series = activity_series(&records, cfg.bin_s, opts.date_range)?;
    let mut buf = Vec::new();
    write_series(&mut buf, &series)?;
    let series_path = out.write("series.csv", &buf)?;
    r.finish(
        vec![show(&store_path)],
        vec![show(&series_path)],
        json!({ "bins": series.pooled.counts.len(), "records": series.pooled.counts.iter().sum::<u64>() }),
    );

    r.start("render");
    let mut rendered = Vec::new();
    for ind in [Indicator::Price, Indicator::Age] {
        let c = render_choropleth(&aggregates, cfg.bbox, ind)?;
        let stem = format!("choropleth_{}", if ind == Indicator::Price { "price" } else { "age" });
        rendered.push(out.write(&format!("{stem}.svg"), c.svg.as_bytes())?);
        rendered.push(out.write(&format!("{stem}.geojson"), (c.geojson.to_string() + "\n").as_bytes())?);
    }
    rendered.push(out.write("scatter.svg", viz::render_scatter(&report).as_bytes())?);
    let svg = viz::render_series(&[("all".to_string(), series.pooled.clone())], Some(meta.window))?;
    rendered.push(out.write("series.svg", svg.as_bytes())?);
    r.finish(
        vec![show(&agg_path), show(&report_path), show(&series_path)],
        rendered.iter().map(|p| show(p)).collect(),
        Value::Null,
    );

    r.start("commit");
    out.commit()?;
    r.finish(vec![], vec![], Value::Null);
    Ok(())
}

pub fn report_json(report: &CorrelationReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}
