//! Synthetic cities with planted ground truth.
//!
//! A scenario has three kinds of base station:
//!
//! * `event` stations sit within `area_radius_m` of a vertex of the event
//!   polyline and carry the planted price/age structure: their SES means
//!   have sample correlation exactly `rho`.
//! * `low_activity` stations are also in the event area but get too little
//!   traffic in the attendance window to pass the activity threshold.
//! * `background` stations lie at least `background_clearance_m` from every
//!   polyline vertex and only see everyday traffic.
//!
//! Every device has a home station and a single handset drawn around that
//! station's planted means. All of its records occur at its home station.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analytics::{pearson, AreaLabels, Weighting};
use crate::error::{Error, Result};
use crate::event::EventConfig;
use crate::geo::{haversine_m, BoundingBox, LatLon, SeedGeometry, EARTH_RADIUS_M};
use crate::ingest::{parse_timestamp, MicroDegrees, TimestampParser, Zone, CDR_HEADER, CELL_HEADER, DEVICE_HEADER};
use crate::par;
use crate::pipeline::RunConfig;
use crate::tac::{YearMonth, TACDB_HEADER};

const COVERED_TAC_BASE: u32 = 35_000_000;
const UNCOVERED_TAC_BASE: u32 = 86_000_000;
const MAX_AGE_MONTHS: i32 = 187;
const MAX_PRICE_STEP: i32 = 999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthEvent {
    pub show_start: String,
    pub show_end: String,
    pub margin_min: i64,
    pub min_activity: u64,
    /// Share of `total_cdrs` added as attendance at the event stations.
    pub event_share: f64,
    /// Attendance records per low-activity station, inclusive range.
    pub low_activity_records: [u64; 2],
    pub polyline_length_m: f64,
    pub polyline_vertices: usize,
    pub area_radius_m: f64,
    pub buffer_radius_m: f64,
    pub background_clearance_m: f64,
}

impl Default for SynthEvent {
    fn default() -> Self {
        Self {
            show_start: "2014-08-20 20:30:00".into(),
            show_end: "2014-08-20 21:00:00".into(),
            margin_min: 30,
            min_activity: 500,
            event_share: 0.1,
            low_activity_records: [20, 200],
            polyline_length_m: 3000.0,
            polyline_vertices: 31,
            area_radius_m: 200.0,
            buffer_radius_m: 250.0,
            background_clearance_m: 400.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Event stations carrying the planted correlation.
    pub n_stations: usize,
    pub n_low_activity_stations: usize,
    pub n_background_stations: usize,
    /// Probability of each additional co-located cell (geometric count).
    pub duplicate_cell_rate: f64,
    pub bbox: BoundingBox,
    pub tz: String,
    pub start_date: String,
    pub days: u32,
    pub reference: String,
    pub price_mean_eur: f64,
    pub price_sd_eur: f64,
    pub age_mean_months: f64,
    pub age_sd_months: f64,
    /// Target sample correlation of station price and age means.
    pub rho: f64,
    pub price_within_sd_eur: f64,
    pub age_within_sd_months: f64,
    pub n_devices: usize,
    /// Log-scale spread of per-device call rates.
    pub rate_sigma: f64,
    pub total_cdrs: u64,
    /// Relative call volume per local hour.
    pub diurnal: Vec<f64>,
    pub event: SynthEvent,
    pub tac_coverage: f64,
    /// Share of devices whose handset is released after the reference month.
    pub anomaly_rate: f64,
    pub demographics_missing_rate: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_stations: 50,
            n_low_activity_stations: 4,
            n_background_stations: 16,
            duplicate_cell_rate: 0.3,
            bbox: BoundingBox {
                min_lat: 47.45,
                max_lat: 47.55,
                min_lon: 19.0,
                max_lon: 19.1,
            },
            tz: "Europe/Budapest".into(),
            start_date: "2014-08-18".into(),
            days: 5,
            reference: "2014-08".into(),
            price_mean_eur: 350.0,
            price_sd_eur: 110.0,
            age_mean_months: 36.0,
            age_sd_months: 8.0,
            rho: -0.75,
            price_within_sd_eur: 80.0,
            age_within_sd_months: 6.0,
            n_devices: 20_000,
            rate_sigma: 1.0,
            total_cdrs: 1_000_000,
            diurnal: vec![
                0.2, 0.1, 0.08, 0.06, 0.06, 0.1, 0.3, 0.6, 0.9, 1.0, 1.0, 1.05, 1.1, 1.05, 1.0, 1.0, 1.05, 1.1, 1.2,
                1.25, 1.2, 1.0, 0.7, 0.4,
            ],
            event: SynthEvent::default(),
            tac_coverage: 0.95,
            anomaly_rate: 0.002,
            demographics_missing_rate: 0.03,
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn n_sites(&self) -> usize {
        self.n_stations + self.n_low_activity_stations + self.n_background_stations
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, p) in [
            ("tac_coverage", self.tac_coverage),
            ("anomaly_rate", self.anomaly_rate),
            ("demographics_missing_rate", self.demographics_missing_rate),
            ("event.event_share", self.event.event_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be a probability, got {p}"));
            }
        }
        if !(0.0..1.0).contains(&self.duplicate_cell_rate) {
            return bad(format!(
                "duplicate_cell_rate must be in [0, 1), got {}",
                self.duplicate_cell_rate
            ));
        }
        for (name, s) in [
            ("price_sd_eur", self.price_sd_eur),
            ("age_sd_months", self.age_sd_months),
            ("price_within_sd_eur", self.price_within_sd_eur),
            ("age_within_sd_months", self.age_within_sd_months),
            ("rate_sigma", self.rate_sigma),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {s}"));
            }
        }
        if !(self.rho.abs() <= 1.0) {
            return bad(format!("rho must lie in [-1, 1], got {}", self.rho));
        }
        if self.rho != 0.0 && (self.price_sd_eur == 0.0 || self.age_sd_months == 0.0) {
            return bad(format!(
                "rho = {} is unattainable when a station-level spread is zero",
                self.rho
            ));
        }
        if self.n_stations < 3 {
            return bad(format!(
                "need at least 3 event stations to plant a correlation, got {}",
                self.n_stations
            ));
        }
        if self.n_devices < self.n_sites() {
            return bad(format!(
                "{} devices cannot cover {} stations",
                self.n_devices,
                self.n_sites()
            ));
        }
        if self.days == 0 {
            return bad("days must be positive".into());
        }
        if self.diurnal.len() != 24
            || self.diurnal.iter().any(|w| !(*w >= 0.0))
            || self.diurnal.iter().sum::<f64>() <= 0.0
        {
            return bad("diurnal needs 24 non-negative weights with a positive sum".into());
        }
        let e = &self.event;
        if e.low_activity_records[0] > e.low_activity_records[1] {
            return bad("event.low_activity_records must be [lo, hi] with lo <= hi".into());
        }
        if !(e.area_radius_m > 0.0
            && e.area_radius_m < e.buffer_radius_m
            && e.buffer_radius_m < e.background_clearance_m)
        {
            return bad("need 0 < area_radius_m < buffer_radius_m < background_clearance_m".into());
        }
        if e.polyline_vertices < 1 || !(e.polyline_length_m >= 0.0) {
            return bad("event polyline needs at least one vertex and a non-negative length".into());
        }
        self.bbox.validate().map_err(|e| Error::Config(e.to_string()))?;
        let (s, t) = self.period()?;
        let (w0, w1) = self.window()?;
        if w0 < s || w1 > t {
            return bad("attendance window lies outside the generated period".into());
        }
        if self.event_records_total() > self.total_cdrs {
            return bad("event traffic exceeds total_cdrs".into());
        }
        Ok(())
    }

    fn zone(&self) -> Result<Zone> {
        self.tz.parse()
    }

    fn start(&self) -> Result<NaiveDate> {
        NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map_err(|e| Error::Config(format!("start_date {:?}: {e}", self.start_date)))
    }

    fn midnight(&self, day: u32) -> Result<i64> {
        let date = self.start()? + Duration::days(i64::from(day));
        parse_timestamp(&format!("{date} 00:00:00"), self.zone()?).map_err(|e| Error::Config(e.to_string()))
    }

    /// Generated period `[start, end)` in epoch seconds.
    pub fn period(&self) -> Result<(i64, i64)> {
        Ok((self.midnight(0)?, self.midnight(self.days)?))
    }

    fn event_config(&self) -> EventConfig {
        EventConfig {
            show_start: self.event.show_start.clone(),
            show_end: self.event.show_end.clone(),
            margin_min: self.event.margin_min,
            min_activity: self.event.min_activity,
            tz: None,
        }
    }

    pub fn window(&self) -> Result<(i64, i64)> {
        let (a, b) = self.event_config().show(self.zone()?)?;
        let m = self.event.margin_min * 60;
        if a >= b {
            return Err(Error::Config("event show must start before it ends".into()));
        }
        Ok((a - m, b + m))
    }

    fn event_records_total(&self) -> u64 {
        let per = self.event_records_per_station();
        per * self.n_stations as u64 * 5 / 4 + self.event.low_activity_records[1] * self.n_low_activity_stations as u64
    }

    fn event_records_per_station(&self) -> u64 {
        (self.total_cdrs as f64 * self.event.event_share / self.n_stations as f64).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationRole {
    Event,
    LowActivity,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationTruth {
    pub station_id: u32,
    pub role: StationRole,
    pub lat: f64,
    pub lon: f64,
    pub area: String,
    pub cell_hashes: Vec<String>,
    pub planted_mean_price_eur: f64,
    pub planted_mean_age_months: f64,
    pub n_devices: u64,
    /// Records in the attendance window, all traffic.
    pub event_window_count: u64,
    pub total_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub tz: String,
    pub reference: String,
    pub target_rho: f64,
    /// Sample correlation of the planted means over `correlated_station_ids`.
    pub planted_mean_correlation: Option<f64>,
    pub correlated_station_ids: Vec<u32>,
    /// Stations inside the buffer around the seed polyline.
    pub event_station_ids: Vec<u32>,
    pub expected_kept_station_ids: Vec<u32>,
    pub expected_removed_station_ids: Vec<u32>,
    pub show: [i64; 2],
    pub attendance_window: [i64; 2],
    pub min_activity: u64,
    pub n_cdr_rows: u64,
    pub n_cells: u64,
    pub n_devices: u64,
    /// Station id per row of `cell.csv`.
    pub cell_to_station: Vec<u32>,
    pub devices_covered: u64,
    pub matched_cdrs: u64,
    pub unmatched_cdrs: u64,
    /// Records whose handset postdates the reference month.
    pub anomalous_cdrs: u64,
    pub stations: Vec<StationTruth>,
}

/// All generated artefacts, in memory.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cdr_csv: String,
    pub cell_csv: String,
    pub device_csv: String,
    pub tacdb_csv: String,
    pub event: EventConfig,
    pub seeds: SeedGeometry,
    pub labels: AreaLabels,
    pub run: RunConfig,
    pub ground_truth: GroundTruth,
}

pub const FILES: [&str; 9] = [
    "cdr.csv",
    "cell.csv",
    "device.csv",
    "tacdb.csv",
    "event.json",
    "seeds.json",
    "areas.json",
    "run.json",
    "ground_truth.json",
];

impl Scenario {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bodies = [
            self.cdr_csv.clone(),
            self.cell_csv.clone(),
            self.device_csv.clone(),
            self.tacdb_csv.clone(),
            pretty(&self.event),
            pretty(&self.seeds),
            pretty(&self.labels),
            pretty(&self.run),
            pretty(&self.ground_truth),
        ];
        for (name, body) in FILES.iter().zip(bodies) {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_LAYOUT: u64 = 1;
const STREAM_MEANS: u64 = 2;
const STREAM_DEVICES: u64 = 3;
const STREAM_HASHES: u64 = 4;
const STREAM_STATION_BASE: u64 = 1000;

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n` pairs with sample means 0, sample sds 1 and sample correlation `rho`.
fn correlated_pairs(n: usize, rho: f64, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    loop {
        let mut a: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        let mut b: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        for v in [&mut a, &mut b] {
            let m = v.iter().sum::<f64>() / n as f64;
            v.iter_mut().for_each(|x| *x -= m);
        }
        let aa: f64 = a.iter().map(|x| x * x).sum();
        let ab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        b.iter_mut().zip(&a).for_each(|(y, x)| *y -= ab / aa * x);
        let bb: f64 = b.iter().map(|x| x * x).sum();
        if aa < 1e-9 || bb < 1e-9 {
            continue;
        }
        let (sa, sb) = (((n - 1) as f64 / aa).sqrt(), ((n - 1) as f64 / bb).sqrt());
        let c = (1.0 - rho * rho).max(0.0).sqrt();
        return a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x * sa, rho * x * sa + c * y * sb))
            .collect();
    }
}

fn offset(p: LatLon, dist_m: f64, bearing: f64) -> LatLon {
    let dlat = (dist_m * bearing.cos() / EARTH_RADIUS_M).to_degrees();
    let dlon = (dist_m * bearing.sin() / (EARTH_RADIUS_M * p.lat.to_radians().cos())).to_degrees();
    LatLon::new(p.lat + dlat, p.lon + dlon)
}

fn micro(p: LatLon) -> (MicroDegrees, MicroDegrees) {
    (MicroDegrees::from_degrees(p.lat), MicroDegrees::from_degrees(p.lon))
}

struct Site {
    role: StationRole,
    lat: MicroDegrees,
    lon: MicroDegrees,
}

impl Site {
    fn latlon(&self) -> LatLon {
        LatLon::new(self.lat.degrees(), self.lon.degrees())
    }
}

fn polyline(cfg: &ScenarioConfig) -> Vec<LatLon> {
    let c = cfg.bbox.center();
    let n = cfg.event.polyline_vertices;
    let half = cfg.event.polyline_length_m / 2.0;
    (0..n)
        .map(|i| {
            let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            let along = -half + f * 2.0 * half;
            // A gentle bend so the line is not a meridian.
            let p = offset(c, along, 0.0);
            offset(p, 150.0 * (f * std::f64::consts::PI).sin(), std::f64::consts::FRAC_PI_2)
        })
        .collect()
}

fn nearest_vertex_m(p: LatLon, line: &[LatLon]) -> f64 {
    line.iter().map(|&v| haversine_m(p, v)).fold(f64::INFINITY, f64::min)
}

fn layout(cfg: &ScenarioConfig, line: &[LatLon]) -> Result<Vec<Site>> {
    let mut rng = stream(cfg.seed, STREAM_LAYOUT);
    let mut used = BTreeSet::new();
    let mut sites = Vec::with_capacity(cfg.n_sites());
    let b = &cfg.bbox;
    let roles = std::iter::repeat_n(StationRole::Event, cfg.n_stations)
        .chain(std::iter::repeat_n(
            StationRole::LowActivity,
            cfg.n_low_activity_stations,
        ))
        .chain(std::iter::repeat_n(StationRole::Background, cfg.n_background_stations));
    for role in roles {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(format!(
                    "cannot place a {role:?} station inside the bounding box"
                )));
            }
            let p = match role {
                StationRole::Background => {
                    LatLon::new(rng.gen_range(b.min_lat..b.max_lat), rng.gen_range(b.min_lon..b.max_lon))
                }
                _ => {
                    let v = line[rng.gen_range(0..line.len())];
                    let d = cfg.event.area_radius_m * rng.gen::<f64>().sqrt();
                    offset(v, d, rng.gen_range(0.0..std::f64::consts::TAU))
                }
            };
            let (lat, lon) = micro(p);
            let site = Site { role, lat, lon };
            let q = site.latlon();
            let near = nearest_vertex_m(q, line);
            let ok = b.contains_strictly(q)
                && match role {
                    StationRole::Background => near >= cfg.event.background_clearance_m,
                    _ => near <= cfg.event.area_radius_m,
                };
            if ok && used.insert((lat, lon)) {
                sites.push(site);
                break;
            }
        }
    }
    Ok(sites)
}

fn area_label(p: LatLon, line: &[LatLon]) -> String {
    let (i, v) = line
        .iter()
        .enumerate()
        .min_by(|a, b| haversine_m(p, *a.1).total_cmp(&haversine_m(p, *b.1)))
        .expect("polyline has vertices");
    let third = line.len() / 3;
    if p.lon >= v.lon {
        "Pest".into()
    } else if i >= third && i < line.len() - third {
        "Castle District".into()
    } else {
        "Buda".into()
    }
}

struct DevicePlan {
    hash: String,
    home: u32,
    rate: f64,
    tac: u32,
    covered: bool,
    anomalous: bool,
    price_step: i32,
    age_months: i32,
    demographics: String,
}

fn hex_id(rng: &mut impl Rng, used: &mut BTreeSet<u64>) -> String {
    loop {
        let v: u64 = rng.gen();
        if used.insert(v) {
            return format!("{v:016x}");
        }
    }
}

fn demographics(rng: &mut impl Rng, missing: f64) -> String {
    let age = rng.gen_range(14..86u32).to_string();
    let gender = if rng.gen_bool(0.5) { "male" } else { "female" };
    let customer = if rng.gen_bool(0.9) { "individual" } else { "business" };
    let subscription = if rng.gen_bool(0.4) { "prepaid" } else { "postpaid" };
    let fields: Vec<&str> = [age.as_str(), gender, customer, subscription]
        .into_iter()
        .map(|f| if rng.gen_bool(missing) { "" } else { f })
        .collect();
    fields.join(",")
}

/// Splits `total` proportionally to `weights` by largest remainder.
fn apportion(total: u64, weights: &[f64]) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}

#[derive(Clone, Copy)]
struct Row {
    ts: i64,
    device: u32,
    cell: u32,
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let zone = cfg.zone()?;
    let reference: YearMonth = cfg.reference.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let line = polyline(cfg);
    let sites = layout(cfg, &line)?;
    let n_sites = sites.len();

    // Planted station means.
    let mut means_rng = stream(cfg.seed, STREAM_MEANS);
    let mut z = correlated_pairs(cfg.n_stations, cfg.rho, &mut means_rng);
    z.extend((cfg.n_stations..n_sites).map(|_| (normal(&mut means_rng), normal(&mut means_rng))));
    let means: Vec<(f64, f64)> = z
        .iter()
        .map(|&(x, y)| {
            (
                cfg.price_mean_eur + cfg.price_sd_eur * x,
                cfg.age_mean_months + cfg.age_sd_months * y,
            )
        })
        .collect();

    // Cells.
    let mut hash_rng = stream(cfg.seed, STREAM_HASHES);
    let mut used_hashes = BTreeSet::new();
    let mut cell_csv = String::with_capacity(n_sites * 64);
    cell_csv.push_str(CELL_HEADER);
    cell_csv.push('\n');
    let mut station_cells: Vec<Vec<u32>> = Vec::with_capacity(n_sites);
    let mut cell_hashes: Vec<Vec<String>> = Vec::with_capacity(n_sites);
    let mut cell_to_station = Vec::new();
    let mut layout_rng = stream(cfg.seed, STREAM_LAYOUT + 100);
    for (s, site) in sites.iter().enumerate() {
        let mut k = 1;
        while k < 8 && layout_rng.gen_bool(cfg.duplicate_cell_rate) {
            k += 1;
        }
        let mut ids = Vec::with_capacity(k);
        let mut hashes = Vec::with_capacity(k);
        for _ in 0..k {
            let h = hex_id(&mut hash_rng, &mut used_hashes);
            // Digits past the sixth decimal carry no information.
            let _ = writeln!(
                cell_csv,
                "{h},{}{:02},{}{:02}",
                site.lat,
                layout_rng.gen_range(0..100),
                site.lon,
                layout_rng.gen_range(0..100)
            );
            ids.push(cell_to_station.len() as u32);
            cell_to_station.push(s as u32);
            hashes.push(h);
        }
        station_cells.push(ids);
        cell_hashes.push(hashes);
    }

    // Devices.
    let mut dev_rng = stream(cfg.seed, STREAM_DEVICES);
    let station_weight: Vec<f64> = sites
        .iter()
        .map(|s| match s.role {
            StationRole::LowActivity => 0.1,
            _ => dev_rng.gen_range(0.5..1.5),
        })
        .collect();
    let home_dist = WeightedIndex::new(&station_weight).map_err(|e| Error::Config(e.to_string()))?;
    let rate_dist = LogNormal::new(0.0, cfg.rate_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut devices = Vec::with_capacity(cfg.n_devices);
    for d in 0..cfg.n_devices {
        let home = if d < n_sites { d } else { home_dist.sample(&mut dev_rng) };
        let (mp, ma) = means[home];
        let price_step = ((mp + cfg.price_within_sd_eur * normal(&mut dev_rng)) / 10.0)
            .round()
            .clamp(1.0, MAX_PRICE_STEP as f64) as i32;
        let mut age_months = (ma + cfg.age_within_sd_months * normal(&mut dev_rng))
            .round()
            .clamp(0.0, MAX_AGE_MONTHS as f64) as i32;
        let anomalous = dev_rng.gen_bool(cfg.anomaly_rate);
        if anomalous {
            age_months = -dev_rng.gen_range(1..=12);
        }
        let covered = dev_rng.gen_bool(cfg.tac_coverage);
        let tac = if covered {
            COVERED_TAC_BASE + price_step as u32 * 200 + (age_months + 12) as u32
        } else {
            UNCOVERED_TAC_BASE + d as u32 % 1_000_000
        };
        devices.push(DevicePlan {
            hash: hex_id(&mut hash_rng, &mut used_hashes),
            home: home as u32,
            rate: rate_dist.sample(&mut dev_rng),
            tac,
            covered,
            anomalous,
            price_step,
            age_months,
            demographics: demographics(&mut dev_rng, cfg.demographics_missing_rate),
        });
    }
    let mut homed: Vec<Vec<u32>> = vec![Vec::new(); n_sites];
    for (d, dev) in devices.iter().enumerate() {
        homed[dev.home as usize].push(d as u32);
    }

    // Traffic volumes.
    let (w0, w1) = cfg.window()?;
    let per_station = cfg.event_records_per_station();
    let mut vol_rng = stream(cfg.seed, STREAM_DEVICES + 100);
    let event_records: Vec<u64> = sites
        .iter()
        .map(|s| match s.role {
            StationRole::Event => vol_rng.gen_range(per_station * 3 / 4..=per_station * 5 / 4),
            StationRole::LowActivity => {
                vol_rng.gen_range(cfg.event.low_activity_records[0]..=cfg.event.low_activity_records[1])
            }
            StationRole::Background => 0,
        })
        .collect();
    let background_total = cfg.total_cdrs - event_records.iter().sum::<u64>();
    let device_weight: Vec<f64> = devices
        .iter()
        .map(|d| d.rate * station_weight[d.home as usize])
        .collect();
    let background = apportion(background_total, &device_weight);
    let midnights: Vec<i64> = (0..cfg.days).map(|d| cfg.midnight(d)).collect::<Result<_>>()?;
    let hour_dist = WeightedIndex::new(&cfg.diurnal).map_err(|e| Error::Config(e.to_string()))?;

    let per_site: Vec<Vec<Row>> = par::map_range(n_sites, |s| {
        let mut rng = stream(cfg.seed, STREAM_STATION_BASE + s as u64);
        let cells = &station_cells[s];
        let mut rows = Vec::new();
        for &d in &homed[s] {
            for _ in 0..background[d as usize] {
                let day = midnights[rng.gen_range(0..midnights.len())];
                let ts = day + hour_dist.sample(&mut rng) as i64 * 3600 + rng.gen_range(0..3600);
                rows.push(Row {
                    ts,
                    device: d,
                    cell: cells[rng.gen_range(0..cells.len())],
                });
            }
        }
        if event_records[s] > 0 {
            let dist = WeightedIndex::new(homed[s].iter().map(|&d| devices[d as usize].rate))
                .expect("every station has a device with positive rate");
            for _ in 0..event_records[s] {
                rows.push(Row {
                    ts: rng.gen_range(w0..w1),
                    device: homed[s][dist.sample(&mut rng)],
                    cell: cells[rng.gen_range(0..cells.len())],
                });
            }
        }
        rows
    });
    let mut rows: Vec<Row> = per_site.into_iter().flatten().collect();
    rows.sort_by_key(|r| r.ts);

    // Render CDRs; the ground truth uses the instant the text parses back to.
    let mut parser = TimestampParser::new(zone);
    let mut cdr_csv = String::with_capacity(rows.len() * 64);
    cdr_csv.push_str(CDR_HEADER);
    cdr_csv.push('\n');
    let mut window_count = vec![0u64; n_sites];
    let mut total_count = vec![0u64; n_sites];
    let (mut matched, mut anomalous_cdrs) = (0u64, 0u64);
    let cell_hash_flat: Vec<&str> = cell_hashes.iter().flatten().map(String::as_str).collect();
    for r in &rows {
        let local = zone.format(r.ts);
        let ts = parser.parse(&local)?;
        let dev = &devices[r.device as usize];
        let s = cell_to_station[r.cell as usize] as usize;
        total_count[s] += 1;
        if ts >= w0 && ts < w1 {
            window_count[s] += 1;
        }
        if dev.covered {
            matched += 1;
            if dev.anomalous {
                anomalous_cdrs += 1;
            }
        }
        let _ = writeln!(
            cdr_csv,
            "{local},{},{},{}",
            dev.hash, cell_hash_flat[r.cell as usize], dev.tac
        );
    }

    let mut device_csv = String::with_capacity(devices.len() * 48);
    device_csv.push_str(DEVICE_HEADER);
    device_csv.push('\n');
    for d in &devices {
        let _ = writeln!(device_csv, "{},{}", d.hash, d.demographics);
    }

    let mut catalog: BTreeMap<u32, (i32, i32)> = BTreeMap::new();
    for d in devices.iter().filter(|d| d.covered) {
        catalog.insert(d.tac, (d.price_step, d.age_months));
    }
    let mut tacdb_csv = TACDB_HEADER.join(",");
    tacdb_csv.push('\n');
    let ref_index = reference.year * 12 + reference.month as i32 - 1;
    for (tac, (step, age)) in &catalog {
        let idx = ref_index - age;
        let _ = writeln!(
            tacdb_csv,
            "{tac},Synth,P{}-A{age},{},{},{}",
            step * 10,
            idx.div_euclid(12),
            idx.rem_euclid(12) + 1,
            step * 10
        );
    }

    let labels: AreaLabels = sites
        .iter()
        .enumerate()
        .map(|(s, site)| (s as u32, area_label(site.latlon(), &line)))
        .collect();
    let stations: Vec<StationTruth> = sites
        .iter()
        .enumerate()
        .map(|(s, site)| StationTruth {
            station_id: s as u32,
            role: site.role,
            lat: site.lat.degrees(),
            lon: site.lon.degrees(),
            area: labels[&(s as u32)].clone(),
            cell_hashes: cell_hashes[s].clone(),
            planted_mean_price_eur: means[s].0,
            planted_mean_age_months: means[s].1,
            n_devices: homed[s].len() as u64,
            event_window_count: window_count[s],
            total_count: total_count[s],
        })
        .collect();
    let event_ids: Vec<u32> = stations
        .iter()
        .filter(|s| s.role != StationRole::Background)
        .map(|s| s.station_id)
        .collect();
    let (kept, removed): (Vec<u32>, Vec<u32>) = event_ids
        .iter()
        .partition(|&&s| window_count[s as usize] >= cfg.event.min_activity);
    let correlated: Vec<u32> = (0..cfg.n_stations as u32).collect();
    let planted: Vec<(f64, f64)> = correlated.iter().map(|&s| means[s as usize]).collect();
    let (show_start, show_end) = cfg.event_config().show(zone)?;

    let seeds = SeedGeometry {
        seed_station_ids: Vec::new(),
        seed_polyline: line.iter().map(|p| [p.lat, p.lon]).collect(),
        radius_m: cfg.event.buffer_radius_m,
    };
    let ground_truth = GroundTruth {
        seed: cfg.seed,
        tz: cfg.tz.clone(),
        reference: cfg.reference.clone(),
        target_rho: cfg.rho,
        planted_mean_correlation: pearson(&planted).ok(),
        correlated_station_ids: correlated,
        event_station_ids: event_ids,
        expected_kept_station_ids: kept,
        expected_removed_station_ids: removed,
        show: [show_start, show_end],
        attendance_window: [w0, w1],
        min_activity: cfg.event.min_activity,
        n_cdr_rows: rows.len() as u64,
        n_cells: cell_to_station.len() as u64,
        n_devices: devices.len() as u64,
        cell_to_station,
        devices_covered: devices.iter().filter(|d| d.covered).count() as u64,
        matched_cdrs: matched,
        unmatched_cdrs: rows.len() as u64 - matched,
        anomalous_cdrs,
        stations,
    };
    let (start, end) = cfg.period()?;
    let run = RunConfig {
        cdr: "cdr.csv".into(),
        cells: "cell.csv".into(),
        devices: "device.csv".into(),
        tacdb: "tacdb.csv".into(),
        event: "event.json".into(),
        seeds: "seeds.json".into(),
        labels: Some("areas.json".into()),
        tz: cfg.tz.clone(),
        reference: cfg.reference.clone(),
        date_range: Some([zone.format(start), zone.format(end)]),
        bin_s: 3600,
        weighting: Weighting::PerSample,
        bbox: Some(cfg.bbox),
        max_malformed_fraction: 0.01,
    };
    Ok(Scenario {
        cdr_csv,
        cell_csv,
        device_csv,
        tacdb_csv,
        event: cfg.event_config(),
        seeds,
        labels,
        run,
        ground_truth,
    })
}
