//! Brute-force oracles the acceptance suite checks the pipeline against.
//!
//! Nothing here calls into `cdrtool-core`; each oracle recomputes its
//! answer from the raw files or from first principles.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use chrono::{NaiveDateTime, TimeZone};
use chrono_tz::Tz;
use serde_json::Value;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle distance from the chord between unit vectors.
pub fn chord_distance_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    let unit = |(lat, lon): (f64, f64)| {
        let (lat, lon) = (lat.to_radians(), lon.to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    };
    let (u, v) = (unit(a), unit(b));
    let chord = ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt();
    2.0 * EARTH_RADIUS_M * (chord / 2.0).min(1.0).asin()
}

/// Months from `from` to `to`, counted one step at a time.
pub fn months_by_enumeration(from: (i32, u32), to: (i32, u32)) -> i32 {
    let forward = from <= to;
    let (mut cur, end) = if forward { (from, to) } else { (to, from) };
    let mut n = 0;
    while cur != end {
        cur = if cur.1 == 12 {
            (cur.0 + 1, 1)
        } else {
            (cur.0, cur.1 + 1)
        };
        n += 1;
    }
    if forward {
        n
    } else {
        -n
    }
}

/// Decimal text truncated (not rounded) to millionths.
pub fn micro_units(text: &str) -> Option<i64> {
    let t = text.trim();
    let (sign, body) = t.strip_prefix('-').map_or((1, t), |b| (-1, b));
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    let frac: String = frac.chars().chain(std::iter::repeat('0')).take(6).collect();
    let digits = format!("{int}{frac}");
    if !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse::<i64>().ok().map(|v| sign * v)
}

pub fn local_epoch(text: &str, tz: Tz) -> Option<i64> {
    let naive = NaiveDateTime::parse_from_str(text, "%Y-%m-%d %H:%M:%S").ok()?;
    tz.from_local_datetime(&naive).single().map(|t| t.timestamp())
}

pub type Site = (i64, i64);

/// Event attendance recomputed from a scenario directory by linear scan.
#[derive(Debug, Default)]
pub struct EventOracle {
    pub rows: u64,
    pub errors: u64,
    pub window: (i64, i64),
    pub min_activity: u64,
    /// Records per selected site inside the window, before thresholding.
    pub in_window: BTreeMap<Site, u64>,
}

impl EventOracle {
    pub fn kept(&self) -> BTreeMap<Site, u64> {
        self.in_window
            .iter()
            .filter(|(_, &n)| n >= self.min_activity)
            .map(|(&s, &n)| (s, n))
            .collect()
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

pub fn event_oracle(dir: &Path, tz: Tz) -> EventOracle {
    let event = json(&dir.join("event.json"));
    let seeds = json(&dir.join("seeds.json"));
    let margin = event["margin_min"].as_i64().unwrap_or(30) * 60;
    let show = |k: &str| local_epoch(event[k].as_str().unwrap(), tz).unwrap();
    let window = (show("show_start") - margin, show("show_end") + margin);
    let radius = seeds["radius_m"].as_f64().unwrap_or(250.0);
    let vertices: Vec<(f64, f64)> = seeds["seed_polyline"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| (p[0].as_f64().unwrap(), p[1].as_f64().unwrap()))
        .collect();

    let mut cells: HashMap<String, Site> = HashMap::new();
    let mut rdr = csv::Reader::from_path(dir.join("cell.csv")).unwrap();
    for row in rdr.records() {
        let row = row.unwrap();
        let site = (micro_units(&row[1]).unwrap(), micro_units(&row[2]).unwrap());
        cells.insert(row[0].to_string(), site);
    }
    let selected = |&(lat, lon): &Site| {
        let p = (lat as f64 / 1e6, lon as f64 / 1e6);
        vertices.iter().any(|&v| chord_distance_m(p, v) <= radius)
    };

    let mut out = EventOracle {
        window,
        min_activity: event["min_activity"].as_u64().unwrap_or(500),
        ..Default::default()
    };
    for site in cells.values().filter(|s| selected(s)) {
        out.in_window.insert(*site, 0);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(dir.join("cdr.csv"))
        .unwrap();
    for row in rdr.records() {
        out.rows += 1;
        let Ok(row) = row else {
            out.errors += 1;
            continue;
        };
        let parsed = (row.len() == 4 && !row[1].is_empty() && row[3].parse::<u32>().is_ok())
            .then(|| local_epoch(&row[0], tz).zip(cells.get(&row[2])))
            .flatten();
        match parsed {
            None => out.errors += 1,
            Some((ts, site)) => {
                if ts >= window.0 && ts < window.1 {
                    if let Some(n) = out.in_window.get_mut(site) {
                        *n += 1;
                    }
                }
            }
        }
    }
    out
}

/// `(site, n_total)` per row of an aggregates CSV.
pub fn aggregate_totals(path: &Path) -> BTreeMap<Site, u64> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (lat, lon, n) = (col("lat"), col("lon"), col("n_total"));
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            let site = (micro_units(&r[lat]).unwrap(), micro_units(&r[lon]).unwrap());
            (site, r[n].parse().unwrap())
        })
        .collect()
}
