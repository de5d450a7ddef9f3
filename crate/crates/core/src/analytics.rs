//! Per-station SES aggregates, activity time series and Pearson correlation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::BaseStation;
use crate::ingest::{CdrRecord, DeviceTable, Gender, MicroDegrees};
use crate::par;
use crate::tac::SesSample;

/// Decade buckets `0-9` through `110-120`; the last one also holds 120.
pub const AGE_BUCKETS: usize = 12;

/// How samples are weighted in the station means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Every CDR contributes once.
    #[default]
    PerSample,
    /// Each device contributes its earliest valid sample at the station.
    PerDevice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationAggregate {
    pub station_id: u32,
    pub lat: MicroDegrees,
    pub lon: MicroDegrees,
    /// All records, including unmatched and anomalous ones.
    pub n_total: u64,
    /// Samples entering the means.
    pub n_with_ses: u64,
    pub n_anomalous: u64,
    /// Distinct devices seen at the station.
    pub n_devices: u64,
    pub mean_price_eur: Option<f64>,
    pub mean_age_months: Option<f64>,
    /// Male, female, unknown; over distinct devices.
    pub gender: [u64; 3],
    /// Decade buckets then unknown; over distinct devices.
    pub age_histogram: [u64; AGE_BUCKETS + 1],
}

#[derive(Default, Clone, Copy)]
struct Partial {
    n_total: u64,
    n_ses: u64,
    n_anomalous: u64,
    sum_price: f64,
    sum_age: f64,
}

impl Partial {
    fn add_indicators(&mut self, price: f64, age: i32) {
        self.n_ses += 1;
        self.sum_price += price;
        self.sum_age += f64::from(age);
    }

    fn merge(&mut self, o: &Partial) {
        self.n_total += o.n_total;
        self.n_ses += o.n_ses;
        self.n_anomalous += o.n_anomalous;
        self.sum_price += o.sum_price;
        self.sum_age += o.sum_age;
    }
}

fn valid_indicators(s: &SesSample) -> Option<(f64, i32)> {
    match (s.price_eur, s.age_months) {
        (Some(p), Some(a)) if a >= 0 => Some((p, a)),
        _ => None,
    }
}

/// Aggregates one row per station in `stations`, including stations without
/// samples. Anomalous and unmatched samples count toward `n_total` only.
pub fn aggregate_station(
    samples: &[SesSample],
    stations: &[&BaseStation],
    devices: &DeviceTable,
    weighting: Weighting,
) -> Result<Vec<StationAggregate>> {
    let slot: FxHashMap<u32, usize> = stations.iter().enumerate().map(|(i, s)| (s.station_id, i)).collect();
    if slot.len() != stations.len() {
        return Err(Error::Argument("duplicate station in aggregation list".into()));
    }
    let n = stations.len();

    let parts = par::map_chunks(
        samples,
        par::CHUNK_ROWS,
        |chunk| -> Result<(Vec<Partial>, Vec<(u32, u32)>)> {
            let mut acc = vec![Partial::default(); n];
            let mut pairs = Vec::with_capacity(chunk.len());
            for s in chunk {
                let i = *slot
                    .get(&s.station_id)
                    .ok_or_else(|| Error::Consistency(format!("sample at unlisted station {}", s.station_id)))?;
                let p = &mut acc[i];
                p.n_total += 1;
                if s.is_anomalous() {
                    p.n_anomalous += 1;
                }
                if weighting == Weighting::PerSample {
                    if let Some((price, age)) = valid_indicators(s) {
                        p.add_indicators(price, age);
                    }
                }
                pairs.push((i as u32, s.device_id));
            }
            pairs.sort_unstable();
            pairs.dedup();
            Ok((acc, pairs))
        },
    );

    let mut acc = vec![Partial::default(); n];
    let mut pairs = Vec::new();
    for part in parts {
        let (p, d) = part?;
        for (a, b) in acc.iter_mut().zip(&p) {
            a.merge(b);
        }
        pairs.extend(d);
    }
    pairs.sort_unstable();
    pairs.dedup();

    if weighting == Weighting::PerDevice {
        // Earliest valid sample per (station, device), ties by input order.
        let mut first: BTreeMap<(u32, u32), (i64, f64, i32)> = BTreeMap::new();
        for s in samples {
            if let Some((price, age)) = valid_indicators(s) {
                let key = (slot[&s.station_id] as u32, s.device_id);
                first
                    .entry(key)
                    .and_modify(|e| {
                        if s.ts < e.0 {
                            *e = (s.ts, price, age)
                        }
                    })
                    .or_insert((s.ts, price, age));
            }
        }
        for (&(i, _), &(_, price, age)) in &first {
            acc[i as usize].add_indicators(price, age);
        }
    }

    let mut out: Vec<StationAggregate> = stations
        .iter()
        .zip(&acc)
        .map(|(st, p)| {
            let mean = |sum: f64| (p.n_ses > 0).then(|| sum / p.n_ses as f64);
            StationAggregate {
                station_id: st.station_id,
                lat: st.lat,
                lon: st.lon,
                n_total: p.n_total,
                n_with_ses: p.n_ses,
                n_anomalous: p.n_anomalous,
                n_devices: 0,
                mean_price_eur: mean(p.sum_price),
                mean_age_months: mean(p.sum_age),
                gender: [0; 3],
                age_histogram: [0; AGE_BUCKETS + 1],
            }
        })
        .collect();
    for (i, device_id) in pairs {
        let device = devices
            .rows
            .get(device_id as usize)
            .ok_or_else(|| Error::Consistency(format!("unknown device {device_id}")))?;
        let a = &mut out[i as usize];
        a.n_devices += 1;
        a.gender[match device.gender {
            Some(Gender::Male) => 0,
            Some(Gender::Female) => 1,
            None => 2,
        }] += 1;
        a.age_histogram[device
            .age
            .map_or(AGE_BUCKETS, |y| usize::from(y / 10).min(AGE_BUCKETS - 1))] += 1;
    }
    Ok(out)
}

pub fn aggregates_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "station_id",
        "lat",
        "lon",
        "n_total",
        "n_with_ses",
        "n_anomalous",
        "n_devices",
        "mean_price_eur",
        "mean_age_months",
        "gender_male",
        "gender_female",
        "gender_unknown",
    ]
    .map(String::from)
    .into();
    h.extend((0..AGE_BUCKETS).map(|b| {
        let hi = if b + 1 == AGE_BUCKETS { b * 10 + 10 } else { b * 10 + 9 };
        format!("age_{}_{hi}", b * 10)
    }));
    h.push("age_unknown".into());
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_aggregates<W: Write>(out: W, rows: &[StationAggregate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::Format(format!("writing aggregates: {e}"));
    w.write_record(aggregates_header()).map_err(wrap)?;
    for a in rows {
        let mut rec = vec![
            a.station_id.to_string(),
            a.lat.to_string(),
            a.lon.to_string(),
            a.n_total.to_string(),
            a.n_with_ses.to_string(),
            a.n_anomalous.to_string(),
            a.n_devices.to_string(),
            opt(a.mean_price_eur),
            opt(a.mean_age_months),
        ];
        rec.extend(a.gender.iter().chain(&a.age_histogram).map(u64::to_string));
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush()
        .map_err(|e| Error::Format(format!("writing aggregates: {e}")))?;
    Ok(())
}

pub fn read_aggregates<R: Read>(input: R) -> Result<Vec<StationAggregate>> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |msg: String| Error::Config(format!("aggregates: {msg}"));
    let header: Vec<String> = r
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != aggregates_header() {
        return Err(bad("unexpected header".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let int = |i: usize| field(i).parse::<u64>().map_err(|e| bad(format!("{:?}: {e}", field(i))));
        let float = |i: usize| match field(i) {
            "" => Ok(None),
            s => s.parse::<f64>().map(Some).map_err(|e| bad(format!("{s:?}: {e}"))),
        };
        let mut gender = [0; 3];
        for (k, g) in gender.iter_mut().enumerate() {
            *g = int(9 + k)?;
        }
        let mut age_histogram = [0; AGE_BUCKETS + 1];
        for (k, a) in age_histogram.iter_mut().enumerate() {
            *a = int(12 + k)?;
        }
        out.push(StationAggregate {
            station_id: int(0)? as u32,
            lat: MicroDegrees::parse(field(1)).map_err(|e| bad(e.to_string()))?,
            lon: MicroDegrees::parse(field(2)).map_err(|e| bad(e.to_string()))?,
            n_total: int(3)?,
            n_with_ses: int(4)?,
            n_anomalous: int(5)?,
            n_devices: int(6)?,
            mean_price_eur: float(7)?,
            mean_age_months: float(8)?,
            gender,
            age_histogram,
        });
    }
    Ok(out)
}

pub fn load_aggregates(path: &Path) -> Result<Vec<StationAggregate>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_aggregates(std::io::BufReader::new(f))
}

/// Record counts in bins of `bin_width_s` starting at `bin_start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub bin_start: i64,
    pub bin_width_s: i64,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivitySeries {
    pub pooled: TimeSeries,
    pub stations: BTreeMap<u32, TimeSeries>,
}

/// Hourly (or other) activity per station and pooled.
///
/// Without `range` the bins cover the records, aligned to multiples of the
/// bin width. With `range = [from, to)` only records inside it are counted.
pub fn activity_series(records: &[CdrRecord], bin_width_s: i64, range: Option<(i64, i64)>) -> Result<ActivitySeries> {
    if bin_width_s <= 0 {
        return Err(Error::Argument(format!(
            "bin width must be positive, got {bin_width_s}"
        )));
    }
    let (from, to) = match range {
        Some((a, b)) if a < b => (a, b),
        Some((a, b)) => return Err(Error::Argument(format!("empty series range [{a}, {b})"))),
        None => match (records.iter().map(|r| r.ts).min(), records.iter().map(|r| r.ts).max()) {
            (Some(lo), Some(hi)) => (lo.div_euclid(bin_width_s) * bin_width_s, hi + 1),
            _ => (0, 0),
        },
    };
    let n_bins = if to > from {
        ((to - from) + bin_width_s - 1) / bin_width_s
    } else {
        0
    } as usize;
    let empty = || TimeSeries {
        bin_start: from,
        bin_width_s,
        counts: vec![0; n_bins],
    };

    let parts = par::map_chunks(records, par::CHUNK_ROWS, |chunk| {
        let mut pooled = vec![0u64; n_bins];
        let mut per: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
        for r in chunk.iter().filter(|r| r.ts >= from && r.ts < to) {
            let b = ((r.ts - from) / bin_width_s) as usize;
            pooled[b] += 1;
            per.entry(r.cell_id).or_insert_with(|| vec![0; n_bins])[b] += 1;
        }
        (pooled, per)
    });
    let mut out = ActivitySeries {
        pooled: empty(),
        stations: BTreeMap::new(),
    };
    for (pooled, per) in parts {
        for (a, b) in out.pooled.counts.iter_mut().zip(pooled) {
            *a += b;
        }
        for (station, counts) in per {
            let s = out.stations.entry(station).or_insert_with(empty);
            for (a, b) in s.counts.iter_mut().zip(counts) {
                *a += b;
            }
        }
    }
    Ok(out)
}

/// Long format: `bin_start,series,count`, pooled series named `all`.
pub fn write_series<W: Write>(out: W, series: &ActivitySeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::Format(format!("writing series: {e}"));
    w.write_record(["bin_start", "series", "count"]).map_err(wrap)?;
    let named = std::iter::once(("all".to_string(), &series.pooled))
        .chain(series.stations.iter().map(|(id, s)| (id.to_string(), s)));
    for (name, s) in named {
        for (i, c) in s.counts.iter().enumerate() {
            let start = s.bin_start + i as i64 * s.bin_width_s;
            w.write_record([start.to_string(), name.clone(), c.to_string()])
                .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::Format(format!("writing series: {e}")))?;
    Ok(())
}

/// Reads long-format series back, keyed by series name.
pub fn read_series<R: Read>(input: R) -> Result<BTreeMap<String, TimeSeries>> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |msg: String| Error::Config(format!("series: {msg}"));
    let mut points: BTreeMap<String, Vec<(i64, u64)>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let (Some(t), Some(name), Some(c)) = (rec.get(0), rec.get(1), rec.get(2)) else {
            return Err(bad("expected bin_start,series,count".into()));
        };
        let t = t.parse::<i64>().map_err(|e| bad(e.to_string()))?;
        let c = c.parse::<u64>().map_err(|e| bad(e.to_string()))?;
        points.entry(name.to_string()).or_default().push((t, c));
    }
    points
        .into_iter()
        .map(|(name, mut pts)| {
            pts.sort_unstable();
            let width = if pts.len() > 1 { pts[1].0 - pts[0].0 } else { 1 };
            if width <= 0 || pts.windows(2).any(|w| w[1].0 - w[0].0 != width) {
                return Err(bad(format!("series {name} is not evenly binned")));
            }
            let series = TimeSeries {
                bin_start: pts[0].0,
                bin_width_s: width,
                counts: pts.iter().map(|p| p.1).collect(),
            };
            Ok((name, series))
        })
        .collect()
}

/// Sample Pearson correlation coefficient.
pub fn pearson(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Argument(format!(
            "pearson needs at least 2 points, got {}",
            points.len()
        )));
    }
    let (x0, y0) = points[0];
    if points.iter().all(|p| p.0 == x0) || points.iter().all(|p| p.1 == y0) {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub station_id: u32,
    pub area: String,
    pub mean_price_eur: f64,
    pub mean_age_months: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub r: f64,
    pub n: usize,
    pub n_excluded: usize,
    pub excluded_station_ids: Vec<u32>,
    pub points: Vec<CorrelationPoint>,
}

/// Station id to area label, as stored in the labels file.
pub type AreaLabels = BTreeMap<u32, String>;

pub fn load_labels(path: &Path) -> Result<AreaLabels> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Price-age correlation over stations that have both means.
pub fn correlation_report(aggregates: &[StationAggregate], labels: &AreaLabels) -> Result<CorrelationReport> {
    let mut points = Vec::new();
    let mut excluded = Vec::new();
    let mut seen = BTreeSet::new();
    for a in aggregates {
        if !seen.insert(a.station_id) {
            return Err(Error::Consistency(format!("station {} aggregated twice", a.station_id)));
        }
        match (a.mean_price_eur, a.mean_age_months) {
            (Some(p), Some(m)) => points.push(CorrelationPoint {
                station_id: a.station_id,
                area: labels.get(&a.station_id).cloned().unwrap_or_default(),
                mean_price_eur: p,
                mean_age_months: m,
            }),
            _ => excluded.push(a.station_id),
        }
    }
    if points.len() < 2 {
        return Err(Error::DataQuality(format!(
            "only {} station(s) have SES means; correlation needs 2",
            points.len()
        )));
    }
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.mean_price_eur, p.mean_age_months)).collect();
    Ok(CorrelationReport {
        r: pearson(&xy)?,
        n: points.len(),
        n_excluded: excluded.len(),
        excluded_station_ids: excluded,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{CustomerType, Device, IdDictionary};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn station(id: u32) -> BaseStation {
        BaseStation {
            station_id: id,
            lat: MicroDegrees(47_500_000 + id as i32),
            lon: MicroDegrees(19_050_000),
            member_cell_ids: vec![id],
        }
    }

    fn devices(n: u32) -> DeviceTable {
        DeviceTable {
            dict: IdDictionary::from_keys((0..n).map(|i| format!("d{i}"))).unwrap(),
            rows: (0..n)
                .map(|i| Device {
                    device_id: i,
                    age: (i % 3 != 0).then_some((i * 7 % 100) as u8),
                    gender: [Some(Gender::Male), Some(Gender::Female), None][i as usize % 3],
                    customer_type: Some(CustomerType::Individual),
                    subscription: None,
                })
                .collect(),
        }
    }

    fn sample(device_id: u32, station_id: u32, price: Option<f64>, age: Option<i32>) -> SesSample {
        SesSample {
            device_id,
            station_id,
            ts: 0,
            price_eur: price,
            age_months: age,
        }
    }

    #[test]
    fn arithmetic_mean() {
        let st = [station(0)];
        let refs: Vec<_> = st.iter().collect();
        let s = [sample(0, 0, Some(400.0), Some(10)), sample(1, 0, Some(600.0), Some(20))];
        let a = &aggregate_station(&s, &refs, &devices(2), Weighting::PerSample).unwrap()[0];
        assert_eq!(a.mean_price_eur, Some(500.0));
        assert_eq!(a.mean_age_months, Some(15.0));
        assert_eq!((a.n_total, a.n_with_ses, a.n_devices), (2, 2, 2));
    }

    #[test]
    fn unmatched_only_has_no_means() {
        let st = [station(0), station(1)];
        let refs: Vec<_> = st.iter().collect();
        let s = [sample(0, 0, None, None), sample(0, 0, Some(100.0), Some(-3))];
        let out = aggregate_station(&s, &refs, &devices(1), Weighting::PerSample).unwrap();
        assert_eq!((out[0].n_total, out[0].n_with_ses, out[0].n_anomalous), (2, 0, 1));
        assert_eq!(out[0].mean_price_eur, None);
        assert_eq!(out[0].mean_age_months, None);
        assert_eq!(out[1].n_total, 0);
    }

    #[test]
    fn demographics_count_distinct_devices() {
        let st = [station(0)];
        let refs: Vec<_> = st.iter().collect();
        let s = [
            sample(1, 0, None, None),
            sample(1, 0, None, None),
            sample(3, 0, None, None),
        ];
        let a = &aggregate_station(&s, &refs, &devices(4), Weighting::PerSample).unwrap()[0];
        assert_eq!(a.n_devices, 2);
        // Device 1: female, age 7; device 3: male, unknown age.
        assert_eq!(a.gender, [1, 1, 0]);
        assert_eq!(a.age_histogram[0], 1);
        assert_eq!(a.age_histogram[AGE_BUCKETS], 1);
    }

    #[test]
    fn per_device_takes_earliest() {
        let st = [station(0)];
        let refs: Vec<_> = st.iter().collect();
        let mut s = vec![
            sample(0, 0, Some(100.0), Some(1)),
            sample(0, 0, Some(300.0), Some(3)),
            sample(1, 0, Some(500.0), Some(5)),
        ];
        s[0].ts = 10;
        s[1].ts = 5;
        let a = &aggregate_station(&s, &refs, &devices(2), Weighting::PerDevice).unwrap()[0];
        assert_eq!(a.n_with_ses, 2);
        assert_eq!(a.mean_price_eur, Some(400.0));
        assert_eq!(a.n_total, 3);
    }

    #[test]
    fn unlisted_station_is_an_error() {
        let st = [station(0)];
        let refs: Vec<_> = st.iter().collect();
        assert!(aggregate_station(&[sample(0, 5, None, None)], &refs, &devices(1), Weighting::PerSample).is_err());
    }

    fn random_samples(n: usize, stations: u32, seed: u64) -> Vec<SesSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let matched = rng.gen_bool(0.9);
                SesSample {
                    device_id: rng.gen_range(0..50),
                    station_id: rng.gen_range(0..stations),
                    ts: i as i64,
                    price_eur: matched.then(|| rng.gen_range(50.0..900.0)),
                    age_months: matched.then(|| rng.gen_range(-5..90)),
                }
            })
            .collect()
    }

    #[test]
    fn means_match_brute_force() {
        let st: Vec<_> = (0..7).map(station).collect();
        let refs: Vec<_> = st.iter().collect();
        let samples = random_samples(200_000, 7, 1);
        let out = aggregate_station(&samples, &refs, &devices(50), Weighting::PerSample).unwrap();
        assert_eq!(out.iter().map(|a| a.n_total).sum::<u64>(), 200_000);
        for a in &out {
            let mine: Vec<_> = samples
                .iter()
                .filter(|s| s.station_id == a.station_id && s.age_months.is_some_and(|m| m >= 0))
                .collect();
            let p = mine.iter().map(|s| s.price_eur.unwrap()).sum::<f64>() / mine.len() as f64;
            let m = mine.iter().map(|s| s.age_months.unwrap() as f64).sum::<f64>() / mine.len() as f64;
            assert_eq!(a.n_with_ses as usize, mine.len());
            assert!((a.mean_price_eur.unwrap() - p).abs() <= 1e-9 * p.abs());
            assert!((a.mean_age_months.unwrap() - m).abs() <= 1e-9 * m.abs());
        }
    }

    #[test]
    fn csv_round_trip() {
        let st: Vec<_> = (0..4).map(station).collect();
        let refs: Vec<_> = st.iter().collect();
        let out = aggregate_station(&random_samples(1000, 3, 2), &refs, &devices(50), Weighting::PerSample).unwrap();
        let mut buf = Vec::new();
        write_aggregates(&mut buf, &out).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("station_id,lat,lon,n_total,n_with_ses,"));
        assert_eq!(read_aggregates(&buf[..]).unwrap(), out);
        assert!(read_aggregates(&b"a,b\n1,2\n"[..]).is_err());
    }

    fn recs(ts: &[i64]) -> Vec<CdrRecord> {
        ts.iter()
            .map(|&ts| CdrRecord {
                ts,
                device_id: 0,
                cell_id: (ts % 3) as u32,
                tac: 0,
            })
            .collect()
    }

    #[test]
    fn series_single_bin() {
        let s = activity_series(&recs(&(7200..7210).collect::<Vec<_>>()), 3600, None).unwrap();
        assert_eq!(s.pooled.counts, vec![10]);
        assert_eq!(s.pooled.bin_start, 7200);
    }

    #[test]
    fn series_empty_is_zero() {
        let s = activity_series(&[], 3600, Some((0, 86_400))).unwrap();
        assert_eq!(s.pooled.counts, vec![0; 24]);
        assert!(activity_series(&[], 3600, None).unwrap().pooled.counts.is_empty());
        assert!(activity_series(&[], 0, None).is_err());
    }

    #[test]
    fn series_csv_round_trip() {
        let s = activity_series(&recs(&[0, 5, 3600, 7300, 7301]), 3600, None).unwrap();
        let mut buf = Vec::new();
        write_series(&mut buf, &s).unwrap();
        let back = read_series(&buf[..]).unwrap();
        assert_eq!(back["all"], s.pooled);
        assert_eq!(back["1"], s.stations[&1]);
    }

    proptest! {
        #[test]
        fn series_conserves_records(ts in proptest::collection::vec(-100_000i64..100_000, 0..300), w in 1i64..5000) {
            let r = recs(&ts);
            let s = activity_series(&r, w, None).unwrap();
            prop_assert_eq!(s.pooled.counts.iter().sum::<u64>(), ts.len() as u64);
            let per: u64 = s.stations.values().flat_map(|t| t.counts.iter()).sum();
            prop_assert_eq!(per, ts.len() as u64);
            let ranged = activity_series(&r, w, Some((-50_000, 50_000))).unwrap();
            let inside = ts.iter().filter(|&&t| (-50_000..50_000).contains(&t)).count() as u64;
            prop_assert_eq!(ranged.pooled.counts.iter().sum::<u64>(), inside);
        }
    }

    #[test]
    fn pearson_exact_cases() {
        assert_eq!(pearson(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]).unwrap(), 1.0);
        assert_eq!(pearson(&[(1.0, 3.0), (2.0, 2.0), (3.0, 1.0)]).unwrap(), -1.0);
        // Closed form: sxy = 5.5, sxx = 5, syy = 8.75.
        let r = pearson(&[(1.0, 1.0), (2.0, 3.0), (3.0, 2.0), (4.0, 5.0)]).unwrap();
        assert!((r - 5.5 / (5.0f64 * 8.75).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(pearson(&[(1.0, 1.0)]), Err(Error::Argument(_))));
        assert!(matches!(
            pearson(&[(1.0, 1.0), (1.0, 2.0)]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            pearson(&[(0.1, 1.0), (0.2, 1.0)]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    fn agg(id: u32, p: Option<f64>, m: Option<f64>) -> StationAggregate {
        StationAggregate {
            station_id: id,
            lat: MicroDegrees(0),
            lon: MicroDegrees(0),
            n_total: 1,
            n_with_ses: u64::from(p.is_some()),
            n_anomalous: 0,
            n_devices: 1,
            mean_price_eur: p,
            mean_age_months: m,
            gender: [0; 3],
            age_histogram: [0; AGE_BUCKETS + 1],
        }
    }

    #[test]
    fn report_two_points_and_exclusions() {
        let labels: AreaLabels = [(0, "Buda".to_string())].into();
        let rep = correlation_report(
            &[
                agg(0, Some(500.0), Some(10.0)),
                agg(1, Some(300.0), Some(30.0)),
                agg(2, None, None),
            ],
            &labels,
        )
        .unwrap();
        assert_eq!(rep.r, -1.0);
        assert_eq!((rep.n, rep.n_excluded), (2, 1));
        assert_eq!(rep.points[0].area, "Buda");
        assert_eq!(rep.points[1].area, "");
        assert!(correlation_report(&[agg(0, Some(1.0), Some(1.0))], &labels).is_err());
        let same = [agg(0, Some(1.0), Some(2.0)), agg(1, Some(1.0), Some(2.0))];
        assert!(matches!(
            correlation_report(&same, &labels),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    proptest! {
        #[test]
        fn pearson_bounded_and_affine_invariant(
            pts in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..60),
            a in 0.01f64..100.0, b in -1e3f64..1e3, c in 0.01f64..100.0, d in -1e3f64..1e3,
        ) {
            if let Ok(r) = pearson(&pts) {
                prop_assert!(r.abs() <= 1.0 + 1e-12);
                let t: Vec<_> = pts.iter().map(|&(x, y)| (a * x + b, c * y + d)).collect();
                prop_assert!((pearson(&t).unwrap() - r).abs() <= 1e-9);
                let f: Vec<_> = pts.iter().map(|&(x, y)| (-x, y)).collect();
                prop_assert!((pearson(&f).unwrap() + r).abs() <= 1e-12);
            }
        }
    }
}
