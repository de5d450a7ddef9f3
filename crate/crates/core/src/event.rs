//! Event attendance: spatial station set, time window and the minimum
//! activity rule.

use std::collections::BTreeSet;
use std::path::Path;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{parse_timestamp, CdrRecord, Zone};
use crate::store::{CdrTable, EventSubset, StationCount, Store};

pub const DEFAULT_MARGIN_S: i64 = 1800;
pub const DEFAULT_MIN_ACTIVITY: u64 = 500;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventSpec {
    pub stations: BTreeSet<u32>,
    pub t_start: i64,
    pub t_end: i64,
    pub margin_s: i64,
    pub min_activity: u64,
}

impl EventSpec {
    pub fn new(stations: BTreeSet<u32>, t_start: i64, t_end: i64) -> Result<Self> {
        let spec = Self {
            stations,
            t_start,
            t_end,
            margin_s: DEFAULT_MARGIN_S,
            min_activity: DEFAULT_MIN_ACTIVITY,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_start >= self.t_end {
            return Err(Error::Config(format!(
                "show start {} is not before show end {}",
                self.t_start, self.t_end
            )));
        }
        if self.margin_s < 0 {
            return Err(Error::Config(format!("negative margin {}", self.margin_s)));
        }
        Ok(())
    }
}

/// Half-open attendance window `[t_start - margin, t_end + margin)`.
pub fn attendance_window(spec: &EventSpec) -> (i64, i64) {
    (spec.t_start - spec.margin_s, spec.t_end + spec.margin_s)
}

/// Records at a selected station inside the attendance window, in timestamp
/// order.
pub fn filter_event(table: &CdrTable, spec: &EventSpec) -> Result<Vec<CdrRecord>> {
    spec.validate()?;
    if spec.stations.is_empty() {
        return Err(Error::Argument("event has no stations".into()));
    }
    let (w0, w1) = attendance_window(spec);
    let records = table.query_window(w0, w1, &spec.stations)?.records;
    if records.is_empty() {
        tracing::warn!(w0, w1, stations = spec.stations.len(), "no records in the event window");
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Thresholded {
    /// Ascending.
    pub kept: Vec<u32>,
    /// Ascending by station id, with the count that failed the rule.
    pub removed: Vec<StationCount>,
    pub records: Vec<CdrRecord>,
}

/// Drops every spec station with fewer than `min_activity` records.
///
/// Stations with no records at all count as zero.
pub fn apply_activity_threshold(records: &[CdrRecord], spec: &EventSpec) -> Result<Thresholded> {
    let mut counts: FxHashMap<u32, u64> = spec.stations.iter().map(|&s| (s, 0)).collect();
    for r in records {
        match counts.get_mut(&r.cell_id) {
            Some(c) => *c += 1,
            None => {
                return Err(Error::Consistency(format!(
                    "record at station {} outside the event area",
                    r.cell_id
                )))
            }
        }
    }
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for &station_id in &spec.stations {
        let count = counts[&station_id];
        if count < spec.min_activity {
            removed.push(StationCount { station_id, count });
        } else {
            kept.push(station_id);
        }
    }
    if kept.is_empty() {
        return Err(Error::DataQuality(format!(
            "all {} event stations have fewer than {} records",
            spec.stations.len(),
            spec.min_activity
        )));
    }
    if !removed.is_empty() {
        tracing::info!(
            removed = removed.len(),
            kept = kept.len(),
            "stations below the activity threshold"
        );
    }
    let keep: BTreeSet<u32> = kept.iter().copied().collect();
    let records = records.iter().filter(|r| keep.contains(&r.cell_id)).copied().collect();
    Ok(Thresholded { kept, removed, records })
}

/// Event configuration file. Times are local to `tz` (or the store zone).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventConfig {
    pub show_start: String,
    pub show_end: String,
    #[serde(default = "default_margin_min")]
    pub margin_min: i64,
    #[serde(default = "default_min_activity")]
    pub min_activity: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tz: Option<String>,
}

fn default_margin_min() -> i64 {
    DEFAULT_MARGIN_S / 60
}

fn default_min_activity() -> u64 {
    DEFAULT_MIN_ACTIVITY
}

impl EventConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Show interval in epoch seconds.
    pub fn show(&self, default_zone: Zone) -> Result<(i64, i64)> {
        let zone = match &self.tz {
            Some(tz) => tz.parse()?,
            None => default_zone,
        };
        let parse = |s: &str| parse_timestamp(s, zone).map_err(|e| Error::Config(format!("event time: {e}")));
        Ok((parse(&self.show_start)?, parse(&self.show_end)?))
    }

    pub fn spec(&self, stations: BTreeSet<u32>, default_zone: Zone) -> Result<EventSpec> {
        let (t_start, t_end) = self.show(default_zone)?;
        let spec = EventSpec {
            stations,
            t_start,
            t_end,
            margin_s: self
                .margin_min
                .checked_mul(60)
                .ok_or_else(|| Error::Config("margin overflows".into()))?,
            min_activity: self.min_activity,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Filters a merged store down to the thresholded event records.
pub fn event_subset(store: &Store, spec: &EventSpec) -> Result<Store> {
    store.require_merged()?;
    let in_window = filter_event(store.cdrs(), spec)?;
    let t = apply_activity_threshold(&in_window, spec)?;
    let mut subset = store.clone();
    subset.meta.event = Some(EventSubset {
        show_start: spec.t_start,
        show_end: spec.t_end,
        margin_s: spec.margin_s,
        window: attendance_window(spec),
        min_activity: spec.min_activity,
        selected_stations: spec.stations.iter().copied().collect(),
        kept_stations: t.kept,
        removed_stations: t.removed,
        records_in_window: in_window.len() as u64,
        records_kept: t.records.len() as u64,
    });
    subset.replace_cdrs(t.records)?;
    Ok(subset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ts(s: &str) -> i64 {
        parse_timestamp(s, Zone::BUDAPEST).unwrap()
    }

    fn show_spec(stations: &[u32]) -> EventSpec {
        EventSpec::new(
            stations.iter().copied().collect(),
            ts("2014-08-20 20:30:00"),
            ts("2014-08-20 21:00:00"),
        )
        .unwrap()
    }

    fn rec(ts: i64, cell_id: u32) -> CdrRecord {
        CdrRecord {
            ts,
            device_id: 0,
            cell_id,
            tac: 35_000_000,
        }
    }

    #[test]
    fn window_widens_show_by_margin() {
        let spec = show_spec(&[1]);
        assert_eq!(
            attendance_window(&spec),
            (ts("2014-08-20 20:00:00"), ts("2014-08-20 21:30:00"))
        );
        let zero = EventSpec {
            margin_s: 0,
            ..spec.clone()
        };
        assert_eq!(attendance_window(&zero), (spec.t_start, spec.t_end));
    }

    #[test]
    fn boundaries_are_half_open() {
        let spec = show_spec(&[1]);
        let recs = ["2014-08-20 19:59:59", "2014-08-20 20:00:00", "2014-08-20 21:30:00"].map(|s| rec(ts(s), 1));
        let table = CdrTable::build(recs.to_vec()).unwrap();
        assert_eq!(filter_event(&table, &spec).unwrap(), vec![recs[1]]);
    }

    #[test]
    fn non_selected_station_excluded() {
        let t = ts("2014-08-20 20:45:00");
        let table = CdrTable::build(vec![rec(t, 1), rec(t, 2)]).unwrap();
        assert_eq!(filter_event(&table, &show_spec(&[1])).unwrap(), vec![rec(t, 1)]);
        assert!(filter_event(&table, &show_spec(&[])).is_err());
        assert!(filter_event(&table, &show_spec(&[7])).unwrap().is_empty());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(EventSpec::new(BTreeSet::new(), 10, 10).is_err());
        let spec = EventSpec {
            margin_s: -1,
            ..show_spec(&[1])
        };
        assert!(spec.validate().is_err());
    }

    fn counts_spec(counts: &[u64], min_activity: u64) -> (Vec<CdrRecord>, EventSpec) {
        let t = ts("2014-08-20 20:45:00");
        let recs = counts
            .iter()
            .enumerate()
            .flat_map(|(s, &n)| (0..n).map(move |_| rec(t, s as u32)))
            .collect();
        let spec = EventSpec {
            min_activity,
            ..show_spec(&(0..counts.len() as u32).collect::<Vec<_>>())
        };
        (recs, spec)
    }

    #[test]
    fn threshold_boundary() {
        let (recs, spec) = counts_spec(&[499, 500], 500);
        let t = apply_activity_threshold(&recs, &spec).unwrap();
        assert_eq!(t.kept, vec![1]);
        assert_eq!(
            t.removed,
            vec![StationCount {
                station_id: 0,
                count: 499
            }]
        );
        assert_eq!(t.records.len(), 500);
    }

    #[test]
    fn threshold_mixed_counts() {
        let (recs, spec) = counts_spec(&[600, 450, 510, 12], 500);
        let t = apply_activity_threshold(&recs, &spec).unwrap();
        assert_eq!(t.kept, vec![0, 2]);
        assert_eq!(t.removed.iter().map(|s| s.count).collect::<Vec<_>>(), vec![450, 12]);
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let (recs, spec) = counts_spec(&[3, 0, 1], 0);
        let t = apply_activity_threshold(&recs, &spec).unwrap();
        assert_eq!(t.kept, vec![0, 1, 2]);
        assert!(t.removed.is_empty());
    }

    #[test]
    fn all_removed_is_fatal() {
        let (recs, spec) = counts_spec(&[10, 20], 500);
        assert!(matches!(
            apply_activity_threshold(&recs, &spec),
            Err(Error::DataQuality(_))
        ));
    }

    #[test]
    fn filter_matches_brute_force_in_any_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = ts("2014-08-20 18:00:00");
        let mut raw: Vec<CdrRecord> = (0..10_000)
            .map(|i| CdrRecord {
                ts: base + rng.gen_range(0..5 * 3600),
                device_id: i % 300,
                cell_id: rng.gen_range(0..30),
                tac: 35_000_000,
            })
            .collect();
        for _ in 0..10 {
            let stations: BTreeSet<u32> = (0..30).filter(|_| rng.gen_bool(0.4)).chain([0]).collect();
            let spec = show_spec(&stations.iter().copied().collect::<Vec<_>>());
            let (w0, w1) = attendance_window(&spec);
            let mut expected: Vec<_> = raw
                .iter()
                .filter(|r| stations.contains(&r.cell_id) && r.ts >= w0 && r.ts < w1)
                .copied()
                .collect();
            expected.sort();
            raw.shuffle(&mut rng);
            let mut got = filter_event(&CdrTable::build(raw.clone()).unwrap(), &spec).unwrap();
            got.sort();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn config_defaults_and_tz() {
        let cfg: EventConfig =
            serde_json::from_str(r#"{"show_start":"2014-08-20 20:30:00","show_end":"2014-08-20 21:00:00"}"#).unwrap();
        assert_eq!((cfg.margin_min, cfg.min_activity), (30, 500));
        let spec = cfg.spec([1].into(), Zone::BUDAPEST).unwrap();
        assert_eq!(spec.margin_s, 1800);
        assert_eq!(spec.t_start, 1408559400);
        let utc = EventConfig {
            tz: Some("UTC".into()),
            ..cfg
        };
        assert_eq!(utc.show(Zone::BUDAPEST).unwrap().0, 1408559400 + 7200);
    }

    proptest! {
        #[test]
        fn threshold_is_idempotent(counts in proptest::collection::vec(0u64..40, 1..12), min in 0u64..40) {
            let (recs, spec) = counts_spec(&counts, min);
            match apply_activity_threshold(&recs, &spec) {
                Ok(once) => {
                    let twice = apply_activity_threshold(&once.records, &spec).unwrap();
                    prop_assert_eq!(&twice.kept, &once.kept);
                    prop_assert_eq!(&twice.records, &once.records);
                    let narrowed = EventSpec { stations: once.kept.iter().copied().collect(), ..spec.clone() };
                    let again = apply_activity_threshold(&once.records, &narrowed).unwrap();
                    prop_assert!(again.removed.is_empty());
                    prop_assert_eq!(again.records, once.records);
                }
                Err(_) => prop_assert!(counts.iter().all(|&c| c < min)),
            }
        }
    }
}
