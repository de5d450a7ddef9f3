//! Phone-property join on type allocation code and the two socioeconomic
//! indicators derived from it: release price and handset age in months.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{parse_tac, CdrRecord, IngestReport, RowError};
use crate::par;

pub const TACDB_HEADER: [&str; 6] = ["tac", "brand", "model", "release_year", "release_month", "price_eur"];

/// A calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Argument(format!("month {month} is not in 1..=12")));
        }
        Ok(Self { year, month })
    }

    /// Months since year 0, January.
    fn ordinal(self) -> i64 {
        i64::from(self.year) * 12 + i64::from(self.month) - 1
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("expected YYYY-MM, got {s:?}"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        YearMonth::new(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Whole months from `release` to `reference`; negative when the release
/// is after the reference.
pub fn months_between(release: (i32, u32), reference: (i32, u32)) -> Result<i32> {
    let release = YearMonth::new(release.0, release.1)?;
    let reference = YearMonth::new(reference.0, reference.1)?;
    Ok(age_in_months(release, reference))
}

pub fn age_in_months(release: YearMonth, reference: YearMonth) -> i32 {
    (reference.ordinal() - release.ordinal()) as i32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneProperty {
    pub tac: u32,
    pub brand: String,
    pub model: String,
    pub release: YearMonth,
    pub price_eur: f64,
}

/// TAC-keyed phone properties.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhoneTable {
    rows: Vec<PhoneProperty>,
    by_tac: FxHashMap<u32, usize>,
}

impl PhoneTable {
    pub fn from_rows(rows: Vec<PhoneProperty>) -> Result<Self> {
        let mut table = Self::default();
        for row in rows {
            table.insert(row)?;
        }
        Ok(table)
    }

    fn insert(&mut self, row: PhoneProperty) -> Result<()> {
        if !(row.price_eur >= 0.0 && row.price_eur.is_finite()) {
            return Err(Error::MalformedRow(format!(
                "price must be non-negative: {}",
                row.price_eur
            )));
        }
        if self.by_tac.contains_key(&row.tac) {
            return Err(Error::MalformedRow(format!("duplicate TAC {:08}", row.tac)));
        }
        self.by_tac.insert(row.tac, self.rows.len());
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, tac: u32) -> Option<&PhoneProperty> {
        self.by_tac.get(&tac).map(|&i| &self.rows[i])
    }

    pub fn rows(&self) -> &[PhoneProperty] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Loads `tacdb.csv`.
    pub fn load(path: &Path, max_malformed_fraction: f64) -> Result<(Self, IngestReport)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(&path.display().to_string(), file, max_malformed_fraction)
    }

    pub fn from_reader<R: std::io::Read>(
        name: &str,
        reader: R,
        max_malformed_fraction: f64,
    ) -> Result<(Self, IngestReport)> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Config(format!("{name}: {e}")))?
            .clone();
        if header.iter().map(str::trim).ne(TACDB_HEADER) {
            return Err(Error::Config(format!(
                "{name}: expected header {:?}, found {:?}",
                TACDB_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut table = Self::default();
        let mut report = IngestReport {
            file: name.to_string(),
            ..IngestReport::default()
        };
        for (i, record) in rdr.records().enumerate() {
            report.rows_in += 1;
            let parsed = record
                .map_err(|e| Error::MalformedRow(e.to_string()))
                .and_then(|r| parse_property(&r))
                .and_then(|p| table.insert(p));
            match parsed {
                Ok(()) => report.records_out += 1,
                Err(e) => {
                    report.errors += 1;
                    if report.error_samples.len() < 100 {
                        report.error_samples.push(RowError {
                            line: i as u64 + 2,
                            reason: e.to_string(),
                        });
                    }
                }
            }
        }
        if report.rows_in > 0 && report.errors as f64 / report.rows_in as f64 > max_malformed_fraction {
            return Err(Error::TooManyMalformed {
                file: name.to_string(),
                errors: report.errors,
                rows: report.rows_in,
                threshold: max_malformed_fraction,
            });
        }
        Ok((table, report))
    }
}

fn parse_property(r: &csv::StringRecord) -> Result<PhoneProperty> {
    if r.len() != TACDB_HEADER.len() {
        return Err(Error::MalformedRow(format!("expected 6 fields, found {}", r.len())));
    }
    let field = |i: usize| r[i].trim();
    let year: i32 = field(3)
        .parse()
        .map_err(|_| Error::MalformedRow(format!("bad release year {:?}", field(3))))?;
    let month: u32 = field(4)
        .parse()
        .map_err(|_| Error::MalformedRow(format!("bad release month {:?}", field(4))))?;
    let release = YearMonth::new(year, month).map_err(|e| Error::MalformedRow(e.to_string()))?;
    let price_eur: f64 = field(5)
        .parse()
        .map_err(|_| Error::MalformedRow(format!("bad price {:?}", field(5))))?;
    Ok(PhoneProperty {
        tac: parse_tac(field(0))?,
        brand: field(1).to_string(),
        model: field(2).to_string(),
        release,
        price_eur,
    })
}

/// A CDR with its indicators attached. Indicators are absent when the TAC
/// is not in the property table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SesSample {
    pub device_id: u32,
    pub station_id: u32,
    pub ts: i64,
    pub price_eur: Option<f64>,
    pub age_months: Option<i32>,
}

impl SesSample {
    pub fn has_indicators(&self) -> bool {
        self.price_eur.is_some() && self.age_months.is_some()
    }

    pub fn is_anomalous(&self) -> bool {
        self.age_months.is_some_and(|a| a < 0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub total: u64,
    pub matched: u64,
    pub unmatched: u64,
    /// Distinct TACs with no property row, ascending.
    pub unmatched_tacs: Vec<u32>,
}

/// Attaches indicators to every CDR. `cdrs` must already carry station ids.
pub fn fuse(cdrs: &[CdrRecord], phones: &PhoneTable, reference: YearMonth) -> (Vec<SesSample>, CoverageReport) {
    let parts = par::map_chunks(cdrs, par::CHUNK_ROWS, |chunk| {
        let mut missing = BTreeSet::new();
        let samples: Vec<SesSample> = chunk
            .iter()
            .map(|r| {
                let phone = phones.get(r.tac);
                if phone.is_none() {
                    missing.insert(r.tac);
                }
                SesSample {
                    device_id: r.device_id,
                    station_id: r.cell_id,
                    ts: r.ts,
                    price_eur: phone.map(|p| p.price_eur),
                    age_months: phone.map(|p| age_in_months(p.release, reference)),
                }
            })
            .collect();
        (samples, missing)
    });

    let mut samples = Vec::with_capacity(cdrs.len());
    let mut missing = BTreeSet::new();
    for (part, miss) in parts {
        samples.extend(part);
        missing.extend(miss);
    }
    let matched = samples.iter().filter(|s| s.price_eur.is_some()).count() as u64;
    let report = CoverageReport {
        total: samples.len() as u64,
        matched,
        unmatched: samples.len() as u64 - matched,
        unmatched_tacs: missing.into_iter().collect(),
    };
    (samples, report)
}

/// Splits samples into `(valid, anomalous)`; anomalous means the handset
/// was released after the reference month.
pub fn flag_anomalies(samples: &[SesSample]) -> (Vec<SesSample>, Vec<SesSample>) {
    samples.iter().partition(|s| !s.is_anomalous())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Oracle: step one month at a time from the earlier date.
    fn enumerate_months(from: (i32, u32), to: (i32, u32)) -> i32 {
        let (mut y, mut m) = from;
        let mut n = 0;
        while (y, m) < to {
            m += 1;
            if m == 13 {
                m = 1;
                y += 1;
            }
            n += 1;
        }
        n
    }

    #[test]
    fn month_examples() {
        assert_eq!(months_between((2014, 8), (2014, 8)).unwrap(), 0);
        assert_eq!(months_between((2013, 8), (2014, 8)).unwrap(), 12);
        assert_eq!(enumerate_months((2012, 5), (2014, 8)), 27);
        assert_eq!(months_between((2012, 5), (2014, 8)).unwrap(), 27);
        assert_eq!(months_between((2014, 9), (2014, 8)).unwrap(), -1);
        assert!(months_between((2014, 13), (2014, 8)).is_err());
        assert!(months_between((2014, 1), (2014, 0)).is_err());
    }

    proptest! {
        #[test]
        fn months_between_antisymmetric(y1 in 1990i32..2030, m1 in 1u32..=12, y2 in 1990i32..2030, m2 in 1u32..=12) {
            let a = months_between((y1, m1), (y2, m2)).unwrap();
            let b = months_between((y2, m2), (y1, m1)).unwrap();
            prop_assert_eq!(a, -b);
            if (y1, m1) <= (y2, m2) {
                prop_assert_eq!(a, enumerate_months((y1, m1), (y2, m2)));
            }
        }
    }

    #[test]
    fn year_month_parse() {
        assert_eq!(
            "2014-08".parse::<YearMonth>().unwrap(),
            YearMonth { year: 2014, month: 8 }
        );
        assert!("2014-13".parse::<YearMonth>().is_err());
        assert!("201408".parse::<YearMonth>().is_err());
        assert_eq!(YearMonth::new(2014, 8).unwrap().to_string(), "2014-08");
    }

    fn table() -> PhoneTable {
        let csv = "tac,brand,model,release_year,release_month,price_eur\n\
                   35000001,Acme,\"One, Plus\",2014,6,500\n\
                   35000002,Acme,Two,2014,10,300.5\n";
        let (t, rep) = PhoneTable::from_reader("tacdb.csv", csv.as_bytes(), 0.0).unwrap();
        assert_eq!(rep.errors, 0);
        t
    }

    fn cdr(tac: u32) -> CdrRecord {
        CdrRecord {
            ts: 100,
            device_id: 3,
            cell_id: 5,
            tac,
        }
    }

    #[test]
    fn direct_join() {
        let t = table();
        assert_eq!(t.get(35000001).unwrap().model, "One, Plus");
        let reference = YearMonth::new(2014, 8).unwrap();
        let (s, rep) = fuse(&[cdr(35000001), cdr(99999999)], &t, reference);
        assert_eq!(s[0].price_eur, Some(500.0));
        assert_eq!(s[0].age_months, Some(2));
        assert_eq!(s[0].station_id, 5);
        assert!(!s[1].has_indicators());
        assert_eq!((rep.matched, rep.unmatched), (1, 1));
        assert_eq!(rep.unmatched_tacs, vec![99999999]);
    }

    #[test]
    fn anomaly_partition() {
        let t = table();
        let reference = YearMonth::new(2014, 8).unwrap();
        let (s, _) = fuse(&[cdr(35000001), cdr(35000002), cdr(1)], &t, reference);
        assert_eq!(s[1].age_months, Some(-2));
        let (valid, anomalous) = flag_anomalies(&s);
        assert_eq!(valid.len(), 2);
        assert_eq!(anomalous.len(), 1);

        let boundary = SesSample {
            age_months: Some(0),
            ..s[0]
        };
        assert!(!boundary.is_anomalous());
        let before = SesSample {
            age_months: Some(-1),
            ..s[0]
        };
        assert!(before.is_anomalous());
    }

    #[test]
    fn bad_property_rows_reported() {
        let csv = "tac,brand,model,release_year,release_month,price_eur\n\
                   35000001,A,B,2014,13,1\n\
                   35000002,A,B,2014,1,-5\n\
                   35000003,A,B,2014,1,5\n\
                   35000003,A,B,2014,1,5\n\
                   3500,A,B,2014,1,5\n";
        let (t, rep) = PhoneTable::from_reader("tacdb.csv", csv.as_bytes(), 1.0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(rep.errors, 4);
        assert!(PhoneTable::from_reader("tacdb.csv", csv.as_bytes(), 0.5).is_err());
        assert!(PhoneTable::from_reader("x", "a,b\n".as_bytes(), 1.0).is_err());
    }

    #[test]
    fn fusion_is_total_and_deterministic() {
        let t = table();
        let reference = YearMonth::new(2014, 8).unwrap();
        let cdrs: Vec<CdrRecord> = (0..200_000u32)
            .map(|i| CdrRecord {
                ts: i64::from(i),
                device_id: i % 97,
                cell_id: i % 13,
                tac: 35000000 + i % 4,
            })
            .collect();
        let (a, ra) = fuse(&cdrs, &t, reference);
        let (b, rb) = fuse(&cdrs, &t, reference);
        assert_eq!(a.len(), cdrs.len());
        assert_eq!(ra.matched + ra.unmatched, cdrs.len() as u64);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.unmatched_tacs, vec![35000000, 35000003]);
    }
}
