//! Parsing, cleansing and dense re-keying of the raw CDR, cell and device
//! CSV exports.
//!
//! Every data row either becomes exactly one output record or one reported
//! [`RowError`]; nothing is dropped silently. Hash identifiers are replaced
//! by dense integers assigned in first-occurrence order.

mod clean;
mod dict;
mod time;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use clean::{clean_line, truncate_coord, truncate_coord_str, truncate_decimal, MicroDegrees};
pub use dict::IdDictionary;
pub use time::{parse_naive, parse_timestamp, TimestampParser, Zone, TIMESTAMP_FORMAT};

use crate::error::{Error, Result};
use crate::par;

pub const CDR_HEADER: &str = "timestamp,device_hash,cell_hash,tac";
pub const CELL_HEADER: &str = "cell_hash,lat,lon";
pub const DEVICE_HEADER: &str = "device_hash,age,gender,customer_type,subscription";

/// How many row errors keep their full detail in a report.
const ERROR_SAMPLES: usize = 100;

/// One communication event after re-keying.
///
/// `cell_id` indexes the cell table until cells are merged into base
/// stations, after which it holds the station id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CdrRecord {
    pub ts: i64,
    pub device_id: u32,
    pub cell_id: u32,
    pub tac: u32,
}

/// A CDR row as it appears in the export, borrowed from the cleaned line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawCdrRow<'a> {
    pub timestamp: &'a str,
    pub device_hash: &'a str,
    pub cell_hash: &'a str,
    pub tac: &'a str,
}

impl<'a> RawCdrRow<'a> {
    pub fn parse(line: &'a str) -> Result<Self> {
        let mut fields = line.split(',');
        let mut next = || fields.next();
        match (next(), next(), next(), next(), next()) {
            (Some(timestamp), Some(device_hash), Some(cell_hash), Some(tac), None) => Ok(Self {
                timestamp,
                device_hash,
                cell_hash,
                tac,
            }),
            _ => Err(Error::MalformedRow(format!("expected 4 fields: {line:?}"))),
        }
    }
}

/// Validates an 8-digit type allocation code.
pub fn parse_tac(text: &str) -> Result<u32> {
    let t = text.trim();
    if t.len() != 8 || !t.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::MalformedRow(format!("TAC must be 8 digits: {text:?}")));
    }
    t.parse()
        .map_err(|_| Error::MalformedRow(format!("TAC must be 8 digits: {text:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CustomerType {
    Individual,
    Business,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subscription {
    Prepaid,
    Postpaid,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl CustomerType {
    pub fn as_str(self) -> &'static str {
        match self {
            CustomerType::Individual => "individual",
            CustomerType::Business => "business",
        }
    }
}

impl Subscription {
    pub fn as_str(self) -> &'static str {
        match self {
            Subscription::Prepaid => "prepaid",
            Subscription::Postpaid => "postpaid",
        }
    }
}

/// Subscriber attributes. Empty export fields are `None` (unknown).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Device {
    pub device_id: u32,
    pub age: Option<u8>,
    pub gender: Option<Gender>,
    pub customer_type: Option<CustomerType>,
    pub subscription: Option<Subscription>,
}

impl Device {
    pub fn unknown(device_id: u32) -> Self {
        Self {
            device_id,
            age: None,
            gender: None,
            customer_type: None,
            subscription: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub cell_id: u32,
    pub lat: MicroDegrees,
    pub lon: MicroDegrees,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceTable {
    pub dict: IdDictionary,
    pub rows: Vec<Device>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellTable {
    pub dict: IdDictionary,
    pub rows: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    /// 1-based physical line number in the source file.
    pub line: u64,
    pub reason: String,
}

/// Row accounting for one input file: `rows_in = records_out + errors`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub file: String,
    pub rows_in: u64,
    pub records_out: u64,
    pub errors: u64,
    pub out_of_range: u64,
    pub error_samples: Vec<RowError>,
}

impl IngestReport {
    fn new(file: &str) -> Self {
        Self {
            file: file.to_string(),
            ..Self::default()
        }
    }

    fn reject(&mut self, line: u64, err: &Error) {
        self.errors += 1;
        let reason = match err {
            Error::MalformedRow(m) => m.clone(),
            other => other.to_string(),
        };
        if self.error_samples.len() < ERROR_SAMPLES {
            tracing::warn!(file = %self.file, line, %reason, "rejected row");
            self.error_samples.push(RowError { line, reason });
        }
    }

    fn check_threshold(&self, max_fraction: f64) -> Result<()> {
        if self.rows_in > 0 && self.errors as f64 / self.rows_in as f64 > max_fraction {
            return Err(Error::TooManyMalformed {
                file: self.file.clone(),
                errors: self.errors,
                rows: self.rows_in,
                threshold: max_fraction,
            });
        }
        Ok(())
    }
}

/// What to do with CDR device hashes missing from the device table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownDevices {
    /// Assign a new id with unknown demographics.
    #[default]
    Intern,
    /// Reject the row.
    Reject,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub zone: Zone,
    /// Declared dataset interval `[from, to)` in epoch seconds; rows outside
    /// it are kept and counted as `out_of_range`.
    pub date_range: Option<(i64, i64)>,
    pub max_malformed_fraction: f64,
    pub unknown_devices: UnknownDevices,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            zone: Zone::BUDAPEST,
            date_range: None,
            max_malformed_fraction: 0.01,
            unknown_devices: UnknownDevices::Intern,
        }
    }
}

/// The three ingested tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub devices: DeviceTable,
    pub cells: CellTable,
    pub cdrs: Vec<CdrRecord>,
    pub reports: Vec<IngestReport>,
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
    })
}

/// Splits a file into its cleaned header and numbered, cleaned data rows.
fn split_rows<'a>(file: &str, text: &'a str, header: &str) -> Result<Vec<(u64, &'a str)>> {
    let mut lines = text.split('\n');
    let first = lines.next().map(clean_line).unwrap_or("");
    let first = first.strip_prefix('\u{feff}').unwrap_or(first);
    if first != header {
        return Err(Error::Config(format!(
            "{file}: expected header {header:?}, found {first:?}"
        )));
    }
    let mut rows: Vec<(u64, &str)> = lines.enumerate().map(|(i, l)| (i as u64 + 2, clean_line(l))).collect();
    // A terminating newline is not an extra row.
    if text.ends_with('\n') {
        rows.pop();
    }
    Ok(rows)
}

fn parse_device_row(line: &str) -> Result<(&str, Device)> {
    let fields: Vec<&str> = line.split(',').collect();
    let [hash, age, gender, customer, subscription] = fields[..] else {
        return Err(Error::MalformedRow(format!("expected 5 fields: {line:?}")));
    };
    let age = match age.trim() {
        "" => None,
        a => match a.parse::<u8>() {
            Ok(v) if v <= 120 => Some(v),
            _ => return Err(Error::MalformedRow(format!("age out of range: {a:?}"))),
        },
    };
    let gender = match gender.trim().to_ascii_lowercase().as_str() {
        "" => None,
        "male" | "m" => Some(Gender::Male),
        "female" | "f" => Some(Gender::Female),
        g => return Err(Error::MalformedRow(format!("unknown gender {g:?}"))),
    };
    let customer_type = match customer.trim().to_ascii_lowercase().as_str() {
        "" => None,
        "individual" => Some(CustomerType::Individual),
        "business" => Some(CustomerType::Business),
        c => return Err(Error::MalformedRow(format!("unknown customer type {c:?}"))),
    };
    let subscription = match subscription.trim().to_ascii_lowercase().as_str() {
        "" => None,
        "prepaid" => Some(Subscription::Prepaid),
        "postpaid" => Some(Subscription::Postpaid),
        s => return Err(Error::MalformedRow(format!("unknown subscription {s:?}"))),
    };
    Ok((
        hash.trim(),
        Device {
            device_id: 0,
            age,
            gender,
            customer_type,
            subscription,
        },
    ))
}

/// Ingests `device.csv` text.
pub fn ingest_devices_str(file: &str, text: &str, opts: &IngestOptions) -> Result<(DeviceTable, IngestReport)> {
    let rows = split_rows(file, text, DEVICE_HEADER)?;
    let mut report = IngestReport::new(file);
    let mut table = DeviceTable::default();
    for (line, row) in rows {
        report.rows_in += 1;
        let parsed = parse_device_row(row).and_then(|(hash, device)| {
            if table.dict.get(hash).is_some() {
                return Err(Error::MalformedRow(format!("duplicate device {hash:?}")));
            }
            let id = table.dict.intern(hash)?;
            Ok(Device {
                device_id: id,
                ..device
            })
        });
        match parsed {
            Ok(device) => {
                table.rows.push(device);
                report.records_out += 1;
            }
            Err(e) => report.reject(line, &e),
        }
    }
    report.check_threshold(opts.max_malformed_fraction)?;
    Ok((table, report))
}

pub fn ingest_devices(path: &Path, opts: &IngestOptions) -> Result<(DeviceTable, IngestReport)> {
    ingest_devices_str(&path.display().to_string(), &read_text(path)?, opts)
}

fn parse_cell_row(line: &str) -> Result<(&str, MicroDegrees, MicroDegrees)> {
    let fields: Vec<&str> = line.split(',').collect();
    let [hash, lat, lon] = fields[..] else {
        return Err(Error::MalformedRow(format!("expected 3 fields: {line:?}")));
    };
    let lat = MicroDegrees::parse(lat)?;
    let lon = MicroDegrees::parse(lon)?;
    if !(-90_000_000..=90_000_000).contains(&lat.0) || !(-180_000_000..=180_000_000).contains(&lon.0) {
        return Err(Error::MalformedRow(format!("coordinate out of range: {line:?}")));
    }
    Ok((hash.trim(), lat, lon))
}

/// Ingests `cell.csv` text, truncating coordinates to six decimals.
pub fn ingest_cells_str(file: &str, text: &str, opts: &IngestOptions) -> Result<(CellTable, IngestReport)> {
    let rows = split_rows(file, text, CELL_HEADER)?;
    let mut report = IngestReport::new(file);
    let mut table = CellTable::default();
    for (line, row) in rows {
        report.rows_in += 1;
        let parsed = parse_cell_row(row).and_then(|(hash, lat, lon)| {
            if table.dict.get(hash).is_some() {
                return Err(Error::MalformedRow(format!("duplicate cell {hash:?}")));
            }
            let cell_id = table.dict.intern(hash)?;
            Ok(Cell { cell_id, lat, lon })
        });
        match parsed {
            Ok(cell) => {
                table.rows.push(cell);
                report.records_out += 1;
            }
            Err(e) => report.reject(line, &e),
        }
    }
    report.check_threshold(opts.max_malformed_fraction)?;
    Ok((table, report))
}

pub fn ingest_cells(path: &Path, opts: &IngestOptions) -> Result<(CellTable, IngestReport)> {
    ingest_cells_str(&path.display().to_string(), &read_text(path)?, opts)
}

struct ParsedCdr<'a> {
    ts: i64,
    device_hash: &'a str,
    cell_hash: &'a str,
    tac: u32,
}

fn parse_cdr_chunk<'a>(rows: &[(u64, &'a str)], zone: Zone) -> Vec<Result<ParsedCdr<'a>>> {
    let mut clock = TimestampParser::new(zone);
    rows.iter()
        .map(|&(_, line)| {
            let raw = RawCdrRow::parse(line)?;
            let ts = clock.parse(raw.timestamp)?;
            let tac = parse_tac(raw.tac)?;
            let device_hash = raw.device_hash.trim();
            let cell_hash = raw.cell_hash.trim();
            if device_hash.is_empty() || cell_hash.is_empty() {
                return Err(Error::MalformedRow("empty identifier".into()));
            }
            Ok(ParsedCdr {
                ts,
                device_hash,
                cell_hash,
                tac,
            })
        })
        .collect()
}

/// Ingests `cdr.csv` text against already-ingested device and cell tables.
///
/// Field parsing runs chunk-parallel; id resolution then walks the rows in
/// file order so that newly interned devices are numbered by first
/// occurrence regardless of scheduling.
pub fn ingest_cdrs_str(
    file: &str,
    text: &str,
    devices: &mut DeviceTable,
    cells: &CellTable,
    opts: &IngestOptions,
) -> Result<(Vec<CdrRecord>, IngestReport)> {
    let rows = split_rows(file, text, CDR_HEADER)?;
    let parsed = par::map_chunks(&rows, par::CHUNK_ROWS, |chunk| parse_cdr_chunk(chunk, opts.zone));

    let mut report = IngestReport::new(file);
    let mut records = Vec::with_capacity(rows.len());
    let row_lines = rows.iter().map(|&(line, _)| line);
    for (line, result) in row_lines.zip(parsed.into_iter().flatten()) {
        report.rows_in += 1;
        let resolved = result.and_then(|p| {
            let cell_id = cells
                .dict
                .get(p.cell_hash)
                .ok_or_else(|| Error::MalformedRow(format!("unknown cell {:?}", p.cell_hash)))?;
            let device_id = match devices.dict.get(p.device_hash) {
                Some(id) => id,
                None if opts.unknown_devices == UnknownDevices::Intern => {
                    let id = devices.dict.intern(p.device_hash)?;
                    devices.rows.push(Device::unknown(id));
                    id
                }
                None => return Err(Error::MalformedRow(format!("unknown device {:?}", p.device_hash))),
            };
            Ok(CdrRecord {
                ts: p.ts,
                device_id,
                cell_id,
                tac: p.tac,
            })
        });
        match resolved {
            Ok(rec) => {
                if let Some((from, to)) = opts.date_range {
                    if rec.ts < from || rec.ts >= to {
                        if report.out_of_range < ERROR_SAMPLES as u64 {
                            tracing::warn!(file, line, ts = rec.ts, "timestamp outside dataset range");
                        }
                        report.out_of_range += 1;
                    }
                }
                records.push(rec);
                report.records_out += 1;
            }
            Err(e) => report.reject(line, &e),
        }
    }
    report.check_threshold(opts.max_malformed_fraction)?;
    Ok((records, report))
}

pub fn ingest_cdrs(
    path: &Path,
    devices: &mut DeviceTable,
    cells: &CellTable,
    opts: &IngestOptions,
) -> Result<(Vec<CdrRecord>, IngestReport)> {
    let text = read_text(path)?;
    ingest_cdrs_str(&path.display().to_string(), &text, devices, cells, opts)
}

/// Ingests devices, then cells, then CDRs.
pub fn ingest_all(cdr: &Path, cells: &Path, devices: &Path, opts: &IngestOptions) -> Result<Dataset> {
    let (mut device_table, device_report) = ingest_devices(devices, opts)?;
    let (cell_table, cell_report) = ingest_cells(cells, opts)?;
    let (cdrs, cdr_report) = ingest_cdrs(cdr, &mut device_table, &cell_table, opts)?;
    Ok(Dataset {
        devices: device_table,
        cells: cell_table,
        cdrs,
        reports: vec![device_report, cell_report, cdr_report],
    })
}
