//! Single-file store for the normalized tables.
//!
//! # File layout (version 1)
//!
//! All integers are little-endian. The file is the 8-byte magic
//! `CDRSTOR\0`, a `u32` version, a `u32` section count, then that many
//! sections of `[tag: 4 bytes][len: u64][payload]`:
//!
//! | tag    | payload |
//! |--------|---------|
//! | `META` | UTF-8 JSON [`StoreMeta`] |
//! | `DEVS` | `u64 n`, then per device: `str hash`, `u8 age` (255 = unknown), `u8 gender`, `u8 customer_type`, `u8 subscription` (0 = unknown, else 1-based enum) |
//! | `CELL` | `u64 n`, then per cell: `str hash`, `i32 lat`, `i32 lon` (micro-degrees) |
//! | `STAT` | `u64 n`, then per base station: `i32 lat`, `i32 lon`, `u32 m`, `m × u32` member cell ids |
//! | `PHON` | `u64 n`, then per phone: `u32 tac`, `str brand`, `str model`, `i32 year`, `u8 month`, `f64 price_eur` |
//! | `CDRS` | `u64 n`, then columns `n × i64 ts`, `n × u32 device`, `n × u32 cell`, `n × u32 tac`, in timestamp order |
//! | `IDXD`, `IDXC`, `IDXT` | `u64 n`, `n × u32` row numbers sorted by (device, row), (cell, row), (tac, row) |
//!
//! `str` is a `u32` byte length followed by UTF-8 bytes. Readers skip
//! unknown tags. Files are written to a temporary sibling and renamed into
//! place, so a reader never sees a partially written store.

mod format;
mod table;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use table::{CdrTable, WindowQuery};

use crate::error::{Error, Result};
use crate::geo::{self, BaseStation};
use crate::ingest::{
    CdrRecord, Cell, CellTable, CustomerType, Dataset, Device, DeviceTable, Gender, IdDictionary, IngestReport,
    MicroDegrees, Subscription, Zone,
};
use crate::tac::{self, CoverageReport, PhoneProperty, PhoneTable, SesSample, YearMonth};
use format::{Reader, Writer, MAGIC, VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationCount {
    pub station_id: u32,
    pub count: u64,
}

/// Provenance of an event subset store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSubset {
    pub show_start: i64,
    pub show_end: i64,
    pub margin_s: i64,
    /// Half-open attendance window.
    pub window: (i64, i64),
    pub min_activity: u64,
    pub selected_stations: Vec<u32>,
    pub kept_stations: Vec<u32>,
    pub removed_stations: Vec<StationCount>,
    pub records_in_window: u64,
    pub records_kept: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub zone: String,
    /// True once CDR cell ids have been replaced by base station ids.
    pub keyed_by_station: bool,
    pub reference: Option<YearMonth>,
    pub ingest: Vec<IngestReport>,
    pub coverage: Option<CoverageReport>,
    pub event: Option<EventSubset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Store {
    pub meta: StoreMeta,
    pub devices: DeviceTable,
    pub cells: CellTable,
    /// Empty until cells are merged.
    pub stations: Vec<BaseStation>,
    pub phones: PhoneTable,
    cdrs: CdrTable,
}

impl Store {
    pub fn new(zone: Zone, dataset: Dataset) -> Result<Self> {
        Ok(Self {
            meta: StoreMeta {
                zone: zone.name().to_string(),
                keyed_by_station: false,
                reference: None,
                ingest: dataset.reports,
                coverage: None,
                event: None,
            },
            devices: dataset.devices,
            cells: dataset.cells,
            stations: Vec::new(),
            phones: PhoneTable::default(),
            cdrs: CdrTable::build(dataset.cdrs)?,
        })
    }

    pub fn zone(&self) -> Result<Zone> {
        self.meta.zone.parse()
    }

    pub fn cdrs(&self) -> &CdrTable {
        &self.cdrs
    }

    pub fn replace_cdrs(&mut self, records: Vec<CdrRecord>) -> Result<()> {
        self.cdrs = CdrTable::build(records)?;
        Ok(())
    }

    /// Merges co-located cells into base stations and rekeys the CDRs.
    pub fn merge_cells(&mut self) -> Result<()> {
        if self.meta.keyed_by_station {
            return Err(Error::Argument("store is already merged into base stations".into()));
        }
        let merge = geo::merge_cells(&self.cells.rows);
        let remapped = geo::remap_cdr_cells(self.cdrs.records(), &merge.cell_to_station)?;
        self.cdrs = CdrTable::build(remapped)?;
        self.stations = merge.stations;
        self.meta.keyed_by_station = true;
        Ok(())
    }

    /// Stores the phone table and the reference month, returning coverage.
    pub fn attach_phones(&mut self, phones: PhoneTable, reference: YearMonth) -> Result<CoverageReport> {
        self.require_merged()?;
        let (_, coverage) = tac::fuse(self.cdrs.records(), &phones, reference);
        self.phones = phones;
        self.meta.reference = Some(reference);
        self.meta.coverage = Some(coverage.clone());
        Ok(coverage)
    }

    pub fn require_merged(&self) -> Result<()> {
        if self.meta.keyed_by_station {
            Ok(())
        } else {
            Err(Error::Config(
                "store has not been merged into base stations (run merge-cells)".into(),
            ))
        }
    }

    pub fn station(&self, id: u32) -> Option<&BaseStation> {
        self.stations.get(id as usize).filter(|s| s.station_id == id)
    }

    /// Fused samples of every CDR in the store.
    pub fn samples(&self) -> Result<Vec<SesSample>> {
        self.require_merged()?;
        let reference = self
            .meta
            .reference
            .ok_or_else(|| Error::Config("store has no phone properties (run fuse)".into()))?;
        Ok(tac::fuse(self.cdrs.records(), &self.phones, reference).0)
    }

    pub fn query_window(&self, t0: i64, t1: i64, cells: &BTreeSet<u32>) -> Result<WindowQuery> {
        self.cdrs.query_window(t0, t1, cells)
    }

    /// Checks that every foreign key resolves.
    pub fn validate(&self) -> Result<()> {
        let n_devices = self.devices.rows.len() as u32;
        let n_cells = if self.meta.keyed_by_station {
            self.stations.len()
        } else {
            self.cells.rows.len()
        } as u32;
        if let Some(r) = self
            .cdrs
            .records()
            .iter()
            .find(|r| r.device_id >= n_devices || r.cell_id >= n_cells)
        {
            return Err(Error::Consistency(format!("dangling foreign key in {r:?}")));
        }
        for (i, s) in self.stations.iter().enumerate() {
            if s.station_id as usize != i || s.member_cell_ids.iter().any(|&c| c as usize >= self.cells.rows.len()) {
                return Err(Error::Consistency(format!("station {} is inconsistent", s.station_id)));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(9);
        w.section(b"META", |s| {
            s.bytes(&serde_json::to_vec(&self.meta).expect("metadata serializes"))
        });
        w.section(b"DEVS", |s| {
            s.u64(self.devices.rows.len() as u64);
            for (key, d) in self.devices.dict.keys().zip(&self.devices.rows) {
                s.str(key);
                s.u8(d.age.unwrap_or(u8::MAX));
                s.u8(d.gender.map_or(0, |g| g as u8 + 1));
                s.u8(d.customer_type.map_or(0, |c| c as u8 + 1));
                s.u8(d.subscription.map_or(0, |c| c as u8 + 1));
            }
        });
        w.section(b"CELL", |s| {
            s.u64(self.cells.rows.len() as u64);
            for (key, c) in self.cells.dict.keys().zip(&self.cells.rows) {
                s.str(key);
                s.i32(c.lat.0);
                s.i32(c.lon.0);
            }
        });
        w.section(b"STAT", |s| {
            s.u64(self.stations.len() as u64);
            for st in &self.stations {
                s.i32(st.lat.0);
                s.i32(st.lon.0);
                s.u32(st.member_cell_ids.len() as u32);
                s.u32s(st.member_cell_ids.iter().copied());
            }
        });
        w.section(b"PHON", |s| {
            s.u64(self.phones.len() as u64);
            for p in self.phones.rows() {
                s.u32(p.tac);
                s.str(&p.brand);
                s.str(&p.model);
                s.i32(p.release.year);
                s.u8(p.release.month as u8);
                s.f64(p.price_eur);
            }
        });
        let recs = self.cdrs.records();
        w.section(b"CDRS", |s| {
            s.u64(recs.len() as u64);
            for r in recs {
                s.i64(r.ts);
            }
            s.u32s(recs.iter().map(|r| r.device_id));
            s.u32s(recs.iter().map(|r| r.cell_id));
            s.u32s(recs.iter().map(|r| r.tac));
        });
        for (tag, idx) in [b"IDXD", b"IDXC", b"IDXT"].into_iter().zip(self.cdrs.indices()) {
            w.section(tag, |s| {
                s.u64(idx.len() as u64);
                s.u32s(idx.iter().copied());
            });
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a CDR store file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let sections = r.u32()?;

        let mut meta = None;
        let mut devices = DeviceTable::default();
        let mut cells = CellTable::default();
        let mut stations = Vec::new();
        let mut phones = Vec::new();
        let mut records = Vec::new();
        let mut indices: [Option<Vec<u32>>; 3] = [None, None, None];
        for _ in 0..sections {
            let (tag, mut s) = r.section()?;
            match &tag {
                b"META" => {
                    meta = Some(
                        serde_json::from_slice::<StoreMeta>(s.take(s.remaining())?)
                            .map_err(|e| Error::Format(format!("metadata: {e}")))?,
                    )
                }
                b"DEVS" => devices = decode_devices(&mut s)?,
                b"CELL" => cells = decode_cells(&mut s)?,
                b"STAT" => {
                    let n = s.count(12)?;
                    for station_id in 0..n as u32 {
                        let lat = MicroDegrees(s.i32()?);
                        let lon = MicroDegrees(s.i32()?);
                        let m = s.u32()? as usize;
                        stations.push(BaseStation {
                            station_id,
                            lat,
                            lon,
                            member_cell_ids: s.u32_vec(m)?,
                        });
                    }
                }
                b"PHON" => {
                    let n = s.count(21)?;
                    for _ in 0..n {
                        let tac = s.u32()?;
                        let brand = s.str()?.to_string();
                        let model = s.str()?.to_string();
                        let year = s.i32()?;
                        let month = u32::from(s.u8()?);
                        let price_eur = s.f64()?;
                        phones.push(PhoneProperty {
                            tac,
                            brand,
                            model,
                            release: YearMonth::new(year, month).map_err(|e| Error::Format(e.to_string()))?,
                            price_eur,
                        });
                    }
                }
                b"CDRS" => {
                    let n = s.count(20)?;
                    let ts = s.i64_vec(n)?;
                    let dev = s.u32_vec(n)?;
                    let cell = s.u32_vec(n)?;
                    let tac = s.u32_vec(n)?;
                    records = (0..n)
                        .map(|i| CdrRecord {
                            ts: ts[i],
                            device_id: dev[i],
                            cell_id: cell[i],
                            tac: tac[i],
                        })
                        .collect();
                }
                b"IDXD" | b"IDXC" | b"IDXT" => {
                    let slot = match &tag {
                        b"IDXD" => 0,
                        b"IDXC" => 1,
                        _ => 2,
                    };
                    let n = s.count(4)?;
                    indices[slot] = Some(s.u32_vec(n)?);
                }
                _ => {}
            }
        }
        let meta = meta.ok_or_else(|| Error::Format("store has no metadata section".into()))?;
        let [d, c, t] = indices;
        let cdrs = match (d, c, t) {
            (Some(d), Some(c), Some(t)) => CdrTable::from_parts(records, d, c, t)?,
            _ => CdrTable::build(records)?,
        };
        let store = Store {
            meta,
            devices,
            cells,
            stations,
            phones: PhoneTable::from_rows(phones).map_err(|e| Error::Format(e.to_string()))?,
            cdrs,
        };
        store.validate()?;
        Ok(store)
    }

    /// Writes the store atomically; on failure no file is left at `path`.
    pub fn persist(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::Builder::new()
            .prefix(".store-")
            .suffix(".partial")
            .tempfile_in(dir)
            .map_err(|e| Error::io(dir, e))?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let perms = std::fs::Permissions::from_mode(0o644);
            tmp.as_file()
                .set_permissions(perms)
                .map_err(|e| Error::io(tmp.path(), e))?;
        }
        tmp.write_all(&self.encode()).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn enum_from<T: Copy>(code: u8, values: &[T]) -> Result<Option<T>> {
    match code {
        0 => Ok(None),
        c => values
            .get(usize::from(c) - 1)
            .copied()
            .map(Some)
            .ok_or_else(|| Error::Format(format!("bad enum code {c}"))),
    }
}

fn decode_devices(s: &mut Reader<'_>) -> Result<DeviceTable> {
    let n = s.count(8)?;
    let mut keys = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for device_id in 0..n as u32 {
        keys.push(s.str()?);
        let age = s.u8()?;
        rows.push(Device {
            device_id,
            age: (age != u8::MAX).then_some(age),
            gender: enum_from(s.u8()?, &[Gender::Male, Gender::Female])?,
            customer_type: enum_from(s.u8()?, &[CustomerType::Individual, CustomerType::Business])?,
            subscription: enum_from(s.u8()?, &[Subscription::Prepaid, Subscription::Postpaid])?,
        });
    }
    Ok(DeviceTable {
        dict: IdDictionary::from_keys(keys)?,
        rows,
    })
}

fn decode_cells(s: &mut Reader<'_>) -> Result<CellTable> {
    let n = s.count(12)?;
    let mut keys = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for cell_id in 0..n as u32 {
        keys.push(s.str()?);
        rows.push(Cell {
            cell_id,
            lat: MicroDegrees(s.i32()?),
            lon: MicroDegrees(s.i32()?),
        });
    }
    Ok(CellTable {
        dict: IdDictionary::from_keys(keys)?,
        rows,
    })
}
