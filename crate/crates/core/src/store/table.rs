use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::ingest::CdrRecord;

/// CDR rows clustered by timestamp, with secondary indices on device, cell
/// and TAC.
///
/// Each secondary index is a permutation of row numbers sorted by
/// `(key, row)`, so equality and range lookups are two binary searches.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CdrTable {
    records: Vec<CdrRecord>,
    by_device: Vec<u32>,
    by_cell: Vec<u32>,
    by_tac: Vec<u32>,
}

/// Result of a window query with the number of rows it had to look at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowQuery {
    pub records: Vec<CdrRecord>,
    pub rows_scanned: u64,
}

fn permutation<K: Ord + Copy>(records: &[CdrRecord], key: impl Fn(&CdrRecord) -> K) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..records.len() as u32).collect();
    idx.sort_unstable_by_key(|&i| (key(&records[i as usize]), i));
    idx
}

impl CdrTable {
    /// Sorts `records` by timestamp (stable) and builds the indices.
    pub fn build(mut records: Vec<CdrRecord>) -> Result<Self> {
        if u32::try_from(records.len()).is_err() {
            return Err(Error::Argument("more than 2^32 CDR rows".into()));
        }
        records.sort_by_key(|r| r.ts);
        let by_device = permutation(&records, |r| r.device_id);
        let by_cell = permutation(&records, |r| r.cell_id);
        let by_tac = permutation(&records, |r| r.tac);
        Ok(Self {
            records,
            by_device,
            by_cell,
            by_tac,
        })
    }

    /// Reassembles a table from persisted parts, checking index integrity.
    pub(crate) fn from_parts(
        records: Vec<CdrRecord>,
        by_device: Vec<u32>,
        by_cell: Vec<u32>,
        by_tac: Vec<u32>,
    ) -> Result<Self> {
        let n = records.len();
        if records.windows(2).any(|w| w[0].ts > w[1].ts) {
            return Err(Error::Format("CDR rows are not in timestamp order".into()));
        }
        let check = |idx: &[u32], key: &dyn Fn(&CdrRecord) -> u32, name: &str| -> Result<()> {
            let sorted = idx.len() == n
                && idx.iter().all(|&i| (i as usize) < n)
                && idx.windows(2).all(|w| {
                    let (a, b) = (&records[w[0] as usize], &records[w[1] as usize]);
                    (key(a), w[0]) < (key(b), w[1])
                });
            if sorted {
                Ok(())
            } else {
                Err(Error::Format(format!("{name} index is corrupt")))
            }
        };
        check(&by_device, &|r| r.device_id, "device")?;
        check(&by_cell, &|r| r.cell_id, "cell")?;
        check(&by_tac, &|r| r.tac, "tac")?;
        Ok(Self {
            records,
            by_device,
            by_cell,
            by_tac,
        })
    }

    pub fn records(&self) -> &[CdrRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub(crate) fn indices(&self) -> [&[u32]; 3] {
        [&self.by_device, &self.by_cell, &self.by_tac]
    }

    pub fn into_records(self) -> Vec<CdrRecord> {
        self.records
    }

    /// Row range with `t0 <= ts < t1`.
    pub fn time_range(&self, t0: i64, t1: i64) -> Range<usize> {
        let lo = self.records.partition_point(|r| r.ts < t0);
        let hi = self.records.partition_point(|r| r.ts < t1);
        lo..hi.max(lo)
    }

    fn index_range<'a>(&self, idx: &'a [u32], key: impl Fn(&CdrRecord) -> u32, lo: u32, hi: u32) -> &'a [u32] {
        let start = idx.partition_point(|&i| key(&self.records[i as usize]) < lo);
        let end = idx.partition_point(|&i| key(&self.records[i as usize]) < hi);
        &idx[start..end.max(start)]
    }

    pub fn by_device(&self, device_id: u32) -> impl Iterator<Item = &CdrRecord> {
        self.index_range(&self.by_device, |r| r.device_id, device_id, device_id.saturating_add(1))
            .iter()
            .map(|&i| &self.records[i as usize])
    }

    pub fn by_cell(&self, cell_id: u32) -> impl Iterator<Item = &CdrRecord> {
        self.index_range(&self.by_cell, |r| r.cell_id, cell_id, cell_id.saturating_add(1))
            .iter()
            .map(|&i| &self.records[i as usize])
    }

    /// Rows with `tacs.start <= tac < tacs.end`.
    pub fn by_tac_range(&self, tacs: Range<u32>) -> impl Iterator<Item = &CdrRecord> {
        self.index_range(&self.by_tac, |r| r.tac, tacs.start, tacs.end)
            .iter()
            .map(|&i| &self.records[i as usize])
    }

    /// Records with `t0 <= ts < t1` at one of `cells`, in timestamp order.
    pub fn query_window(&self, t0: i64, t1: i64, cells: &BTreeSet<u32>) -> Result<WindowQuery> {
        if t0 >= t1 {
            return Err(Error::Argument(format!("empty time window [{t0}, {t1})")));
        }
        if cells.is_empty() {
            return Ok(WindowQuery {
                records: Vec::new(),
                rows_scanned: 0,
            });
        }
        let range = self.time_range(t0, t1);
        let rows = &self.records[range];
        let records = rows.iter().filter(|r| cells.contains(&r.cell_id)).copied().collect();
        Ok(WindowQuery {
            records,
            rows_scanned: rows.len() as u64,
        })
    }
}
