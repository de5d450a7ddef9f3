//! Local wall-clock timestamps to UTC epoch seconds.

use std::fmt;
use std::str::FromStr;

use chrono::{LocalResult, NaiveDate, NaiveDateTime, NaiveTime, TimeZone};
use chrono_tz::Tz;

use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// A named IANA time zone, e.g. `Europe/Budapest` or `UTC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Zone(Tz);

impl Zone {
    pub const UTC: Zone = Zone(Tz::UTC);
    pub const BUDAPEST: Zone = Zone(Tz::Europe__Budapest);

    pub fn name(&self) -> &'static str {
        self.0.name()
    }

    pub fn tz(&self) -> Tz {
        self.0
    }

    /// Formats epoch seconds as local `YYYY-MM-DD HH:MM:SS`.
    pub fn format(&self, ts: i64) -> String {
        match self.0.timestamp_opt(ts, 0) {
            LocalResult::Single(dt) => dt.format(TIMESTAMP_FORMAT).to_string(),
            _ => ts.to_string(),
        }
    }

    /// Epoch seconds of a local wall-clock instant. Ambiguous instants (DST
    /// fall-back) resolve to the earlier one; skipped instants are errors.
    pub fn local_to_epoch(&self, local: &NaiveDateTime) -> Result<i64> {
        match self.0.from_local_datetime(local) {
            LocalResult::Single(dt) => Ok(dt.timestamp()),
            LocalResult::Ambiguous(early, _) => Ok(early.timestamp()),
            LocalResult::None => Err(Error::MalformedRow(format!(
                "{local} does not exist in {}",
                self.name()
            ))),
        }
    }
}

impl Default for Zone {
    fn default() -> Self {
        Zone::BUDAPEST
    }
}

impl FromStr for Zone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse::<Tz>()
            .map(Zone)
            .map_err(|_| Error::Config(format!("unknown time zone {s:?}")))
    }
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn digits(bytes: &[u8]) -> Option<u32> {
    bytes.iter().try_fold(0u32, |acc, &b| {
        b.is_ascii_digit().then(|| acc * 10 + u32::from(b - b'0'))
    })
}

/// Parses exactly `YYYY-MM-DD HH:MM:SS` into a naive local date-time.
pub fn parse_naive(text: &str) -> Result<NaiveDateTime> {
    let b = text.as_bytes();
    let bad = || Error::MalformedRow(format!("bad timestamp {text:?}"));
    if b.len() != 19 || b[4] != b'-' || b[7] != b'-' || b[10] != b' ' || b[13] != b':' || b[16] != b':' {
        return Err(bad());
    }
    let year = digits(&b[0..4]).ok_or_else(bad)?;
    let month = digits(&b[5..7]).ok_or_else(bad)?;
    let day = digits(&b[8..10]).ok_or_else(bad)?;
    let hour = digits(&b[11..13]).ok_or_else(bad)?;
    let minute = digits(&b[14..16]).ok_or_else(bad)?;
    let second = digits(&b[17..19]).ok_or_else(bad)?;
    let date = NaiveDate::from_ymd_opt(year as i32, month, day).ok_or_else(bad)?;
    let time = NaiveTime::from_hms_opt(hour, minute, second).ok_or_else(bad)?;
    Ok(NaiveDateTime::new(date, time))
}

/// Converts `YYYY-MM-DD HH:MM:SS` in `zone` to UTC epoch seconds.
pub fn parse_timestamp(text: &str, zone: Zone) -> Result<i64> {
    zone.local_to_epoch(&parse_naive(text)?)
}

/// Timestamp parser that memoizes the UTC offset of the last local hour.
///
/// An hour is cached only when its first and last second map to a single
/// instant with the same offset, so DST transitions always take the slow
/// path.
#[derive(Debug, Clone)]
pub struct TimestampParser {
    zone: Zone,
    cached_hour: i64,
    cached_offset: i64,
}

impl TimestampParser {
    pub fn new(zone: Zone) -> Self {
        Self {
            zone,
            cached_hour: i64::MIN,
            cached_offset: 0,
        }
    }

    pub fn parse(&mut self, text: &str) -> Result<i64> {
        let naive = parse_naive(text)?;
        let local = naive.and_utc().timestamp();
        let hour = local.div_euclid(3600);
        if hour == self.cached_hour {
            return Ok(local - self.cached_offset);
        }
        let start = naive_from_secs(hour * 3600);
        let end = naive_from_secs(hour * 3600 + 3599);
        if let (Some(start), Some(end)) = (start, end) {
            let tz = self.zone.tz();
            if let (LocalResult::Single(a), LocalResult::Single(b)) =
                (tz.from_local_datetime(&start), tz.from_local_datetime(&end))
            {
                let off_a = hour * 3600 - a.timestamp();
                let off_b = hour * 3600 + 3599 - b.timestamp();
                if off_a == off_b {
                    self.cached_hour = hour;
                    self.cached_offset = off_a;
                    return Ok(local - off_a);
                }
            }
        }
        self.zone.local_to_epoch(&naive)
    }
}

fn naive_from_secs(secs: i64) -> Option<NaiveDateTime> {
    chrono::DateTime::from_timestamp(secs, 0).map(|dt| dt.naive_utc())
}
