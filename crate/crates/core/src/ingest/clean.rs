//! Line and coordinate cleansing.

use std::fmt;

use crate::error::{Error, Result};

/// Strips trailing spaces, tabs, carriage returns and newlines.
pub fn clean_line(raw: &str) -> &str {
    raw.trim_end_matches([' ', '\t', '\r', '\n'])
}

/// Parses a plain decimal string and truncates it toward zero to `places`
/// fractional digits, returning the value scaled by `10^places`.
///
/// Accepts an optional sign, integer digits and an optional fractional part.
/// Exponent notation is rejected.
pub fn truncate_decimal(text: &str, places: u32) -> Result<i64> {
    let bad = || Error::MalformedRow(format!("not a decimal number: {text:?}"));
    let t = text.trim();
    let (negative, body) = match t.as_bytes().first() {
        Some(b'-') => (true, &t[1..]),
        Some(b'+') => (false, &t[1..]),
        _ => (false, t),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    if places > 18 {
        return Err(Error::Argument(format!("{places} decimal places exceeds 18")));
    }

    let mut units: i64 = 0;
    for b in int_part.bytes() {
        units = units
            .checked_mul(10)
            .and_then(|u| u.checked_add(i64::from(b - b'0')))
            .ok_or_else(bad)?;
    }
    let mut frac = frac_part.bytes();
    for _ in 0..places {
        let digit = frac.next().map_or(0, |b| i64::from(b - b'0'));
        units = units
            .checked_mul(10)
            .and_then(|u| u.checked_add(digit))
            .ok_or_else(bad)?;
    }
    Ok(if negative { -units } else { units })
}

/// Truncates a decimal-degree string to `places` decimals (toward zero).
pub fn truncate_coord_str(text: &str, places: u32) -> Result<f64> {
    let units = truncate_decimal(text, places)?;
    // Both operands are exact in f64, so the quotient is the nearest double
    // to the truncated decimal.
    Ok(units as f64 / 10f64.powi(places as i32))
}

/// Truncates `value` toward zero to `places` decimal digits.
///
/// Works on the shortest round-trip decimal representation of `value`, so
/// `truncate_coord(47.4979123456789, 6)` yields exactly `47.497912`.
pub fn truncate_coord(value: f64, places: u32) -> f64 {
    // `Display` for f64 never uses exponent notation.
    truncate_coord_str(&value.to_string(), places).unwrap_or(value)
}

/// A coordinate in integer millionths of a degree.
///
/// This is the stored representation of every cell and base station
/// position; equality on it is exact co-location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MicroDegrees(pub i32);

impl MicroDegrees {
    pub fn parse(text: &str) -> Result<Self> {
        let units = truncate_decimal(text, 6)?;
        i32::try_from(units)
            .map(MicroDegrees)
            .map_err(|_| Error::MalformedRow(format!("coordinate out of range: {text:?}")))
    }

    pub fn from_degrees(deg: f64) -> Self {
        MicroDegrees((truncate_coord(deg, 6) * 1e6).round() as i32)
    }

    pub fn degrees(self) -> f64 {
        f64::from(self.0) / 1e6
    }
}

impl fmt::Display for MicroDegrees {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:06}", abs / 1_000_000, abs % 1_000_000)
    }
}
