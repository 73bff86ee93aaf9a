//! Human-readable byte sizes and bandwidths.
//!
//! Suffixes are binary: `KB`, `MB`, `GB` and `TB` are powers of 1024, and the
//! `KiB`/`MiB`/`GiB`/`TiB` spellings are accepted as synonyms. A bandwidth is a
//! size followed by `/s` (for example `26GB/s`). Bare numbers are bytes.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;
pub const TIB: u64 = 1 << 40;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseSizeError {
    #[error("empty size string")]
    Empty,
    #[error("invalid number in `{0}`")]
    BadNumber(String),
    #[error("unknown unit `{unit}` in `{input}`")]
    BadUnit { input: String, unit: String },
    #[error("size `{0}` is negative or not finite")]
    OutOfRange(String),
    #[error("bandwidth `{0}` must end in `/s`")]
    MissingPerSecond(String),
}

fn unit_multiplier(unit: &str) -> Option<u64> {
    let u = unit.trim().to_ascii_lowercase();
    Some(match u.as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => KIB,
        "m" | "mb" | "mib" => MIB,
        "g" | "gb" | "gib" => GIB,
        "t" | "tb" | "tib" => TIB,
        _ => return None,
    })
}

/// Parses strings like `128GB`, `2.5 MB`, `0.78MiB` or `4096` into bytes.
///
/// Fractional results are rounded to the nearest byte.
pub fn parse_bytes(input: &str) -> Result<u64, ParseSizeError> {
    let s = input.trim();
    if s.is_empty() {
        return Err(ParseSizeError::Empty);
    }
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+' || c == 'e' || c == 'E'))
        .unwrap_or(s.len());
    // `e` doubles as an exponent marker; a trailing unit never starts with it.
    let (num, unit) = s.split_at(split);
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| ParseSizeError::BadNumber(input.to_string()))?;
    let mult = unit_multiplier(unit).ok_or_else(|| ParseSizeError::BadUnit {
        input: input.to_string(),
        unit: unit.trim().to_string(),
    })?;
    let bytes = value * mult as f64;
    if !bytes.is_finite() || bytes < 0.0 || bytes > u64::MAX as f64 {
        return Err(ParseSizeError::OutOfRange(input.to_string()));
    }
    Ok(bytes.round() as u64)
}

/// Parses `26GB/s` style bandwidths into bytes per second.
pub fn parse_bandwidth(input: &str) -> Result<f64, ParseSizeError> {
    let s = input.trim();
    let body = s
        .strip_suffix("/s")
        .or_else(|| s.strip_suffix("/S"))
        .or_else(|| s.strip_suffix("ps"))
        .ok_or_else(|| ParseSizeError::MissingPerSecond(input.to_string()))?;
    let bytes = parse_bytes(body)?;
    if bytes == 0 {
        return Err(ParseSizeError::OutOfRange(input.to_string()));
    }
    Ok(bytes as f64)
}

/// Formats a byte count with the largest binary unit that keeps the mantissa >= 1.
pub fn format_bytes(bytes: u64) -> String {
    let (div, unit) = if bytes >= TIB {
        (TIB, "TB")
    } else if bytes >= GIB {
        (GIB, "GB")
    } else if bytes >= MIB {
        (MIB, "MB")
    } else if bytes >= KIB {
        (KIB, "KB")
    } else {
        return format!("{bytes}B");
    };
    let v = bytes as f64 / div as f64;
    let mut s = format!("{v:.3}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    format!("{s}{unit}")
}

/// A byte quantity that (de)serializes from either an integer or a suffixed string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ByteSize(pub u64);

impl ByteSize {
    pub const fn bytes(self) -> u64 {
        self.0
    }
    pub const fn gib(n: u64) -> Self {
        ByteSize(n * GIB)
    }
    pub const fn mib(n: u64) -> Self {
        ByteSize(n * MIB)
    }
}

impl fmt::Display for ByteSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_bytes(self.0))
    }
}

impl FromStr for ByteSize {
    type Err = ParseSizeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_bytes(s).map(ByteSize)
    }
}

impl Serialize for ByteSize {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u64(self.0)
    }
}

struct ByteSizeVisitor;

impl Visitor<'_> for ByteSizeVisitor {
    type Value = ByteSize;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a byte count or a string such as \"128GB\"")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<ByteSize, E> {
        Ok(ByteSize(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<ByteSize, E> {
        u64::try_from(v)
            .map(ByteSize)
            .map_err(|_| E::custom("byte size must be non-negative"))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<ByteSize, E> {
        if v.is_finite() && v >= 0.0 && v <= u64::MAX as f64 {
            Ok(ByteSize(v.round() as u64))
        } else {
            Err(E::custom("byte size must be finite and non-negative"))
        }
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<ByteSize, E> {
        parse_bytes(v).map(ByteSize).map_err(E::custom)
    }
}

impl<'de> Deserialize<'de> for ByteSize {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(ByteSizeVisitor)
    }
}

/// Bytes per second; (de)serializes from a number or a string like `"26GB/s"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Bandwidth(pub f64);

impl Bandwidth {
    pub const fn bytes_per_sec(self) -> f64 {
        self.0
    }
    pub fn gib_per_sec(n: f64) -> Self {
        Bandwidth(n * GIB as f64)
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_finite() && self.0 >= 0.0 && self.0 < u64::MAX as f64 {
            write!(f, "{}/s", format_bytes(self.0.round() as u64))
        } else {
            write!(f, "{}B/s", self.0)
        }
    }
}

impl FromStr for Bandwidth {
    type Err = ParseSizeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_bandwidth(s).map(Bandwidth)
    }
}

impl Serialize for Bandwidth {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.0)
    }
}

struct BandwidthVisitor;

impl Visitor<'_> for BandwidthVisitor {
    type Value = Bandwidth;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("bytes per second or a string such as \"26GB/s\"")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Bandwidth, E> {
        self.visit_f64(v as f64)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Bandwidth, E> {
        self.visit_f64(v as f64)
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Bandwidth, E> {
        if v.is_finite() && v > 0.0 {
            Ok(Bandwidth(v))
        } else {
            Err(E::custom("bandwidth must be positive and finite"))
        }
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Bandwidth, E> {
        parse_bandwidth(v).map(Bandwidth).map_err(E::custom)
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(BandwidthVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_suffixes() {
        assert_eq!(parse_bytes("128GB").unwrap(), 128 * GIB);
        assert_eq!(parse_bytes("10 TB").unwrap(), 10 * TIB);
        assert_eq!(parse_bytes("64MiB").unwrap(), 64 * MIB);
        assert_eq!(parse_bytes("4096").unwrap(), 4096);
        assert_eq!(parse_bytes("2.5MB").unwrap(), 5 * MIB / 2);
        assert_eq!(parse_bytes("1e3").unwrap(), 1000);
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(parse_bytes(""), Err(ParseSizeError::Empty));
        assert!(matches!(parse_bytes("12XB"), Err(ParseSizeError::BadUnit { .. })));
        assert!(matches!(parse_bytes("abc"), Err(ParseSizeError::BadNumber(_))));
        assert!(matches!(parse_bytes("-3GB"), Err(ParseSizeError::OutOfRange(_))));
        assert!(matches!(parse_bandwidth("26GB"), Err(ParseSizeError::MissingPerSecond(_))));
        assert!(parse_bandwidth("0GB/s").is_err());
    }

    #[test]
    fn bandwidth_roundtrip() {
        let bw: Bandwidth = "26GB/s".parse().unwrap();
        assert_eq!(bw.0, 26.0 * GIB as f64);
        assert_eq!(bw.to_string(), "26GB/s");
    }

    #[test]
    fn serde_accepts_strings_and_numbers() {
        #[derive(Deserialize)]
        struct T {
            a: ByteSize,
            b: ByteSize,
            c: Bandwidth,
        }
        let t: T = serde_json::from_str(r#"{"a": "1GB", "b": 12, "c": "4GB/s"}"#).unwrap();
        assert_eq!(t.a.0, GIB);
        assert_eq!(t.b.0, 12);
        assert_eq!(t.c.0, 4.0 * GIB as f64);
    }

    #[test]
    fn formats_compactly() {
        assert_eq!(format_bytes(5 * GIB), "5GB");
        assert_eq!(format_bytes(5 * MIB / 2), "2.5MB");
        assert_eq!(format_bytes(17), "17B");
    }
}
