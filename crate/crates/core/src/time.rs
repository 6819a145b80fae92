//! Capture timestamps.
//!
//! Timestamps are kept as integer nanoseconds since the Unix epoch so that
//! ordering, deadlines and binning are exact. In JSON they are written as a
//! plain decimal number of seconds with up to nine fractional digits, which
//! round-trips without loss.

use std::fmt;
use std::ops::{Add, Sub};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

const NANOS_PER_SEC: i64 = 1_000_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub const fn from_nanos(nanos: i64) -> Self {
        Timestamp(nanos)
    }

    pub const fn from_secs(secs: i64) -> Self {
        Timestamp(secs * NANOS_PER_SEC)
    }

    pub const fn from_micros(micros: i64) -> Self {
        Timestamp(micros * 1_000)
    }

    /// Rounds to the nearest nanosecond.
    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs * NANOS_PER_SEC as f64).round() as i64)
    }

    pub const fn as_nanos(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC as f64
    }

    /// Whole seconds (floor).
    pub const fn secs(self) -> i64 {
        self.0.div_euclid(NANOS_PER_SEC)
    }

    /// Sub-second part in nanoseconds.
    pub const fn subsec_nanos(self) -> u32 {
        self.0.rem_euclid(NANOS_PER_SEC) as u32
    }

    /// Start of the `width`-aligned bin containing this instant.
    pub fn floor_to(self, width: Duration) -> Timestamp {
        debug_assert!(width.0 > 0);
        Timestamp(self.0.div_euclid(width.0) * width.0)
    }

    /// UTC day number since the epoch.
    pub const fn day(self) -> i64 {
        self.0.div_euclid(86_400 * NANOS_PER_SEC)
    }

    pub fn saturating_sub(self, d: Duration) -> Timestamp {
        Timestamp(self.0.saturating_sub(d.0))
    }

    pub fn parse_decimal(s: &str) -> Option<Timestamp> {
        let s = s.trim();
        if s.contains(['e', 'E']) {
            return s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Timestamp::from_secs_f64);
        }
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
        if int_part.is_empty() || !int_part.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if !frac_part.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let secs: i64 = int_part.parse().ok()?;
        let mut frac: i64 = 0;
        for (i, b) in frac_part.bytes().enumerate() {
            if i >= 9 {
                break;
            }
            frac += i64::from(b - b'0') * 10_i64.pow(8 - i as u32);
        }
        let nanos = secs.checked_mul(NANOS_PER_SEC)?.checked_add(frac)?;
        Some(Timestamp(if neg { -nanos } else { nanos }))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let neg = self.0 < 0;
        let abs = self.0.unsigned_abs();
        let secs = abs / NANOS_PER_SEC as u64;
        let frac = abs % NANOS_PER_SEC as u64;
        if neg {
            f.write_str("-")?;
        }
        if frac == 0 {
            return write!(f, "{secs}");
        }
        let digits = format!("{frac:09}");
        write!(f, "{secs}.{}", digits.trim_end_matches('0'))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(self.to_string()).map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = Box::<RawValue>::deserialize(deserializer)?;
        Timestamp::parse_decimal(raw.get())
            .ok_or_else(|| D::Error::custom(format!("invalid timestamp {}", raw.get())))
    }
}

/// Signed span of virtual time in nanoseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Duration(i64);

impl Duration {
    pub const ZERO: Duration = Duration(0);

    pub const fn from_secs(secs: i64) -> Self {
        Duration(secs * NANOS_PER_SEC)
    }

    pub const fn from_millis(ms: i64) -> Self {
        Duration(ms * 1_000_000)
    }

    pub const fn from_nanos(n: i64) -> Self {
        Duration(n)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Duration((secs * NANOS_PER_SEC as f64).round() as i64)
    }

    pub const fn as_nanos(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC as f64
    }
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;
    fn add(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0.saturating_add(rhs.0))
    }
}

impl Sub<Duration> for Timestamp {
    type Output = Timestamp;
    fn sub(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0.saturating_sub(rhs.0))
    }
}

impl Sub for Timestamp {
    type Output = Duration;
    fn sub(self, rhs: Timestamp) -> Duration {
        Duration(self.0 - rhs.0)
    }
}
