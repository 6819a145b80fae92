//! Aggregate views of an event log: events per time bin, per-sender
//! contribution, and summary ratios.

use std::collections::{BTreeSet, HashMap};
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::IpProto;
use crate::detector::{DetectorCounters, ErroneousEvent, Pattern};
use crate::time::{Duration, Timestamp};

pub const DEFAULT_BIN_WIDTH: f64 = 3600.0;

#[derive(Debug, thiserror::Error)]
pub enum AnalyticsError {
    #[error("bin width must be positive")]
    BadBinWidth,
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ProtoCounts {
    pub tcp: u64,
    pub udp: u64,
    pub icmp: u64,
    pub other: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeBin {
    pub bin_start: Timestamp,
    pub width: Duration,
    pub pattern_a: u64,
    pub pattern_b: u64,
    pub pattern_c: u64,
    pub by_proto: ProtoCounts,
}

impl TimeBin {
    pub fn total(&self) -> u64 {
        self.pattern_a + self.pattern_b + self.pattern_c
    }
}

/// Bins aligned to multiples of `width`, covering the first to the last event
/// without gaps.
pub fn timeline(events: &[ErroneousEvent], width: Duration) -> Result<Vec<TimeBin>, AnalyticsError> {
    if width.as_nanos() <= 0 {
        return Err(AnalyticsError::BadBinWidth);
    }
    let (Some(first), Some(last)) = (events.iter().map(|e| e.ts).min(), events.iter().map(|e| e.ts).max()) else {
        return Ok(Vec::new());
    };
    let start = first.floor_to(width);
    let w = width.as_nanos();
    let n = ((last.floor_to(width).as_nanos() - start.as_nanos()) / w + 1) as usize;
    let mut bins: Vec<TimeBin> = (0..n)
        .map(|i| TimeBin {
            bin_start: Timestamp::from_nanos(start.as_nanos() + i as i64 * w),
            width,
            pattern_a: 0,
            pattern_b: 0,
            pattern_c: 0,
            by_proto: ProtoCounts::default(),
        })
        .collect();
    for e in events {
        let b = &mut bins[((e.ts.as_nanos() - start.as_nanos()) / w) as usize];
        match e.pattern {
            Pattern::A => b.pattern_a += 1,
            Pattern::B => b.pattern_b += 1,
            Pattern::C => b.pattern_c += 1,
        }
        match e.flow.proto {
            IpProto::Tcp => b.by_proto.tcp += 1,
            IpProto::Udp => b.by_proto.udp += 1,
            IpProto::Icmp => b.by_proto.icmp += 1,
            IpProto::Other(_) => b.by_proto.other += 1,
        }
    }
    Ok(bins)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HostContribution {
    pub rank: usize,
    pub host: Ipv4Addr,
    pub events: u64,
    pub cum_fraction: f64,
}

/// Internal hosts by number of events, largest first; ties by address.
pub fn sender_cdf(events: &[ErroneousEvent]) -> Vec<HostContribution> {
    let mut per_host: HashMap<Ipv4Addr, u64> = HashMap::new();
    for e in events {
        *per_host.entry(e.internal_host()).or_default() += 1;
    }
    let mut hosts: Vec<(Ipv4Addr, u64)> = per_host.into_iter().collect();
    hosts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let total = events.len() as f64;
    let mut cum = 0u64;
    hosts
        .into_iter()
        .enumerate()
        .map(|(i, (host, n))| {
            cum += n;
            HostContribution { rank: i + 1, host, events: n, cum_fraction: cum as f64 / total }
        })
        .collect()
}

/// Share of all events contributed by the top `fraction` of senders.
pub fn top_share(cdf: &[HostContribution], fraction: f64) -> f64 {
    if cdf.is_empty() {
        return 0.0;
    }
    let k = ((cdf.len() as f64 * fraction).ceil() as usize).clamp(1, cdf.len());
    cdf[k - 1].cum_fraction
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatternShares {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub events: u64,
    pub pattern_counts: [u64; 3],
    pub pattern_shares: PatternShares,
    /// Erroneous over outbound packets; absent without detector counters.
    pub erroneous_ratio: Option<f64>,
    pub erroneous_pkts: Option<u64>,
    pub outbound_pkts: Option<u64>,
    pub distinct_internal: usize,
    pub distinct_external: usize,
    pub first_ts: Option<Timestamp>,
    pub last_ts: Option<Timestamp>,
}

pub fn summary(counters: Option<&DetectorCounters>, events: &[ErroneousEvent]) -> SummaryReport {
    let mut counts = [0u64; 3];
    let mut internal = BTreeSet::new();
    let mut external = BTreeSet::new();
    for e in events {
        counts[e.pattern as usize] += 1;
        internal.insert(e.internal_host());
        external.insert(e.external_host());
    }
    let n = events.len() as u64;
    let share = |c: u64| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    SummaryReport {
        events: n,
        pattern_counts: counts,
        pattern_shares: PatternShares { a: share(counts[0]), b: share(counts[1]), c: share(counts[2]) },
        erroneous_ratio: counters.map(|c| c.erroneous_ratio()),
        erroneous_pkts: counters.map(|c| c.erroneous_pkts),
        outbound_pkts: counters.map(|c| c.outbound_pkts),
        distinct_internal: internal.len(),
        distinct_external: external.len(),
        first_ts: events.iter().map(|e| e.ts).min(),
        last_ts: events.iter().map(|e| e.ts).max(),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, AnalyticsError> {
    csv::Writer::from_path(path).map_err(|source| AnalyticsError::Csv { path: path.display().to_string(), source })
}

pub fn write_timeline_csv(path: &Path, bins: &[TimeBin]) -> Result<(), AnalyticsError> {
    let err = |source| AnalyticsError::Csv { path: path.display().to_string(), source };
    let mut w = csv_writer(path)?;
    w.write_record(["bin_start", "pattern_a", "pattern_b", "pattern_c", "total"]).map_err(err)?;
    for b in bins {
        w.write_record([
            b.bin_start.to_string(),
            b.pattern_a.to_string(),
            b.pattern_b.to_string(),
            b.pattern_c.to_string(),
            b.total().to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|source| AnalyticsError::Io { path: path.display().to_string(), source })
}

pub fn write_cdf_csv(path: &Path, cdf: &[HostContribution]) -> Result<(), AnalyticsError> {
    let err = |source| AnalyticsError::Csv { path: path.display().to_string(), source };
    let mut w = csv_writer(path)?;
    w.write_record(["rank", "host", "events", "cum_fraction"]).map_err(err)?;
    for h in cdf {
        w.write_record([h.rank.to_string(), h.host.to_string(), h.events.to_string(), h.cum_fraction.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|source| AnalyticsError::Io { path: path.display().to_string(), source })
}
