//! Rule-based detection of silent internal anomalies in an event log.

mod detectors;
mod thresholds;

use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::path::Path;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

pub use detectors::*;
pub use thresholds::*;

use crate::detector::{ErroneousEvent, FlowKey, Pattern};
use crate::time::Timestamp;

const MAX_EVIDENCE: usize = 10;
pub const LISTED_TAG: &str = "listed-destination";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RuleId {
    ReflectionSurge,
    PeriodicProbe,
    SmtpFanout,
    BogonDns,
    UnansweredNtp,
    StaleHttp,
    ResolverDark,
    DnsAccelerator,
}

impl RuleId {
    pub const ALL: [RuleId; 8] = [
        RuleId::ReflectionSurge,
        RuleId::PeriodicProbe,
        RuleId::SmtpFanout,
        RuleId::BogonDns,
        RuleId::UnansweredNtp,
        RuleId::StaleHttp,
        RuleId::ResolverDark,
        RuleId::DnsAccelerator,
    ];

    pub fn category(self) -> Category {
        match self {
            RuleId::ReflectionSurge | RuleId::PeriodicProbe | RuleId::SmtpFanout => Category::Malicious,
            RuleId::BogonDns | RuleId::UnansweredNtp => Category::Faulty,
            RuleId::StaleHttp => Category::Stale,
            RuleId::ResolverDark | RuleId::DnsAccelerator => Category::Other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RuleId::ReflectionSurge => "REFLECTION_SURGE",
            RuleId::PeriodicProbe => "PERIODIC_PROBE",
            RuleId::SmtpFanout => "SMTP_FANOUT",
            RuleId::BogonDns => "BOGON_DNS",
            RuleId::UnansweredNtp => "UNANSWERED_NTP",
            RuleId::StaleHttp => "STALE_HTTP",
            RuleId::ResolverDark => "RESOLVER_DARK",
            RuleId::DnsAccelerator => "DNS_ACCELERATOR",
        }
    }

    fn note(self) -> Option<&'static str> {
        match self {
            RuleId::ReflectionSurge => {
                Some("either a scan from the external address or reflection of traffic spoofed as coming from it")
            }
            RuleId::ResolverDark => Some("symptom only; no cause assigned"),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    Malicious,
    Faulty,
    Stale,
    Other,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Malicious => "MALICIOUS",
            Category::Faulty => "FAULTY",
            Category::Stale => "STALE",
            Category::Other => "OTHER",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub ts: Timestamp,
    pub pattern: Pattern,
    pub flow: FlowKey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyFinding {
    pub rule_id: RuleId,
    pub category: Category,
    pub internal_hosts: usize,
    pub external_hosts: usize,
    pub packets: u64,
    pub events: usize,
    pub window_start: Timestamp,
    pub window_end: Timestamp,
    pub evidence: Vec<Evidence>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Indices of the contributing events in the analysed sequence.
    #[serde(skip)]
    pub members: Vec<usize>,
}

/// Packets an event stands for. Uncorrelated pattern-B events carry no flow
/// count but still represent one packet.
pub fn event_pkts(e: &ErroneousEvent) -> u64 {
    e.pkts_in_flow.max(1)
}

impl AnomalyFinding {
    /// `members` must be non-empty and sorted by timestamp.
    pub fn from_members(rule: RuleId, events: &[ErroneousEvent], members: Vec<usize>) -> Self {
        let internal: BTreeSet<Ipv4Addr> = members.iter().map(|&i| events[i].internal_host()).collect();
        let external: BTreeSet<Ipv4Addr> = members.iter().map(|&i| events[i].external_host()).collect();
        let evidence = members
            .iter()
            .take(MAX_EVIDENCE)
            .map(|&i| Evidence { ts: events[i].ts, pattern: events[i].pattern, flow: events[i].flow })
            .collect();
        AnomalyFinding {
            rule_id: rule,
            category: rule.category(),
            internal_hosts: internal.len(),
            external_hosts: external.len(),
            packets: members.iter().map(|&i| event_pkts(&events[i])).sum(),
            events: members.len(),
            window_start: members.iter().map(|&i| events[i].ts).min().expect("non-empty"),
            window_end: members.iter().map(|&i| events[i].ts).max().expect("non-empty"),
            evidence,
            tags: Vec::new(),
            note: rule.note().map(str::to_string),
            members,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DenylistError {
    #[error("line {line}: {text:?} is not an IPv4 address or CIDR")]
    BadEntry { line: usize, text: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Static list of addresses that tags findings touching them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Denylist(Vec<Ipv4Net>);

impl Denylist {
    /// One address or CIDR per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, DenylistError> {
        let mut nets = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let entry = raw.split('#').next().unwrap_or("").trim();
            if entry.is_empty() {
                continue;
            }
            let net = entry
                .parse::<Ipv4Net>()
                .or_else(|_| entry.parse::<Ipv4Addr>().map(Ipv4Net::from))
                .map_err(|_| DenylistError::BadEntry { line: i + 1, text: entry.to_string() })?;
            nets.push(net);
        }
        Ok(Denylist(nets))
    }

    pub fn load(path: &Path) -> Result<Self, DenylistError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| DenylistError::Io { path: path.display().to_string(), source })?;
        Denylist::parse(&text)
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        self.0.iter().any(|n| n.contains(&addr))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub explained_events: usize,
    pub total_events: usize,
    /// Share of events that belong to at least one finding.
    pub explained_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FindingsReport {
    pub findings: Vec<AnomalyFinding>,
    pub coverage: Coverage,
}

impl FindingsReport {
    pub fn count(&self, rule: RuleId) -> usize {
        self.findings.iter().filter(|f| f.rule_id == rule).count()
    }
}

pub fn run_all(events: &[ErroneousEvent], th: &RuleThresholds, denylist: Option<&Denylist>) -> FindingsReport {
    let mut findings = Vec::new();
    findings.extend(detect_reflection_surge(events, &th.reflection_surge));
    findings.extend(detect_periodic_probe(events, &th.periodic_probe));
    findings.extend(detect_smtp_fanout(events, &th.smtp_fanout));
    findings.extend(detect_bogon_dns(events, &th.bogon_dns));
    findings.extend(detect_unanswered_ntp(events, &th.unanswered_ntp));
    findings.extend(detect_stale_http(events, &th.stale_http));
    findings.extend(detect_resolver_dark(events, &th.resolver_dark));
    findings.extend(detect_dns_accelerator(events, &th.dns_accelerator));

    if let Some(d) = denylist {
        for f in &mut findings {
            if f.members.iter().any(|&i| d.contains(events[i].external_host())) {
                f.tags.push(LISTED_TAG.to_string());
            }
        }
    }
    findings.sort_by(|a, b| {
        b.packets
            .cmp(&a.packets)
            .then(a.rule_id.cmp(&b.rule_id))
            .then(a.window_start.cmp(&b.window_start))
            .then(a.evidence.first().map(|e| e.flow).cmp(&b.evidence.first().map(|e| e.flow)))
    });

    let explained: BTreeSet<usize> = findings.iter().flat_map(|f| f.members.iter().copied()).collect();
    let total = events.len();
    let coverage = Coverage {
        explained_events: explained.len(),
        total_events: total,
        explained_fraction: if total == 0 { 0.0 } else { explained.len() as f64 / total as f64 },
    };
    FindingsReport { findings, coverage }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn write_findings_json(path: &Path, report: &FindingsReport) -> Result<(), ReportError> {
    let mut s = serde_json::to_string_pretty(report).expect("report serialises");
    s.push('\n');
    std::fs::write(path, s).map_err(|source| ReportError::Io { path: path.display().to_string(), source })
}

pub fn write_findings_csv(path: &Path, report: &FindingsReport) -> Result<(), ReportError> {
    let err = |source| ReportError::Csv { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record([
        "rule_id",
        "category",
        "internal_hosts",
        "external_hosts",
        "packets",
        "events",
        "window_start",
        "window_end",
        "tags",
    ])
    .map_err(err)?;
    for f in &report.findings {
        w.write_record([
            f.rule_id.name().to_string(),
            f.category.name().to_string(),
            f.internal_hosts.to_string(),
            f.external_hosts.to_string(),
            f.packets.to_string(),
            f.events.to_string(),
            f.window_start.to_string(),
            f.window_end.to_string(),
            f.tags.join(";"),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|source| ReportError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests;
