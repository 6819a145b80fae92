use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

use crate::rules::RuleId;

fn default_start() -> f64 {
    // 2024-12-01T00:00:00Z
    1_733_011_200.0
}

fn default_prefix() -> Ipv4Net {
    "10.20.0.0/16".parse().expect("literal")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Unix seconds of the first possible packet.
    #[serde(default = "default_start")]
    pub start: f64,
    /// Seconds.
    pub duration: f64,
    #[serde(default = "default_prefix")]
    pub internal_prefix: Ipv4Net,
    #[serde(default)]
    pub background: Background,
    /// Erroneous share of outbound packets to reach by adding noise flows.
    #[serde(default)]
    pub erroneous_fraction: Option<f64>,
    #[serde(default)]
    pub noise: Noise,
    #[serde(default)]
    pub planted: Vec<Planted>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Background {
    /// Packets of well-formed traffic to generate (approximate: the last
    /// flow is not cut short).
    pub target_packets: u64,
    pub mix: Mix,
    /// Inclusive range of data segments per TCP flow.
    pub tcp_data_pkts: [u32; 2],
    pub client_hosts: u32,
    pub servers: u32,
}

impl Default for Background {
    fn default() -> Self {
        Background { target_packets: 0, mix: Mix::default(), tcp_data_pkts: [2, 30], client_hosts: 4000, servers: 3000 }
    }
}

/// Relative weights of benign flow kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mix {
    pub tcp: f64,
    pub dns: f64,
    pub udp: f64,
    pub echo: f64,
    /// Inbound-initiated connections to internal servers.
    pub server: f64,
    pub internal: f64,
    /// SYN answered by RST.
    pub refused: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Mix { tcp: 0.35, dns: 0.3, udp: 0.1, echo: 0.05, server: 0.1, internal: 0.05, refused: 0.05 }
    }
}

impl Mix {
    pub(crate) fn weights(&self) -> [f64; 7] {
        [self.tcp, self.dns, self.udp, self.echo, self.server, self.internal, self.refused]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Noise {
    /// Single-packet unanswered flows from random clients.
    pub a_flows: u64,
    /// Single-packet flows answered by an ICMP error.
    pub b_flows: u64,
    /// Share of pattern-B flows among the flows added to reach
    /// `erroneous_fraction`.
    pub fill_b_share: f64,
    /// Zipf exponent for picking noise senders from the client pool; zero
    /// picks uniformly.
    pub sender_skew: f64,
}

impl Default for Noise {
    fn default() -> Self {
        Noise { a_flows: 0, b_flows: 0, fill_b_share: 0.1, sender_skew: 0.0 }
    }
}

fn ip(s: &str) -> Ipv4Addr {
    s.parse().expect("literal")
}

/// One planted anomaly. Offsets are seconds from the scenario start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum Planted {
    ReflectionSurge {
        internal_hosts: u32,
        /// Hosts that answer a second time.
        repeats: u32,
        source: Ipv4Addr,
        source_port: u16,
        port: u16,
        offset: f64,
        spread: f64,
    },
    PeriodicProbe {
        packets: u32,
        period: f64,
        /// Relative jitter of each gap.
        jitter: f64,
        port: u16,
        offset: f64,
    },
    SmtpFanout {
        destinations: u32,
        packets: u32,
        offset: f64,
        spread: f64,
    },
    BogonDns {
        clients: u32,
        resolver: Ipv4Addr,
        packets: u32,
    },
    UnansweredNtp {
        hosts: u32,
        servers: u32,
        pkts_per_host: u32,
    },
    StaleHttp {
        packets: u32,
        period: f64,
        port: u16,
        offset: f64,
    },
    ResolverDark {
        resolvers: u32,
        pool: u32,
        destinations_per_resolver: u32,
        queries_per_destination: u32,
    },
    DnsAccelerator {
        hosts: u32,
        resolver_pool: u32,
        resolvers_per_host: u32,
        lookups: u32,
        fanout: u32,
    },
}

impl Planted {
    pub fn rule(&self) -> RuleId {
        match self {
            Planted::ReflectionSurge { .. } => RuleId::ReflectionSurge,
            Planted::PeriodicProbe { .. } => RuleId::PeriodicProbe,
            Planted::SmtpFanout { .. } => RuleId::SmtpFanout,
            Planted::BogonDns { .. } => RuleId::BogonDns,
            Planted::UnansweredNtp { .. } => RuleId::UnansweredNtp,
            Planted::StaleHttp { .. } => RuleId::StaleHttp,
            Planted::ResolverDark { .. } => RuleId::ResolverDark,
            Planted::DnsAccelerator { .. } => RuleId::DnsAccelerator,
        }
    }

    pub fn default_for(rule: RuleId) -> Planted {
        match rule {
            RuleId::ReflectionSurge => Planted::ReflectionSurge {
                internal_hosts: 700,
                repeats: 60,
                source: ip("1.1.1.1"),
                source_port: 53,
                port: 500,
                offset: 36_000.0,
                spread: 1800.0,
            },
            RuleId::PeriodicProbe => {
                Planted::PeriodicProbe { packets: 2290, period: 120.0, jitter: 0.01, port: 8443, offset: 600.0 }
            }
            RuleId::SmtpFanout => Planted::SmtpFanout { destinations: 382, packets: 2050, offset: 7200.0, spread: 21_600.0 },
            RuleId::BogonDns => Planted::BogonDns { clients: 35, resolver: ip("100.100.100.100"), packets: 5810 },
            RuleId::UnansweredNtp => Planted::UnansweredNtp { hosts: 6, servers: 3, pkts_per_host: 120 },
            RuleId::StaleHttp => Planted::StaleHttp { packets: 18_000, period: 2.6, port: 80, offset: 90_000.0 },
            RuleId::ResolverDark => Planted::ResolverDark {
                resolvers: 3,
                pool: 5000,
                destinations_per_resolver: 2000,
                queries_per_destination: 2,
            },
            RuleId::DnsAccelerator => Planted::DnsAccelerator {
                hosts: 50,
                resolver_pool: 200,
                resolvers_per_host: 60,
                lookups: 200,
                fanout: 4,
            },
        }
    }
}

pub const PRESET_NAMES: [&str; 3] = ["preset-table1-scaled", "preset-background-only", "preset-ratio-0p06"];

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("unknown preset {0:?} (known: {known})", known = PRESET_NAMES.join(", "))]
    UnknownPreset(String),
    #[error("invalid scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Scenario {
    pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
        let name = name.strip_suffix(".json").unwrap_or(name);
        let text = match name {
            "preset-table1-scaled" => include_str!("../../presets/preset-table1-scaled.json"),
            "preset-background-only" => include_str!("../../presets/preset-background-only.json"),
            "preset-ratio-0p06" => include_str!("../../presets/preset-ratio-0p06.json"),
            other => return Err(ScenarioError::UnknownPreset(other.to_string())),
        };
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Ok(serde_json::from_str(&text)?)
    }
}
