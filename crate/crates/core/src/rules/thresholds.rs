use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("threshold {0} must be positive")]
pub struct ThresholdError(pub &'static str);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflectionThresholds {
    pub min_internal: usize,
    /// Seconds.
    pub window: f64,
}

impl Default for ReflectionThresholds {
    fn default() -> Self {
        ReflectionThresholds { min_internal: 100, window: 3600.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeriodicThresholds {
    pub min_pkts: u64,
    /// Upper bound on MAD / median of inter-arrival times.
    pub regularity: f64,
    pub min_days: usize,
}

impl Default for PeriodicThresholds {
    fn default() -> Self {
        PeriodicThresholds { min_pkts: 1000, regularity: 0.3, min_days: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmtpThresholds {
    pub min_ext: usize,
}

impl Default for SmtpThresholds {
    fn default() -> Self {
        SmtpThresholds { min_ext: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BogonThresholds {
    pub min_internal: usize,
    pub bogons: Vec<Ipv4Net>,
}

impl Default for BogonThresholds {
    fn default() -> Self {
        let bogons = [
            "0.0.0.0/8",
            "10.0.0.0/8",
            "100.64.0.0/10",
            "127.0.0.0/8",
            "169.254.0.0/16",
            "172.16.0.0/12",
            "192.168.0.0/16",
            "240.0.0.0/4",
        ];
        BogonThresholds { min_internal: 5, bogons: bogons.iter().map(|s| s.parse().expect("literal")).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NtpThresholds {
    pub min_pkts: u64,
}

impl Default for NtpThresholds {
    fn default() -> Self {
        NtpThresholds { min_pkts: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaleHttpThresholds {
    /// Packets per second over the active span.
    pub min_rate: f64,
    pub min_hours: f64,
    /// Fraction of hour bins in the span with at least one event.
    pub min_coverage: f64,
    pub ports: Vec<u16>,
}

impl Default for StaleHttpThresholds {
    fn default() -> Self {
        StaleHttpThresholds { min_rate: 0.2, min_hours: 12.0, min_coverage: 0.8, ports: vec![80, 443] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolverDarkThresholds {
    pub min_ext: usize,
}

impl Default for ResolverDarkThresholds {
    fn default() -> Self {
        ResolverDarkThresholds { min_ext: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceleratorThresholds {
    pub min_pkts: u64,
    pub min_ext: usize,
}

impl Default for AcceleratorThresholds {
    fn default() -> Self {
        AcceleratorThresholds { min_pkts: 500, min_ext: 50 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleThresholds {
    pub reflection_surge: ReflectionThresholds,
    pub periodic_probe: PeriodicThresholds,
    pub smtp_fanout: SmtpThresholds,
    pub bogon_dns: BogonThresholds,
    pub unanswered_ntp: NtpThresholds,
    pub stale_http: StaleHttpThresholds,
    pub resolver_dark: ResolverDarkThresholds,
    pub dns_accelerator: AcceleratorThresholds,
}

impl RuleThresholds {
    pub fn validate(&self) -> Result<(), ThresholdError> {
        let checks: [(&'static str, bool); 15] = [
            ("reflection_surge.min_internal", self.reflection_surge.min_internal > 0),
            ("reflection_surge.window", self.reflection_surge.window > 0.0),
            ("periodic_probe.min_pkts", self.periodic_probe.min_pkts > 0),
            ("periodic_probe.regularity", self.periodic_probe.regularity > 0.0),
            ("periodic_probe.min_days", self.periodic_probe.min_days > 0),
            ("smtp_fanout.min_ext", self.smtp_fanout.min_ext > 0),
            ("bogon_dns.min_internal", self.bogon_dns.min_internal > 0),
            ("unanswered_ntp.min_pkts", self.unanswered_ntp.min_pkts > 0),
            ("stale_http.min_rate", self.stale_http.min_rate > 0.0),
            ("stale_http.min_hours", self.stale_http.min_hours > 0.0),
            ("stale_http.min_coverage", self.stale_http.min_coverage > 0.0),
            ("resolver_dark.min_ext", self.resolver_dark.min_ext > 0),
            ("dns_accelerator.min_pkts", self.dns_accelerator.min_pkts > 0),
            ("dns_accelerator.min_ext", self.dns_accelerator.min_ext > 0),
            ("stale_http.ports", !self.stale_http.ports.is_empty()),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(ThresholdError(name)),
            None => Ok(()),
        }
    }
}
