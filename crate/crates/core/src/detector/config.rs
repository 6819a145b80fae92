use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

use crate::time::Duration;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("t_resp must satisfy 0 < t_resp <= idle_evict (got t_resp={t_resp}, idle_evict={idle_evict})")]
    ResponseTimeout { t_resp: f64, idle_evict: f64 },
    #[error("max_flows must be positive")]
    ZeroMaxFlows,
    #[error("{0} must be a finite, non-negative number of seconds")]
    BadDuration(&'static str),
}

/// Detector tuning. Durations are in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub internal_prefixes: Vec<Ipv4Net>,
    /// Time an outbound flow may wait for its first reverse packet.
    pub t_resp: f64,
    pub idle_evict: f64,
    pub max_flows: usize,
    /// Timers fire against `max_ts - reorder_slack`.
    pub reorder_slack: f64,
    pub treat_rst_as_refused: bool,
    /// How long a flow stays matchable for ICMP errors after leaving the table.
    pub recent_flow_memory: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            internal_prefixes: Vec::new(),
            t_resp: 10.0,
            idle_evict: 120.0,
            max_flows: 1 << 20,
            reorder_slack: 1.0,
            treat_rst_as_refused: true,
            recent_flow_memory: 60.0,
        }
    }
}

impl DetectorConfig {
    pub fn with_prefixes(prefixes: Vec<Ipv4Net>) -> Self {
        DetectorConfig { internal_prefixes: prefixes, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("t_resp", self.t_resp),
            ("idle_evict", self.idle_evict),
            ("reorder_slack", self.reorder_slack),
            ("recent_flow_memory", self.recent_flow_memory),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::BadDuration(name));
            }
        }
        if !(self.t_resp > 0.0 && self.t_resp <= self.idle_evict) {
            return Err(ConfigError::ResponseTimeout { t_resp: self.t_resp, idle_evict: self.idle_evict });
        }
        if self.max_flows == 0 {
            return Err(ConfigError::ZeroMaxFlows);
        }
        Ok(())
    }

    pub(crate) fn t_resp(&self) -> Duration {
        Duration::from_secs_f64(self.t_resp)
    }

    pub(crate) fn idle_evict(&self) -> Duration {
        Duration::from_secs_f64(self.idle_evict)
    }

    pub(crate) fn reorder_slack(&self) -> Duration {
        Duration::from_secs_f64(self.reorder_slack)
    }

    pub(crate) fn recent_flow_memory(&self) -> Duration {
        Duration::from_secs_f64(self.recent_flow_memory)
    }
}
