//! Match-action offload in front of the flow detector.
//!
//! Once the detector classifies a flow, an exact-match rule is installed:
//! IGNORE for benign flows, LOG for erroneous ones. Later packets of that flow
//! take the fast path and skip stateful inspection; only the per-flow packet
//! and timestamp accounting is updated. Packets seen before classification can
//! be kept in a small per-flow replay buffer and logged once the flow turns out
//! to be erroneous.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::codec::PacketRecord;
use crate::detector::{ErroneousEvent, FlowDetector, FlowKey, PacketClass, Resolution};
use crate::time::{Duration, Timestamp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RuleAction {
    Log,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RuleEntry {
    pub key: FlowKey,
    pub action: RuleAction,
    pub installed_at: Timestamp,
    pub ttl: Duration,
    pub hits: u64,
}

impl RuleEntry {
    pub fn expires(&self) -> Timestamp {
        self.installed_at + self.ttl
    }

    pub fn is_expired(&self, clock: Timestamp) -> bool {
        self.expires() < clock
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Disposition {
    Logged,
    Ignored,
    SlowPath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MirrorConfig {
    /// With rules disabled every packet takes the slow path.
    pub rules_enabled: bool,
    pub rule_ttl: f64,
    pub rule_table_size: usize,
    pub replay_buffer: bool,
    pub replay_capacity: usize,
}

impl Default for MirrorConfig {
    fn default() -> Self {
        MirrorConfig {
            rules_enabled: true,
            rule_ttl: 300.0,
            rule_table_size: 1 << 20,
            replay_buffer: true,
            replay_capacity: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineCounters {
    pub offered: u64,
    pub fast_path_hits: u64,
    pub slow_path_pkts: u64,
    pub rules_installed: u64,
    pub rules_expired: u64,
    pub rules_evicted: u64,
    pub logged_pkts: u64,
    /// Logged packets that came out of a replay buffer.
    pub replayed_pkts: u64,
    /// Pre-classification packets lost because a replay buffer was full.
    pub replay_overflow: u64,
}

impl PipelineCounters {
    pub fn fast_path_fraction(&self) -> f64 {
        if self.offered == 0 {
            0.0
        } else {
            self.fast_path_hits as f64 / self.offered as f64
        }
    }
}

/// A packet handed to the logger. `seq` is the caller's capture index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoggedPacket {
    pub seq: u64,
    pub ts: Timestamp,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Default)]
pub struct RuleTable {
    rules: HashMap<FlowKey, RuleEntry>,
    capacity: usize,
}

impl RuleTable {
    pub fn new(capacity: usize) -> Self {
        RuleTable { rules: HashMap::new(), capacity: capacity.max(1) }
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, key: &FlowKey) -> Option<&RuleEntry> {
        self.rules.get(key)
    }

    /// Installs or replaces the rule for `entry.key`. Returns how many rules
    /// were dropped to make room as `(expired, evicted)`.
    pub fn install(&mut self, entry: RuleEntry, clock: Timestamp) -> (u64, u64) {
        if self.rules.contains_key(&entry.key) || self.rules.len() < self.capacity {
            self.rules.insert(entry.key, entry);
            return (0, 0);
        }
        let before = self.rules.len();
        self.rules.retain(|_, r| !r.is_expired(clock));
        let expired = (before - self.rules.len()) as u64;
        let mut evicted = 0;
        if self.rules.len() >= self.capacity {
            let victim = self.rules.values().min_by_key(|r| (r.hits, r.expires(), r.key)).map(|r| r.key);
            if let Some(k) = victim {
                self.rules.remove(&k);
                evicted = 1;
            }
        }
        self.rules.insert(entry.key, entry);
        (expired, evicted)
    }

    pub fn remove(&mut self, key: &FlowKey) -> Option<RuleEntry> {
        self.rules.remove(key)
    }

    /// Looks up an unexpired rule, dropping it if it has expired. The second
    /// value is true when an expired rule was removed.
    fn lookup(&mut self, key: &FlowKey, clock: Timestamp) -> (Option<&mut RuleEntry>, bool) {
        match self.rules.get(key) {
            Some(r) if r.is_expired(clock) => {
                self.rules.remove(key);
                (None, true)
            }
            Some(_) => (self.rules.get_mut(key), false),
            None => (None, false),
        }
    }
}

pub struct MirrorPipeline {
    detector: FlowDetector,
    cfg: MirrorConfig,
    ttl: Duration,
    rules: RuleTable,
    replay: HashMap<FlowKey, Vec<LoggedPacket>>,
    logged: Vec<LoggedPacket>,
    events: Vec<ErroneousEvent>,
    counters: PipelineCounters,
}

impl MirrorPipeline {
    pub fn new(detector: FlowDetector, cfg: MirrorConfig) -> Self {
        MirrorPipeline {
            ttl: Duration::from_secs_f64(cfg.rule_ttl.max(0.0)),
            rules: RuleTable::new(cfg.rule_table_size),
            detector,
            cfg,
            replay: HashMap::new(),
            logged: Vec::new(),
            events: Vec::new(),
            counters: PipelineCounters::default(),
        }
    }

    pub fn detector(&self) -> &FlowDetector {
        &self.detector
    }

    pub fn detector_mut(&mut self) -> &mut FlowDetector {
        &mut self.detector
    }

    pub fn stats(&self) -> &PipelineCounters {
        &self.counters
    }

    pub fn rules(&self) -> &RuleTable {
        &self.rules
    }

    pub fn offer(&mut self, seq: u64, pkt: &PacketRecord, raw: &[u8]) -> Disposition {
        self.counters.offered += 1;
        self.detector.advance(pkt.ts);
        self.apply_resolutions(pkt.ts);
        let clock = self.detector.clock().unwrap_or(pkt.ts);

        if let Some((key, action)) = self.match_rule(pkt, clock) {
            self.counters.fast_path_hits += 1;
            self.detector.fast_path(pkt, &key);
            self.apply_resolutions(clock);
            self.collect_events();
            return match action {
                RuleAction::Log => {
                    self.log(LoggedPacket { seq, ts: pkt.ts, bytes: raw.to_vec() }, false);
                    Disposition::Logged
                }
                RuleAction::Ignore => Disposition::Ignored,
            };
        }

        self.counters.slow_path_pkts += 1;
        let class = self.detector.inspect(pkt);
        let record = || LoggedPacket { seq, ts: pkt.ts, bytes: raw.to_vec() };
        match class {
            PacketClass::Pending(key) => {
                if self.cfg.replay_buffer {
                    let buf = self.replay.entry(key).or_default();
                    if buf.len() < self.cfg.replay_capacity {
                        buf.push(record());
                    } else {
                        self.counters.replay_overflow += 1;
                    }
                }
            }
            PacketClass::Flow { key, erroneous } => {
                if erroneous {
                    self.log(record(), false);
                }
                if self.rules.get(&key).is_none() {
                    let action = if erroneous { RuleAction::Log } else { RuleAction::Ignore };
                    self.install(key, action, clock);
                }
            }
            PacketClass::EventTrigger => self.log(record(), false),
            PacketClass::Untracked => {}
        }
        self.apply_resolutions(clock);
        self.collect_events();
        Disposition::SlowPath
    }

    /// End of trace: decides the remaining flows and returns every event not
    /// yet drained.
    pub fn flush(&mut self, end_ts: Timestamp) -> Vec<ErroneousEvent> {
        let tail = self.detector.flush(end_ts);
        self.apply_resolutions(end_ts);
        self.replay.clear();
        self.events.extend(tail);
        std::mem::take(&mut self.events)
    }

    pub fn drain_events(&mut self) -> Vec<ErroneousEvent> {
        std::mem::take(&mut self.events)
    }

    /// Packets handed to the logger so far. Replayed packets arrive after
    /// later packets of other flows; sort by `seq` for capture order.
    pub fn drain_logged(&mut self) -> Vec<LoggedPacket> {
        std::mem::take(&mut self.logged)
    }

    fn match_rule(&mut self, pkt: &PacketRecord, clock: Timestamp) -> Option<(FlowKey, RuleAction)> {
        if !self.cfg.rules_enabled || pkt.is_icmp_error() {
            return None;
        }
        let keys = FlowKey::for_packet(pkt);
        for key in [keys.as_initiator, keys.as_responder].into_iter().flatten() {
            let (rule, expired) = self.rules.lookup(&key, clock);
            if let Some(r) = rule {
                r.hits += 1;
                if r.action == RuleAction::Ignore {
                    r.installed_at = r.installed_at.max(pkt.ts);
                }
                return Some((key, r.action));
            }
            if expired {
                self.counters.rules_expired += 1;
            }
        }
        None
    }

    fn install(&mut self, key: FlowKey, action: RuleAction, clock: Timestamp) {
        if !self.cfg.rules_enabled {
            return;
        }
        let entry = RuleEntry { key, action, installed_at: clock, ttl: self.ttl, hits: 0 };
        let (expired, evicted) = self.rules.install(entry, clock);
        self.counters.rules_installed += 1;
        self.counters.rules_expired += expired;
        self.counters.rules_evicted += evicted;
    }

    fn apply_resolutions(&mut self, clock: Timestamp) {
        for r in self.detector.drain_resolutions() {
            match r {
                Resolution::Benign(key) => {
                    self.replay.remove(&key);
                    self.install(key, RuleAction::Ignore, clock);
                }
                Resolution::Erroneous(key) => {
                    if let Some(buf) = self.replay.remove(&key) {
                        for p in buf {
                            self.log(p, true);
                        }
                    }
                    self.install(key, RuleAction::Log, clock);
                }
                Resolution::Closed(key) => {
                    self.replay.remove(&key);
                    self.rules.remove(&key);
                }
            }
        }
    }

    fn collect_events(&mut self) {
        self.events.extend(self.detector.release());
    }

    fn log(&mut self, p: LoggedPacket, replayed: bool) {
        self.counters.logged_pkts += 1;
        if replayed {
            self.counters.replayed_pkts += 1;
        }
        self.logged.push(p);
    }
}

#[cfg(test)]
mod tests {
    use std::net::Ipv4Addr;

    use super::*;
    use crate::codec::build::{self, ACK, SYN, SYN_ACK};
    use crate::codec::{decode, LinkType};
    use crate::detector::DetectorConfig;

    fn det() -> FlowDetector {
        let mut c = DetectorConfig::with_prefixes(vec!["10.0.0.0/16".parse().unwrap()]);
        c.reorder_slack = 0.0;
        FlowDetector::new(c).unwrap()
    }

    fn offer(m: &mut MirrorPipeline, seq: u64, t: f64, d: &[u8]) -> Disposition {
        let prefixes = m.detector().config().internal_prefixes.clone();
        let p = decode(Timestamp::from_secs_f64(t), d, LinkType::RawIp, &prefixes).unwrap();
        m.offer(seq, &p, d)
    }

    fn a() -> Ipv4Addr {
        Ipv4Addr::new(10, 0, 0, 1)
    }

    fn b() -> Ipv4Addr {
        Ipv4Addr::new(192, 0, 2, 1)
    }

    #[test]
    fn long_tcp_flow_mostly_fast_path() {
        let mut m = MirrorPipeline::new(det(), MirrorConfig::default());
        let mut slow = 0;
        for i in 0..100u64 {
            let t = i as f64 * 0.01;
            let d = match i {
                0 => build::tcp(a(), 5000, b(), 443, SYN),
                1 => build::tcp(b(), 443, a(), 5000, SYN_ACK),
                _ if i % 2 == 0 => build::tcp(a(), 5000, b(), 443, ACK),
                _ => build::tcp(b(), 443, a(), 5000, ACK),
            };
            let disp = offer(&mut m, i, t, &d);
            if disp == Disposition::SlowPath {
                slow += 1;
            } else {
                assert_eq!(disp, Disposition::Ignored);
            }
        }
        assert!(slow <= 3, "slow path took {slow} packets");
        let s = m.stats();
        assert_eq!(s.fast_path_hits + s.slow_path_pkts, 100);
        assert_eq!(s.logged_pkts, 0);
        assert!(m.flush(Timestamp::from_secs(100)).is_empty());
        assert_eq!(m.detector().counters().benign_pkts, 50);
    }

    #[test]
    fn erroneous_flow_logged_after_rule_and_replayed_before() {
        let mut m = MirrorPipeline::new(det(), MirrorConfig::default());
        for i in 0..3 {
            assert_eq!(offer(&mut m, i, i as f64, &build::udp(a(), 7, b(), 123, 48)), Disposition::SlowPath);
        }
        // Deadline of the flow passes at t=10; the next packet sees a LOG rule.
        assert_eq!(offer(&mut m, 3, 20.0, &build::udp(a(), 7, b(), 123, 48)), Disposition::Logged);
        let logged: Vec<u64> = m.drain_logged().iter().map(|p| p.seq).collect();
        assert_eq!(logged, vec![0, 1, 2, 3]);
        assert_eq!(m.stats().replayed_pkts, 3);
        let ev = m.flush(Timestamp::from_secs(25));
        assert_eq!(ev.len(), 1);
    }

    #[test]
    fn replay_toggle_drops_preclassification_packets() {
        let cfg = MirrorConfig { replay_buffer: false, ..Default::default() };
        let mut m = MirrorPipeline::new(det(), cfg);
        offer(&mut m, 0, 0.0, &build::udp(a(), 7, b(), 123, 48));
        offer(&mut m, 1, 20.0, &build::udp(a(), 7, b(), 123, 48));
        assert_eq!(m.drain_logged().len(), 1);
    }

    #[test]
    fn expired_rule_goes_to_slow_path() {
        let cfg = MirrorConfig { rule_ttl: 5.0, ..Default::default() };
        let mut m = MirrorPipeline::new(det(), cfg);
        offer(&mut m, 0, 0.0, &build::udp(a(), 7, b(), 123, 48));
        assert_eq!(offer(&mut m, 1, 12.0, &build::udp(a(), 7, b(), 123, 48)), Disposition::Logged);
        // Installed when the timeout was observed at 12; LOG rules do not
        // refresh, so it is gone by 18.
        assert_eq!(offer(&mut m, 2, 18.0, &build::udp(a(), 7, b(), 123, 48)), Disposition::SlowPath);
        assert_eq!(m.stats().rules_expired, 1);
        // The slow path reinstalls it.
        assert_eq!(offer(&mut m, 3, 19.0, &build::udp(a(), 7, b(), 123, 48)), Disposition::Logged);
    }

    #[test]
    fn full_table_evicts_least_hit() {
        let mut t = RuleTable::new(2);
        let k = |p| FlowKey::new((a(), p), (b(), 1), crate::codec::IpProto::Udp);
        let e = |p, hits| RuleEntry {
            key: k(p),
            action: RuleAction::Ignore,
            installed_at: Timestamp::from_secs(0),
            ttl: Duration::from_secs(100),
            hits,
        };
        t.install(e(1, 5), Timestamp::from_secs(0));
        t.install(e(2, 1), Timestamp::from_secs(0));
        assert_eq!(t.install(e(3, 0), Timestamp::from_secs(1)), (0, 1));
        assert!(t.get(&k(2)).is_none());
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn icmp_errors_always_inspected() {
        let mut m = MirrorPipeline::new(det(), MirrorConfig::default());
        let out = build::udp(a(), 9, b(), 33434, 0);
        offer(&mut m, 0, 0.0, &out);
        let err = build::icmp_error(b(), a(), 3, 3, &out);
        assert_eq!(offer(&mut m, 1, 0.5, &err), Disposition::SlowPath);
        assert_eq!(offer(&mut m, 2, 0.6, &out), Disposition::Logged);
        let mut logged: Vec<u64> = m.drain_logged().iter().map(|p| p.seq).collect();
        logged.sort();
        assert_eq!(logged, vec![0, 1, 2]);
    }
}
