//! Stateful classification of outbound traffic into the three erroneous
//! patterns.
//!
//! * **A**: an outbound flow receives no reverse packet within `t_resp`.
//! * **B**: an external host answers an outbound packet with an ICMP error.
//! * **C**: an internal host emits an ICMP error toward an external host.
//!
//! Only flows initiated by internal hosts are tracked. Inbound-initiated
//! conversations are remembered just long enough to recognise the internal
//! side's replies as responses rather than new flows.
//!
//! Timers (response deadlines, idle eviction, the ICMP correlation memory)
//! run on virtual time: the largest timestamp seen so far minus
//! `reorder_slack`. Events are held back until that watermark passes them, so
//! the emitted stream is ordered by `(ts, pattern, flow)` as long as the
//! capture is not reordered by more than the slack.

mod config;
mod key;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

pub use config::{ConfigError, DetectorConfig};
pub use key::{FlowKey, FlowKeyParseError, PacketKeys};

use crate::codec::{is_internal, Direction, InnerQuote, IpProto, PacketRecord, Undecodable};
use crate::time::{Duration, Timestamp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pattern {
    /// Elicited no response.
    A,
    /// Elicited an ICMP error from outside.
    B,
    /// ICMP error generated by an internal host.
    C,
}

impl Pattern {
    pub fn letter(self) -> &'static str {
        match self {
            Pattern::A => "A",
            Pattern::B => "B",
            Pattern::C => "C",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErroneousEvent {
    pub pattern: Pattern,
    pub ts: Timestamp,
    pub flow: FlowKey,
    pub icmp_type: Option<u8>,
    pub icmp_code: Option<u8>,
    pub inner: Option<InnerQuote>,
    pub pkts_in_flow: u64,
    /// Pattern B only: the ICMP error matched a tracked outbound flow.
    pub correlated: bool,
    /// Pattern A raised because the flow table overflowed before the deadline.
    pub evicted_early: bool,
    /// Internal addresses have been pseudonymised.
    pub anon: bool,
}

impl ErroneousEvent {
    /// Internal endpoint of the event.
    pub fn internal_host(&self) -> std::net::Ipv4Addr {
        self.flow.initiator_ip
    }

    /// External endpoint of the event.
    pub fn external_host(&self) -> std::net::Ipv4Addr {
        self.flow.responder_ip
    }

    /// Total order used for the event log: timestamp, pattern, then flow key.
    pub fn order_key(&self) -> (Timestamp, Pattern, FlowKey) {
        (self.ts, self.pattern, self.flow)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FlowPhase {
    AwaitingResponse,
    Bidirectional,
    ErroneousA,
    ErroneousB,
    Refused,
}

impl FlowPhase {
    pub fn is_erroneous(self) -> bool {
        matches!(self, FlowPhase::ErroneousA | FlowPhase::ErroneousB)
    }

    pub fn is_benign(self) -> bool {
        matches!(self, FlowPhase::Bidirectional | FlowPhase::Refused)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowState {
    pub key: FlowKey,
    pub phase: FlowPhase,
    pub first_ts: Timestamp,
    pub last_ts: Timestamp,
    pub fwd_pkts: u64,
    pub rev_pkts: u64,
    /// Set only while awaiting a response.
    pub deadline: Option<Timestamp>,
    /// Every forward packet so far was a bare TCP SYN.
    syn_only: bool,
}

/// What the detector concluded about one packet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PacketClass {
    /// Belongs to an outbound flow that has not been classified yet.
    Pending(FlowKey),
    /// Belongs to a classified outbound flow.
    Flow { key: FlowKey, erroneous: bool },
    /// An ICMP error that produced a pattern B or C event.
    EventTrigger,
    /// Benign, or outside the scope of classification.
    Untracked,
}

/// Classification changes the mirror pipeline reacts to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Benign(FlowKey),
    Erroneous(FlowKey),
    /// The flow left the table.
    Closed(FlowKey),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorCounters {
    pub packets_seen: u64,
    pub outbound_pkts: u64,
    pub inbound_pkts: u64,
    pub internal_pkts: u64,
    pub transit_pkts: u64,
    pub unknown_pkts: u64,
    pub non_ip: u64,
    pub undecodable: u64,
    /// Outbound packets of erroneous flows plus pattern-C packets.
    pub erroneous_pkts: u64,
    pub benign_pkts: u64,
    /// Outbound packets of flows still awaiting classification.
    pub pending_pkts: u64,
    /// Flows whose deadline lay beyond the end of the trace.
    pub indeterminate: u64,
    pub indeterminate_pkts: u64,
    pub evictions: u64,
    pub refused: u64,
    /// Reverse packets that reached a flow after its pattern-A timeout.
    pub late_replies: u64,
    pub flows_created: u64,
    pub events_a: u64,
    pub events_b: u64,
    pub events_c: u64,
    pub uncorrelated_b: u64,
}

impl DetectorCounters {
    /// erroneous / outbound, or 0 with no outbound traffic.
    pub fn erroneous_ratio(&self) -> f64 {
        if self.outbound_pkts == 0 {
            0.0
        } else {
            self.erroneous_pkts as f64 / self.outbound_pkts as f64
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct RecentFlow {
    phase: FlowPhase,
    fwd_pkts: u64,
    expires: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Queued {
    order: (Timestamp, Pattern, FlowKey),
    seq: u64,
    event: QueuedEvent,
}

// Wrapper so `Queued` can derive Ord without ordering on event payloads.
#[derive(Clone, Debug, PartialEq, Eq)]
struct QueuedEvent(ErroneousEvent);

impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueuedEvent {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

pub struct FlowDetector {
    cfg: DetectorConfig,
    t_resp: Duration,
    idle: Duration,
    slack: Duration,
    memory: Duration,
    flows: HashMap<FlowKey, FlowState>,
    deadlines: BinaryHeap<Reverse<(Timestamp, FlowKey)>>,
    idle_queue: BinaryHeap<Reverse<(Timestamp, FlowKey)>>,
    recent: HashMap<FlowKey, RecentFlow>,
    recent_queue: VecDeque<(Timestamp, FlowKey)>,
    responders: HashMap<FlowKey, Timestamp>,
    responder_queue: BinaryHeap<Reverse<(Timestamp, FlowKey)>>,
    clock: Option<Timestamp>,
    outbox: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    resolutions: Vec<Resolution>,
    refused: Vec<FlowKey>,
    counters: DetectorCounters,
}

impl FlowDetector {
    pub fn new(cfg: DetectorConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        Ok(FlowDetector {
            t_resp: cfg.t_resp(),
            idle: cfg.idle_evict(),
            slack: cfg.reorder_slack(),
            memory: cfg.recent_flow_memory(),
            cfg,
            flows: HashMap::new(),
            deadlines: BinaryHeap::new(),
            idle_queue: BinaryHeap::new(),
            recent: HashMap::new(),
            recent_queue: VecDeque::new(),
            responders: HashMap::new(),
            responder_queue: BinaryHeap::new(),
            clock: None,
            outbox: BinaryHeap::new(),
            seq: 0,
            resolutions: Vec::new(),
            refused: Vec::new(),
            counters: DetectorCounters::default(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn counters(&self) -> &DetectorCounters {
        &self.counters
    }

    /// Flows answered by a TCP RST to a bare SYN, in order of refusal.
    pub fn refused_flows(&self) -> &[FlowKey] {
        &self.refused
    }

    pub fn flow(&self, key: &FlowKey) -> Option<&FlowState> {
        self.flows.get(key)
    }

    pub fn live_flows(&self) -> usize {
        self.flows.len()
    }

    pub fn clock(&self) -> Option<Timestamp> {
        self.clock
    }

    /// Processes one decoded packet and returns the events whose timestamps
    /// the watermark has passed.
    pub fn ingest(&mut self, pkt: &PacketRecord) -> Vec<ErroneousEvent> {
        self.advance(pkt.ts);
        self.inspect(pkt);
        self.release()
    }

    /// Accounts for a packet the codec could not decode.
    pub fn note_undecodable(&mut self, err: &Undecodable) {
        self.counters.packets_seen += 1;
        if err.is_non_ip() {
            self.counters.non_ip += 1;
        } else {
            self.counters.undecodable += 1;
        }
    }

    /// Moves virtual time forward to `ts` and fires every timer below the
    /// watermark.
    pub fn advance(&mut self, ts: Timestamp) {
        let clock = match self.clock {
            Some(c) if c >= ts => c,
            _ => ts,
        };
        self.clock = Some(clock);
        let wm = clock - self.slack;
        self.fire_deadlines(|d| d < wm);
        self.expire_idle(wm);
        self.expire_recent(wm);
        self.expire_responders(wm);
    }

    /// Full stateful inspection of one packet. Call [`advance`](Self::advance)
    /// first.
    pub fn inspect(&mut self, pkt: &PacketRecord) -> PacketClass {
        self.count_direction(pkt);
        self.classify(pkt)
    }

    /// Accounting for a packet whose flow is already classified, without
    /// running the state machine. Used for packets that matched an installed
    /// rule; call [`advance`](Self::advance) first.
    pub fn fast_path(&mut self, pkt: &PacketRecord, key: &FlowKey) -> PacketClass {
        self.count_direction(pkt);
        if !self.flows.contains_key(key) {
            return self.classify(pkt);
        }
        let outbound = FlowKey::for_packet(pkt).as_initiator.as_ref() == Some(key);
        if outbound {
            self.forward_packet(key, pkt)
        } else {
            self.reverse_packet(key, pkt)
        }
    }

    /// Events whose timestamp lies strictly below the watermark, in log order.
    pub fn release(&mut self) -> Vec<ErroneousEvent> {
        let Some(clock) = self.clock else { return Vec::new() };
        let wm = clock - self.slack;
        let mut out = Vec::new();
        while let Some(Reverse(q)) = self.outbox.peek() {
            if q.order.0 >= wm {
                break;
            }
            let Reverse(q) = self.outbox.pop().expect("peeked");
            out.push(q.event.0);
        }
        out
    }

    pub fn drain_resolutions(&mut self) -> Vec<Resolution> {
        std::mem::take(&mut self.resolutions)
    }

    /// End of trace. Flows whose deadline is at or before `end_ts` raise
    /// pattern A; the rest are counted as indeterminate. Returns every event
    /// still held back.
    pub fn flush(&mut self, end_ts: Timestamp) -> Vec<ErroneousEvent> {
        self.advance(end_ts);
        self.fire_deadlines(|d| d <= end_ts);
        let mut undecided: Vec<FlowKey> = self
            .flows
            .values()
            .filter(|f| f.phase == FlowPhase::AwaitingResponse)
            .map(|f| f.key)
            .collect();
        undecided.sort();
        for key in undecided {
            let f = self.flows.get_mut(&key).expect("listed");
            f.deadline = None;
            let n = f.fwd_pkts;
            self.counters.pending_pkts -= n;
            self.counters.indeterminate_pkts += n;
            self.counters.indeterminate += 1;
        }
        let mut out = Vec::with_capacity(self.outbox.len());
        while let Some(Reverse(q)) = self.outbox.pop() {
            out.push(q.event.0);
        }
        out
    }

    fn count_direction(&mut self, pkt: &PacketRecord) {
        let c = &mut self.counters;
        c.packets_seen += 1;
        match pkt.direction {
            Direction::Outbound => c.outbound_pkts += 1,
            Direction::Inbound => c.inbound_pkts += 1,
            Direction::Internal => c.internal_pkts += 1,
            Direction::Transit => c.transit_pkts += 1,
            Direction::Unknown => c.unknown_pkts += 1,
        }
    }

    fn classify(&mut self, pkt: &PacketRecord) -> PacketClass {
        match pkt.direction {
            Direction::Outbound => self.outbound(pkt),
            Direction::Inbound => self.inbound(pkt),
            _ => PacketClass::Untracked,
        }
    }

    fn outbound(&mut self, pkt: &PacketRecord) -> PacketClass {
        if pkt.is_icmp_error() {
            self.counters.erroneous_pkts += 1;
            self.counters.events_c += 1;
            self.emit(ErroneousEvent {
                pattern: Pattern::C,
                ts: pkt.ts,
                flow: FlowKey::host_pair(pkt.src_ip, pkt.dst_ip, IpProto::Icmp),
                icmp_type: pkt.icmp_type,
                icmp_code: pkt.icmp_code,
                inner: pkt.embedded,
                pkts_in_flow: 1,
                correlated: false,
                evicted_early: false,
                anon: false,
            });
            return PacketClass::EventTrigger;
        }
        let keys = FlowKey::for_packet(pkt);
        if let Some(key) = keys.as_initiator {
            if self.flows.contains_key(&key) {
                return self.forward_packet(&key, pkt);
            }
        }
        if let Some(resp) = keys.as_responder {
            if let Some(seen) = self.responders.get_mut(&resp) {
                *seen = (*seen).max(pkt.ts);
                self.counters.benign_pkts += 1;
                return PacketClass::Untracked;
            }
        }
        match keys.as_initiator {
            // Resets never expect an answer, so they do not open flows.
            Some(key) if !(pkt.ip_proto == IpProto::Tcp && pkt.tcp_flags.rst()) => self.open_flow(key, pkt),
            _ => {
                self.counters.benign_pkts += 1;
                PacketClass::Untracked
            }
        }
    }

    fn inbound(&mut self, pkt: &PacketRecord) -> PacketClass {
        if pkt.is_icmp_error() {
            return self.inbound_icmp_error(pkt);
        }
        let keys = FlowKey::for_packet(pkt);
        if let Some(key) = keys.as_responder {
            if self.flows.contains_key(&key) {
                return self.reverse_packet(&key, pkt);
            }
        }
        if let Some(key) = keys.as_initiator {
            self.remember_responder(key, pkt.ts);
        }
        PacketClass::Untracked
    }

    fn open_flow(&mut self, key: FlowKey, pkt: &PacketRecord) -> PacketClass {
        if self.flows.len() >= self.cfg.max_flows {
            self.evict_oldest();
        }
        let deadline = pkt.ts + self.t_resp;
        self.flows.insert(
            key,
            FlowState {
                key,
                phase: FlowPhase::AwaitingResponse,
                first_ts: pkt.ts,
                last_ts: pkt.ts,
                fwd_pkts: 1,
                rev_pkts: 0,
                deadline: Some(deadline),
                syn_only: pkt.ip_proto == IpProto::Tcp && pkt.tcp_flags.syn_only(),
            },
        );
        self.deadlines.push(Reverse((deadline, key)));
        self.idle_queue.push(Reverse((pkt.ts + self.idle, key)));
        self.counters.flows_created += 1;
        self.counters.pending_pkts += 1;
        PacketClass::Pending(key)
    }

    fn forward_packet(&mut self, key: &FlowKey, pkt: &PacketRecord) -> PacketClass {
        let f = self.flows.get_mut(key).expect("caller checked");
        f.fwd_pkts += 1;
        f.last_ts = f.last_ts.max(pkt.ts);
        f.syn_only &= pkt.ip_proto == IpProto::Tcp && pkt.tcp_flags.syn_only();
        match f.phase {
            FlowPhase::AwaitingResponse => {
                self.counters.pending_pkts += 1;
                PacketClass::Pending(*key)
            }
            phase if phase.is_erroneous() => {
                self.counters.erroneous_pkts += 1;
                PacketClass::Flow { key: *key, erroneous: true }
            }
            _ => {
                self.counters.benign_pkts += 1;
                PacketClass::Flow { key: *key, erroneous: false }
            }
        }
    }

    fn reverse_packet(&mut self, key: &FlowKey, pkt: &PacketRecord) -> PacketClass {
        let refuse_rst = self.cfg.treat_rst_as_refused;
        let f = self.flows.get_mut(key).expect("caller checked");
        f.last_ts = f.last_ts.max(pkt.ts);
        match f.phase {
            FlowPhase::AwaitingResponse => {
                f.rev_pkts += 1;
                f.deadline = None;
                let refused = refuse_rst && f.syn_only && pkt.ip_proto == IpProto::Tcp && pkt.tcp_flags.rst();
                f.phase = if refused { FlowPhase::Refused } else { FlowPhase::Bidirectional };
                let n = f.fwd_pkts;
                self.counters.pending_pkts -= n;
                self.counters.benign_pkts += n;
                if refused {
                    self.counters.refused += 1;
                    self.refused.push(*key);
                }
                self.resolutions.push(Resolution::Benign(*key));
                PacketClass::Flow { key: *key, erroneous: false }
            }
            FlowPhase::ErroneousA => {
                // The timeout already fired; the flow keeps its classification.
                self.counters.late_replies += 1;
                PacketClass::Flow { key: *key, erroneous: true }
            }
            phase => {
                f.rev_pkts += 1;
                PacketClass::Flow { key: *key, erroneous: phase.is_erroneous() }
            }
        }
    }

    fn inbound_icmp_error(&mut self, pkt: &PacketRecord) -> PacketClass {
        let quoted = pkt.embedded.map(|q| FlowKey::from_quote(&q));
        if let Some(k) = quoted {
            if !is_internal(k.initiator_ip, &self.cfg.internal_prefixes) {
                // Quotes a datagram that did not leave from inside.
                return PacketClass::Untracked;
            }
        }
        let mut correlated = false;
        let mut pkts = 0;
        if let Some(k) = quoted {
            if let Some(f) = self.flows.get_mut(&k) {
                correlated = true;
                pkts = f.fwd_pkts;
                let prev = f.phase;
                f.phase = FlowPhase::ErroneousB;
                f.deadline = None;
                match prev {
                    FlowPhase::AwaitingResponse => {
                        self.counters.pending_pkts -= pkts;
                        self.counters.erroneous_pkts += pkts;
                        self.resolutions.push(Resolution::Erroneous(k));
                    }
                    FlowPhase::Bidirectional | FlowPhase::Refused => {
                        self.counters.benign_pkts -= pkts;
                        self.counters.erroneous_pkts += pkts;
                        self.resolutions.push(Resolution::Erroneous(k));
                    }
                    FlowPhase::ErroneousA | FlowPhase::ErroneousB => {}
                }
            } else if let Some(r) = self.recent.get_mut(&k) {
                correlated = true;
                pkts = r.fwd_pkts;
                if r.phase.is_benign() {
                    self.counters.benign_pkts -= pkts;
                    self.counters.erroneous_pkts += pkts;
                }
                r.phase = FlowPhase::ErroneousB;
            }
        }
        let flow = quoted.unwrap_or_else(|| FlowKey::host_pair(pkt.dst_ip, pkt.src_ip, IpProto::Icmp));
        self.counters.events_b += 1;
        if !correlated {
            self.counters.uncorrelated_b += 1;
        }
        self.emit(ErroneousEvent {
            pattern: Pattern::B,
            ts: pkt.ts,
            flow,
            icmp_type: pkt.icmp_type,
            icmp_code: pkt.icmp_code,
            inner: pkt.embedded,
            pkts_in_flow: pkts,
            correlated,
            evicted_early: false,
            anon: false,
        });
        PacketClass::EventTrigger
    }

    fn remember_responder(&mut self, key: FlowKey, ts: Timestamp) {
        match self.responders.get_mut(&key) {
            Some(seen) => *seen = (*seen).max(ts),
            None => {
                if self.responders.len() >= self.cfg.max_flows {
                    self.drop_oldest_responder();
                }
                self.responders.insert(key, ts);
                self.responder_queue.push(Reverse((ts + self.idle, key)));
            }
        }
    }

    fn drop_oldest_responder(&mut self) {
        while let Some(Reverse((exp, key))) = self.responder_queue.pop() {
            let Some(&seen) = self.responders.get(&key) else { continue };
            let actual = seen + self.idle;
            if actual != exp {
                self.responder_queue.push(Reverse((actual, key)));
                continue;
            }
            self.responders.remove(&key);
            return;
        }
    }

    fn emit(&mut self, event: ErroneousEvent) {
        let seq = self.seq;
        self.seq += 1;
        self.outbox.push(Reverse(Queued { order: event.order_key(), seq, event: QueuedEvent(event) }));
    }

    fn raise_a(&mut self, key: FlowKey, ts: Timestamp, evicted_early: bool) {
        let f = self.flows.get_mut(&key).expect("caller checked");
        debug_assert_eq!(f.phase, FlowPhase::AwaitingResponse);
        debug_assert_eq!(f.rev_pkts, 0);
        f.phase = FlowPhase::ErroneousA;
        f.deadline = None;
        let n = f.fwd_pkts;
        self.counters.pending_pkts -= n;
        self.counters.erroneous_pkts += n;
        self.counters.events_a += 1;
        self.resolutions.push(Resolution::Erroneous(key));
        self.emit(ErroneousEvent {
            pattern: Pattern::A,
            ts,
            flow: key,
            icmp_type: None,
            icmp_code: None,
            inner: None,
            pkts_in_flow: n,
            correlated: false,
            evicted_early,
            anon: false,
        });
    }

    fn fire_deadlines(&mut self, due: impl Fn(Timestamp) -> bool) {
        while let Some(&Reverse((deadline, key))) = self.deadlines.peek() {
            if !due(deadline) {
                break;
            }
            self.deadlines.pop();
            let live = self
                .flows
                .get(&key)
                .is_some_and(|f| f.phase == FlowPhase::AwaitingResponse && f.deadline == Some(deadline));
            if live {
                self.raise_a(key, deadline, false);
            }
        }
    }

    fn expire_idle(&mut self, wm: Timestamp) {
        while let Some(&Reverse((exp, key))) = self.idle_queue.peek() {
            if exp >= wm {
                break;
            }
            self.idle_queue.pop();
            let Some(f) = self.flows.get(&key) else { continue };
            let actual = f.last_ts + self.idle;
            if actual != exp {
                self.idle_queue.push(Reverse((actual, key)));
                continue;
            }
            if f.phase == FlowPhase::AwaitingResponse {
                let deadline = f.deadline.unwrap_or(exp);
                self.raise_a(key, deadline, false);
            }
            self.retire(key);
        }
    }

    fn evict_oldest(&mut self) {
        while let Some(Reverse((exp, key))) = self.idle_queue.pop() {
            let Some(f) = self.flows.get(&key) else { continue };
            let actual = f.last_ts + self.idle;
            if actual != exp {
                self.idle_queue.push(Reverse((actual, key)));
                continue;
            }
            self.counters.evictions += 1;
            if f.phase == FlowPhase::AwaitingResponse {
                let now = self.clock.unwrap_or(f.last_ts);
                self.raise_a(key, now, true);
            }
            self.retire(key);
            return;
        }
    }

    fn retire(&mut self, key: FlowKey) {
        let f = self.flows.remove(&key).expect("caller checked");
        let expires = self.clock.unwrap_or(f.last_ts) + self.memory;
        self.recent.insert(key, RecentFlow { phase: f.phase, fwd_pkts: f.fwd_pkts, expires });
        self.recent_queue.push_back((expires, key));
        self.resolutions.push(Resolution::Closed(key));
    }

    fn expire_recent(&mut self, wm: Timestamp) {
        while let Some(&(expires, key)) = self.recent_queue.front() {
            if expires >= wm {
                break;
            }
            self.recent_queue.pop_front();
            if self.recent.get(&key).is_some_and(|r| r.expires == expires) {
                self.recent.remove(&key);
            }
        }
    }

    fn expire_responders(&mut self, wm: Timestamp) {
        while let Some(&Reverse((exp, key))) = self.responder_queue.peek() {
            if exp >= wm {
                break;
            }
            self.responder_queue.pop();
            let Some(&seen) = self.responders.get(&key) else { continue };
            let actual = seen + self.idle;
            if actual != exp {
                self.responder_queue.push(Reverse((actual, key)));
            } else {
                self.responders.remove(&key);
            }
        }
    }
}
