//! Labelled synthetic traces.
//!
//! A scenario mixes well-formed background traffic with single-packet
//! erroneous flows (noise) and planted anomalies. Every erroneous flow consists
//! of exactly one outbound packet, so the number of erroneous outbound packets
//! equals the number of events a correct detector reports. The ground truth
//! lists every outbound flow and every internally generated ICMP error with
//! its label, plus the finding each planted anomaly should produce.

mod scenario;

use std::collections::{BTreeSet, HashSet};
use std::net::Ipv4Addr;
use std::path::Path;

use ipnet::Ipv4Net;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use serde::{Deserialize, Serialize};

pub use scenario::*;

use crate::codec::build::{self, Transport, ACK, RST_ACK, SYN, SYN_ACK};
use crate::codec::{is_internal, IpProto, LinkType, PcapError, PcapWriter, TcpFlags, DEFAULT_SNAP_LEN};
use crate::detector::FlowKey;
use crate::rules::{BogonThresholds, Category, RuleId};
use crate::time::Timestamp;

/// Margin kept between the last erroneous flow and the end of the trace so
/// that every response deadline falls inside it.
const TAIL_MARGIN: f64 = 120.0;
const FIN_ACK: u8 = TcpFlags::FIN | TcpFlags::ACK;
const PSH_ACK: u8 = TcpFlags::PSH | TcpFlags::ACK;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    A,
    B,
    C,
    Refused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowLabel {
    pub key: FlowKey,
    pub label: Label,
    pub out_pkts: u64,
    pub first_ts: Timestamp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub packets: u64,
    pub outbound_pkts: u64,
    pub erroneous_pkts: u64,
    pub benign_pkts: u64,
    pub refused_flows: u64,
    pub events_a: u64,
    pub events_b: u64,
    pub events_c: u64,
}

impl Totals {
    pub fn events(&self) -> u64 {
        self.events_a + self.events_b + self.events_c
    }

    pub fn erroneous_ratio(&self) -> f64 {
        if self.outbound_pkts == 0 {
            0.0
        } else {
            self.erroneous_pkts as f64 / self.outbound_pkts as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedFinding {
    pub rule_id: RuleId,
    pub category: Category,
    pub internal_hosts: usize,
    pub external_hosts: usize,
    pub packets: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: String,
    pub seed: u64,
    pub first_ts: Option<Timestamp>,
    pub last_ts: Option<Timestamp>,
    pub totals: Totals,
    /// Events that belong to planted anomalies.
    pub planted_events: u64,
    pub planted_share: f64,
    pub expected_findings: Vec<ExpectedFinding>,
    pub flows: Vec<FlowLabel>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<GroundTruth, SynthError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| SynthError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|e| SynthError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let f = std::fs::File::create(path)
            .map_err(|source| SynthError::Io { path: path.display().to_string(), source })?;
        let mut w = std::io::BufWriter::new(f);
        serde_json::to_writer(&mut w, self).map_err(|e| SynthError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
        std::io::Write::write_all(&mut w, b"\n")
            .map_err(|source| SynthError::Io { path: path.display().to_string(), source })
    }
}

#[derive(Clone, Debug)]
pub struct SynthPacket {
    pub ts: Timestamp,
    seq: u64,
    pub frame: Vec<u8>,
    pub orig_len: u32,
}

pub struct Trace {
    /// Ethernet frames in timestamp order, cut to the default snap length.
    pub packets: Vec<SynthPacket>,
    pub truth: GroundTruth,
}

impl Trace {
    pub fn write_pcap(&self, path: &Path) -> Result<(), SynthError> {
        let f = std::fs::File::create(path)
            .map_err(|source| SynthError::Io { path: path.display().to_string(), source })?;
        self.write_pcap_to(std::io::BufWriter::new(f))
    }

    pub fn write_pcap_to<W: std::io::Write>(&self, out: W) -> Result<(), SynthError> {
        let mut w = PcapWriter::new(out, LinkType::Ethernet, DEFAULT_SNAP_LEN).map_err(PcapError::Io)?;
        for p in &self.packets {
            w.write_record(p.ts, &p.frame, p.orig_len)?;
        }
        w.finish()?;
        Ok(())
    }
}

pub fn generate(sc: &Scenario) -> Result<Trace, SynthError> {
    validate(sc)?;
    let mut g = Gen::new(sc);
    g.background();
    let mut expected = Vec::new();
    for p in &sc.planted {
        expected.push(g.plant(p));
    }
    let planted_events = g.totals.events();
    for _ in 0..sc.noise.a_flows {
        g.noise_a();
    }
    for _ in 0..sc.noise.b_flows {
        g.noise_b();
    }
    if let Some(f) = sc.erroneous_fraction {
        g.fill(f)?;
    }
    Ok(g.finish(expected, planted_events))
}

fn validate(sc: &Scenario) -> Result<(), SynthError> {
    let bad = |m: &str| Err(SynthError::InfeasibleScenario(m.to_string()));
    if sc.duration.is_nan() || sc.duration <= 2.0 * TAIL_MARGIN {
        return bad("duration must exceed 240 s");
    }
    if sc.internal_prefix.prefix_len() > 16 {
        return bad("internal prefix must be /16 or larger");
    }
    if let Some(f) = sc.erroneous_fraction {
        if !(0.0..1.0).contains(&f) {
            return bad("erroneous_fraction must lie in [0, 1)");
        }
    }
    if sc.mix_total() <= 0.0 && sc.background.target_packets > 0 {
        return bad("background mix has no positive weight");
    }
    let planted_hosts: u64 = sc.planted.iter().map(planted_host_count).sum();
    if planted_hosts > 16_000 {
        return bad("too many planted hosts");
    }
    for p in &sc.planted {
        let check = match *p {
            Planted::ReflectionSurge { repeats, internal_hosts, spread, .. } => {
                repeats <= internal_hosts && internal_hosts > 0 && spread > 0.0
            }
            Planted::PeriodicProbe { packets, period, jitter, offset, .. } => {
                packets > 1 && period > 0.0 && (0.0..0.5).contains(&jitter) && offset + f64::from(packets) * period * 1.01 < sc.duration - TAIL_MARGIN
            }
            Planted::SmtpFanout { destinations, packets, offset, spread } => {
                destinations > 0 && packets >= destinations && offset + spread < sc.duration - TAIL_MARGIN
            }
            Planted::BogonDns { clients, packets, resolver } => {
                clients > 0 && packets >= clients && BogonThresholds::default().bogons.iter().any(|n| n.contains(&resolver))
            }
            Planted::UnansweredNtp { hosts, servers, pkts_per_host } => hosts > 0 && servers > 0 && pkts_per_host > 0,
            Planted::StaleHttp { packets, period, offset, .. } => {
                packets > 0 && period > 0.0 && offset + f64::from(packets) * period * 1.01 < sc.duration - TAIL_MARGIN
            }
            Planted::ResolverDark { resolvers, pool, destinations_per_resolver, queries_per_destination } => {
                resolvers > 0 && destinations_per_resolver <= pool && destinations_per_resolver > 0 && queries_per_destination > 0
            }
            Planted::DnsAccelerator { hosts, resolver_pool, resolvers_per_host, lookups, fanout } => {
                hosts > 0 && resolvers_per_host <= resolver_pool && fanout >= 2 && fanout <= resolvers_per_host && lookups > 0
            }
        };
        if !check {
            return Err(SynthError::InfeasibleScenario(format!("inconsistent parameters for {:?}", p.rule())));
        }
    }
    Ok(())
}

fn planted_host_count(p: &Planted) -> u64 {
    u64::from(match *p {
        Planted::ReflectionSurge { internal_hosts, .. } => internal_hosts,
        Planted::BogonDns { clients, .. } => clients,
        Planted::UnansweredNtp { hosts, .. } => hosts,
        Planted::ResolverDark { resolvers, .. } => resolvers,
        Planted::DnsAccelerator { hosts, .. } => hosts,
        _ => 1,
    })
}

impl Scenario {
    fn mix_total(&self) -> f64 {
        self.background.mix.weights().iter().filter(|w| **w > 0.0).sum()
    }
}

struct Gen<'a> {
    sc: &'a Scenario,
    rng: ChaCha8Rng,
    start_ns: i64,
    packets: Vec<SynthPacket>,
    keys: HashSet<FlowKey>,
    used_ext: HashSet<Ipv4Addr>,
    flows: Vec<FlowLabel>,
    totals: Totals,
    ip_id: u16,
    net: Ipv4Net,
    clients: u32,
    next_planted: u32,
    popular: Vec<Ipv4Addr>,
    popular_pick: Zipf<f64>,
    sender_pick: Option<Zipf<f64>>,
    resolvers: Vec<Ipv4Addr>,
    bogons: Vec<Ipv4Net>,
}

/// Internal host layout: clients from .0.1 upward, servers from .100.1,
/// planted hosts from .128.1, all offsets within the /16.
const SERVER_BASE: u32 = 100 << 8;
const PLANTED_BASE: u32 = 128 << 8;

impl<'a> Gen<'a> {
    fn new(sc: &'a Scenario) -> Self {
        let mut g = Gen {
            sc,
            rng: ChaCha8Rng::seed_from_u64(sc.seed),
            start_ns: Timestamp::from_secs_f64(sc.start).as_nanos(),
            packets: Vec::new(),
            keys: HashSet::new(),
            used_ext: HashSet::new(),
            flows: Vec::new(),
            totals: Totals::default(),
            ip_id: 0,
            net: sc.internal_prefix.trunc(),
            clients: sc.background.client_hosts.clamp(1, SERVER_BASE - 1),
            next_planted: 0,
            popular: Vec::new(),
            popular_pick: Zipf::new(f64::from(sc.background.servers.max(1)), 1.0).expect("valid zipf"),
            resolvers: Vec::new(),
            sender_pick: None,
            bogons: BogonThresholds::default().bogons,
        };
        for special in sc.planted.iter().filter_map(|p| match p {
            Planted::ReflectionSurge { source, .. } => Some(*source),
            Planted::BogonDns { resolver, .. } => Some(*resolver),
            _ => None,
        }) {
            g.used_ext.insert(special);
        }
        if sc.noise.sender_skew > 0.0 {
            g.sender_pick = Some(Zipf::new(f64::from(g.clients), sc.noise.sender_skew).expect("valid zipf"));
        }
        g.popular = (0..sc.background.servers.max(1)).map(|_| g.fresh_ext()).collect();
        g.resolvers = (0..8).map(|_| g.fresh_ext()).collect();
        g
    }

    fn host(&self, offset: u32) -> Ipv4Addr {
        Ipv4Addr::from(u32::from(self.net.network()) + offset)
    }

    fn client(&mut self) -> Ipv4Addr {
        let i = self.rng.random_range(1..=self.clients);
        self.host(i)
    }

    /// Noise sender: client rank `k` is drawn with weight `k^-skew`.
    fn noise_sender(&mut self) -> Ipv4Addr {
        match self.sender_pick {
            Some(z) => {
                let k = z.sample(&mut self.rng) as u32;
                self.host(k.clamp(1, self.clients))
            }
            None => self.client(),
        }
    }

    fn server(&mut self) -> Ipv4Addr {
        let i = self.rng.random_range(1..=50);
        self.host(SERVER_BASE + i)
    }

    fn planted_host(&mut self) -> Ipv4Addr {
        self.next_planted += 1;
        // Skip .0 and .255 host octets for readability.
        while matches!(self.next_planted & 0xff, 0 | 255) {
            self.next_planted += 1;
        }
        self.host(PLANTED_BASE + self.next_planted)
    }

    /// A routable external address not handed out before.
    fn fresh_ext(&mut self) -> Ipv4Addr {
        loop {
            let a = Ipv4Addr::from(self.rng.random::<u32>());
            let o = a.octets()[0];
            if o == 0 || o >= 224 || self.bogons.iter().any(|n| n.contains(&a)) || self.net.contains(&a) {
                continue;
            }
            if self.used_ext.insert(a) {
                return a;
            }
        }
    }

    fn popular_server(&mut self) -> Ipv4Addr {
        let i = self.popular_pick.sample(&mut self.rng) as usize - 1;
        self.popular[i.min(self.popular.len() - 1)]
    }

    fn at(&self, offset: f64) -> Timestamp {
        // Whole microseconds: the pcap writer keeps nothing finer.
        let us = (offset * 1e6).round() as i64;
        Timestamp::from_nanos(self.start_ns + us * 1000)
    }

    /// Uniform offset leaving room for response deadlines at the end.
    fn any_time(&mut self) -> f64 {
        self.rng.random_range(0.0..self.sc.duration - TAIL_MARGIN)
    }

    fn unique_key(&mut self, src: Ipv4Addr, dst: Ipv4Addr, dport: u16, proto: IpProto) -> (u16, FlowKey) {
        loop {
            let sport = self.rng.random_range(32768..=60999u16);
            let k = FlowKey::new((src, sport), (dst, dport), proto);
            if !self.keys.contains(&k) && !self.keys.contains(&k.reversed()) {
                self.keys.insert(k);
                return (sport, k);
            }
        }
    }

    fn emit(&mut self, offset: f64, datagram: Vec<u8>, erroneous: bool) {
        let frame = build::ethernet_frame(&datagram);
        let orig_len = frame.len() as u32;
        let mut frame = frame;
        frame.truncate(DEFAULT_SNAP_LEN as usize);
        let src = Ipv4Addr::new(datagram[12], datagram[13], datagram[14], datagram[15]);
        let dst = Ipv4Addr::new(datagram[16], datagram[17], datagram[18], datagram[19]);
        let prefixes = [self.net];
        if is_internal(src, &prefixes) && !is_internal(dst, &prefixes) {
            self.totals.outbound_pkts += 1;
            if erroneous {
                self.totals.erroneous_pkts += 1;
            } else {
                self.totals.benign_pkts += 1;
            }
        }
        self.totals.packets += 1;
        let seq = self.packets.len() as u64;
        self.packets.push(SynthPacket { ts: self.at(offset), seq, frame, orig_len });
    }

    fn label(&mut self, key: FlowKey, label: Label, out_pkts: u64, offset: f64) {
        match label {
            Label::A => self.totals.events_a += 1,
            Label::B => self.totals.events_b += 1,
            Label::C => self.totals.events_c += 1,
            Label::Refused => self.totals.refused_flows += 1,
            Label::Benign => {}
        }
        let first_ts = self.at(offset);
        self.flows.push(FlowLabel { key, label, out_pkts, first_ts });
    }

    fn next_id(&mut self) -> u16 {
        self.ip_id = self.ip_id.wrapping_add(1);
        self.ip_id
    }

    fn tcp_pkt(&mut self, src: Ipv4Addr, sport: u16, dst: Ipv4Addr, dport: u16, flags: u8, payload: usize) -> Vec<u8> {
        let id = self.next_id();
        let t = Transport::Tcp { sport, dport, flags, seq: u32::from(id) * 7919, ack: 0 };
        build::ipv4_datagram(src, dst, id, t, payload)
    }

    fn udp_pkt(&mut self, src: Ipv4Addr, sport: u16, dst: Ipv4Addr, dport: u16, payload: usize) -> Vec<u8> {
        let id = self.next_id();
        build::ipv4_datagram(src, dst, id, Transport::Udp { sport, dport }, payload)
    }

    fn rtt(&mut self) -> f64 {
        self.rng.random_range(0.005..0.15)
    }

    // ---- background -------------------------------------------------------

    fn background(&mut self) {
        let target = self.sc.background.target_packets;
        if target == 0 {
            return;
        }
        let weights = self.sc.background.mix.weights().map(|w| w.max(0.0));
        let pick = WeightedIndex::new(weights).expect("validated weights");
        while self.totals.packets < target {
            let t = self.rng.random_range(0.0..self.sc.duration - 5.0);
            match pick.sample(&mut self.rng) {
                0 => self.bg_tcp(t),
                1 => self.bg_dns(t),
                2 => self.bg_udp(t),
                3 => self.bg_echo(t),
                4 => self.bg_server(t),
                5 => self.bg_internal(t),
                _ => self.bg_refused(t),
            }
        }
    }

    fn bg_tcp(&mut self, t: f64) {
        let c = self.client();
        let s = self.popular_server();
        let dport = if self.rng.random_bool(0.8) { 443 } else { 80 };
        let (sport, key) = self.unique_key(c, s, dport, IpProto::Tcp);
        let [lo, hi] = self.sc.background.tcp_data_pkts;
        let data = self.rng.random_range(lo.min(hi)..=hi.max(lo));
        let rtt = self.rtt();
        let mut now = t;
        let mut out = 0;
        let p = self.tcp_pkt(c, sport, s, dport, SYN, 0);
        self.emit(now, p, false);
        out += 1;
        now += rtt;
        let p = self.tcp_pkt(s, dport, c, sport, SYN_ACK, 0);
        self.emit(now, p, false);
        now += 0.0005;
        let p = self.tcp_pkt(c, sport, s, dport, ACK, 0);
        self.emit(now, p, false);
        out += 1;
        for i in 0..data {
            now += self.rng.random_range(0.001..0.05);
            if i % 2 == 0 {
                let len = self.rng.random_range(40..600);
                let p = self.tcp_pkt(c, sport, s, dport, PSH_ACK, len);
                self.emit(now, p, false);
                out += 1;
            } else {
                let len = self.rng.random_range(200..1400);
                let p = self.tcp_pkt(s, dport, c, sport, PSH_ACK, len);
                self.emit(now, p, false);
            }
        }
        now += 0.001;
        let p = self.tcp_pkt(c, sport, s, dport, FIN_ACK, 0);
        self.emit(now, p, false);
        out += 1;
        now += rtt;
        let p = self.tcp_pkt(s, dport, c, sport, FIN_ACK, 0);
        self.emit(now, p, false);
        now += 0.0005;
        let p = self.tcp_pkt(c, sport, s, dport, ACK, 0);
        self.emit(now, p, false);
        out += 1;
        self.label(key, Label::Benign, out, t);
    }

    fn bg_dns(&mut self, t: f64) {
        let c = self.client();
        let r = self.resolvers[self.rng.random_range(0..self.resolvers.len())];
        let (sport, key) = self.unique_key(c, r, 53, IpProto::Udp);
        let q = self.rng.random_range(28..60);
        let p = self.udp_pkt(c, sport, r, 53, q);
        self.emit(t, p, false);
        let rtt = self.rtt();
        let a = self.rng.random_range(60..400);
        let p = self.udp_pkt(r, 53, c, sport, a);
        self.emit(t + rtt, p, false);
        self.label(key, Label::Benign, 1, t);
    }

    fn bg_udp(&mut self, t: f64) {
        let c = self.client();
        let s = self.popular_server();
        let (sport, key) = self.unique_key(c, s, 443, IpProto::Udp);
        let rounds = self.rng.random_range(1..=6);
        let mut now = t;
        for _ in 0..rounds {
            let p = self.udp_pkt(c, sport, s, 443, 1200);
            self.emit(now, p, false);
            now += self.rtt();
            let p = self.udp_pkt(s, 443, c, sport, 1200);
            self.emit(now, p, false);
            now += 0.002;
        }
        self.label(key, Label::Benign, rounds, t);
    }

    fn bg_echo(&mut self, t: f64) {
        let c = self.client();
        let s = self.popular_server();
        let (id, key) = loop {
            let id = self.rng.random::<u16>();
            let k = FlowKey::new((c, id), (s, 0), IpProto::Icmp);
            if self.keys.insert(k) {
                break (id, k);
            }
        };
        let n = self.rng.random_range(1..=4u16);
        let mut now = t;
        for seq in 1..=n {
            self.next_id();
            self.emit(now, build::icmp_echo(c, s, 8, id, seq), false);
            let rtt = self.rtt();
            self.emit(now + rtt, build::icmp_echo(s, c, 0, id, seq), false);
            now += 0.2;
        }
        self.label(key, Label::Benign, u64::from(n), t);
    }

    fn bg_server(&mut self, t: f64) {
        let srv = self.server();
        let peer = self.popular_server();
        let port = if self.rng.random_bool(0.5) { 22 } else { 443 };
        // Inbound-initiated: the key is oriented from the external peer.
        let (pport, _) = self.unique_key(peer, srv, port, IpProto::Tcp);
        let rtt = self.rtt();
        let p = self.tcp_pkt(peer, pport, srv, port, SYN, 0);
        self.emit(t, p, false);
        let p = self.tcp_pkt(srv, port, peer, pport, SYN_ACK, 0);
        self.emit(t + 0.0003, p, false);
        let p = self.tcp_pkt(peer, pport, srv, port, ACK, 0);
        self.emit(t + rtt, p, false);
        let mut now = t + rtt;
        for _ in 0..self.rng.random_range(1..=5) {
            now += 0.01;
            let p = self.tcp_pkt(peer, pport, srv, port, PSH_ACK, 100);
            self.emit(now, p, false);
            now += 0.002;
            let p = self.tcp_pkt(srv, port, peer, pport, PSH_ACK, 900);
            self.emit(now, p, false);
        }
    }

    fn bg_internal(&mut self, t: f64) {
        let a = self.client();
        let b = self.server();
        let (sport, _) = self.unique_key(a, b, 445, IpProto::Tcp);
        let p = self.tcp_pkt(a, sport, b, 445, SYN, 0);
        self.emit(t, p, false);
        let p = self.tcp_pkt(b, 445, a, sport, SYN_ACK, 0);
        self.emit(t + 0.001, p, false);
        let p = self.tcp_pkt(a, sport, b, 445, ACK, 0);
        self.emit(t + 0.002, p, false);
    }

    fn bg_refused(&mut self, t: f64) {
        let c = self.client();
        let s = self.popular_server();
        let port = [8080u16, 8443, 3389, 5900][self.rng.random_range(0..4)];
        let (sport, key) = self.unique_key(c, s, port, IpProto::Tcp);
        let p = self.tcp_pkt(c, sport, s, port, SYN, 0);
        self.emit(t, p, false);
        let rtt = self.rtt();
        let p = self.tcp_pkt(s, port, c, sport, RST_ACK, 0);
        self.emit(t + rtt, p, false);
        self.label(key, Label::Refused, 1, t);
    }

    // ---- erroneous building blocks ----------------------------------------

    /// One unanswered outbound packet.
    fn a_flow(&mut self, t: f64, src: Ipv4Addr, dst: Ipv4Addr, proto: IpProto, dport: u16) -> FlowKey {
        let (sport, key) = self.unique_key(src, dst, dport, proto);
        let p = match proto {
            IpProto::Tcp => self.tcp_pkt(src, sport, dst, dport, SYN, 0),
            _ => self.udp_pkt(src, sport, dst, dport, 48),
        };
        self.emit(t, p, true);
        self.label(key, Label::A, 1, t);
        key
    }

    /// One outbound packet answered by an ICMP error from its destination.
    fn b_flow(&mut self, t: f64, src: Ipv4Addr, dst: Ipv4Addr, dport: u16, icmp: (u8, u8)) {
        let (sport, key) = self.unique_key(src, dst, dport, IpProto::Udp);
        let p = self.udp_pkt(src, sport, dst, dport, 32);
        let err = build::icmp_error(dst, src, icmp.0, icmp.1, &p);
        self.emit(t, p, true);
        let delay = self.rtt();
        self.emit(t + delay, err, false);
        self.label(key, Label::B, 1, t);
    }

    /// An inbound datagram and the internal host's port-unreachable answer.
    fn c_event(&mut self, t: f64, host: Ipv4Addr, ext: Ipv4Addr, ext_port: u16, host_port: u16) {
        let inbound = self.udp_pkt(ext, ext_port, host, host_port, 40);
        let err = build::icmp_error(host, ext, 3, 3, &inbound);
        self.emit(t, inbound, false);
        self.emit(t + 0.0002, err, true);
        self.label(FlowKey::host_pair(host, ext, IpProto::Icmp), Label::C, 1, t + 0.0002);
    }

    fn noise_a(&mut self) {
        let t = self.any_time();
        let c = self.noise_sender();
        let dst = self.fresh_ext();
        let (proto, port) = match self.rng.random_range(0..4) {
            0 => (IpProto::Udp, self.rng.random_range(33434..33534)),
            1 => (IpProto::Udp, [5060u16, 1900, 161, 69][self.rng.random_range(0..4)]),
            _ => (IpProto::Tcp, [8080u16, 3389, 23, 22, 445][self.rng.random_range(0..5)]),
        };
        self.a_flow(t, c, dst, proto, port);
    }

    fn noise_b(&mut self) {
        let t = self.any_time();
        let c = self.noise_sender();
        let dst = self.fresh_ext();
        let port = self.rng.random_range(33434..33534);
        let icmp = [(3, 3), (3, 1), (3, 13), (11, 0)][self.rng.random_range(0..4)];
        self.b_flow(t, c, dst, port, icmp);
    }

    fn fill(&mut self, f: f64) -> Result<(), SynthError> {
        let benign = self.totals.benign_pkts as f64;
        let target = (f * benign / (1.0 - f)).round() as u64;
        let have = self.totals.erroneous_pkts;
        if have > target {
            return Err(SynthError::InfeasibleScenario(format!(
                "planted traffic already has {have} erroneous packets, above the {target} allowed by erroneous_fraction={f}"
            )));
        }
        let missing = target - have;
        let b = (missing as f64 * self.sc.noise.fill_b_share).round() as u64;
        for _ in 0..b {
            self.noise_b();
        }
        for _ in b..missing {
            self.noise_a();
        }
        Ok(())
    }

    // ---- planted anomalies --------------------------------------------------

    fn plant(&mut self, p: &Planted) -> ExpectedFinding {
        let rule = p.rule();
        let (internal, external, packets) = match *p {
            Planted::ReflectionSurge { internal_hosts, repeats, source, source_port, port, offset, spread } => {
                let hosts: Vec<Ipv4Addr> = (0..internal_hosts).map(|_| self.planted_host()).collect();
                for (i, &h) in hosts.iter().enumerate() {
                    let t = offset + self.rng.random_range(0.0..spread);
                    self.c_event(t, h, source, source_port, port);
                    if (i as u32) < repeats {
                        let t = offset + self.rng.random_range(0.0..spread);
                        self.c_event(t, h, source, source_port, port);
                    }
                }
                (hosts.len(), 1, u64::from(internal_hosts + repeats))
            }
            Planted::PeriodicProbe { packets, period, jitter, port, offset } => {
                let h = self.planted_host();
                let dst = self.fresh_ext();
                let mut t = offset;
                for _ in 0..packets {
                    self.a_flow(t, h, dst, IpProto::Tcp, port);
                    t += period * (1.0 + self.rng.random_range(-jitter..=jitter));
                }
                (1, 1, u64::from(packets))
            }
            Planted::SmtpFanout { destinations, packets, offset, spread } => {
                let h = self.planted_host();
                let dsts: Vec<Ipv4Addr> = (0..destinations).map(|_| self.fresh_ext()).collect();
                for i in 0..packets {
                    let d = if i < destinations {
                        dsts[i as usize]
                    } else {
                        dsts[self.rng.random_range(0..dsts.len())]
                    };
                    let t = offset + self.rng.random_range(0.0..spread);
                    self.a_flow(t, h, d, IpProto::Tcp, 25);
                }
                (1, destinations as usize, u64::from(packets))
            }
            Planted::BogonDns { clients, resolver, packets } => {
                let hosts: Vec<Ipv4Addr> = (0..clients).map(|_| self.planted_host()).collect();
                for i in 0..packets {
                    let h = if i < clients { hosts[i as usize] } else { hosts[self.rng.random_range(0..hosts.len())] };
                    let t = self.any_time();
                    self.a_flow(t, h, resolver, IpProto::Udp, 53);
                }
                (clients as usize, 1, u64::from(packets))
            }
            Planted::UnansweredNtp { hosts, servers, pkts_per_host } => {
                let hs: Vec<Ipv4Addr> = (0..hosts).map(|_| self.planted_host()).collect();
                let ss: Vec<Ipv4Addr> = (0..servers).map(|_| self.fresh_ext()).collect();
                let mut used = BTreeSet::new();
                for (i, &h) in hs.iter().enumerate() {
                    for k in 0..pkts_per_host as usize {
                        let s = ss[(i + k) % ss.len()];
                        used.insert(s);
                        let t = self.any_time();
                        self.a_flow(t, h, s, IpProto::Udp, 123);
                    }
                }
                (hosts as usize, used.len(), u64::from(hosts * pkts_per_host))
            }
            Planted::StaleHttp { packets, period, port, offset } => {
                let h = self.planted_host();
                let dst = self.fresh_ext();
                let mut t = offset;
                for _ in 0..packets {
                    self.a_flow(t, h, dst, IpProto::Tcp, port);
                    t += period * (1.0 + self.rng.random_range(-0.01..=0.01));
                }
                (1, 1, u64::from(packets))
            }
            Planted::ResolverDark { resolvers, pool, destinations_per_resolver, queries_per_destination } => {
                let hs: Vec<Ipv4Addr> = (0..resolvers).map(|_| self.planted_host()).collect();
                let pool: Vec<Ipv4Addr> = (0..pool).map(|_| self.fresh_ext()).collect();
                let mut used = BTreeSet::new();
                for &h in &hs {
                    let picks = sample(&mut self.rng, pool.len(), destinations_per_resolver as usize);
                    for i in picks.iter() {
                        used.insert(pool[i]);
                        for _ in 0..queries_per_destination {
                            let t = self.any_time();
                            self.a_flow(t, h, pool[i], IpProto::Udp, 53);
                        }
                    }
                }
                (resolvers as usize, used.len(), u64::from(resolvers * destinations_per_resolver * queries_per_destination))
            }
            Planted::DnsAccelerator { hosts, resolver_pool, resolvers_per_host, lookups, fanout } => {
                let hs: Vec<Ipv4Addr> = (0..hosts).map(|_| self.planted_host()).collect();
                let pool: Vec<Ipv4Addr> = (0..resolver_pool).map(|_| self.fresh_ext()).collect();
                let mut used = BTreeSet::new();
                for &h in &hs {
                    let mine: Vec<Ipv4Addr> = sample(&mut self.rng, pool.len(), resolvers_per_host as usize)
                        .iter()
                        .map(|i| pool[i])
                        .collect();
                    for j in 0..lookups as usize {
                        let t = self.any_time();
                        // Consecutive lookups shift the resolver window so
                        // that late replies reach every resolver in turn.
                        let first = (j * (fanout as usize - 1)) % mine.len();
                        let group: Vec<Ipv4Addr> =
                            (0..fanout as usize).map(|k| mine[(first + k) % mine.len()]).collect();
                        self.accelerated_lookup(t, h, &group);
                        used.extend(group[1..].iter().copied());
                    }
                }
                let late = u64::from(hosts * lookups * (fanout - 1));
                (hosts as usize, used.len(), late)
            }
        };
        ExpectedFinding { rule_id: rule, category: rule.category(), internal_hosts: internal, external_hosts: external, packets }
    }

    /// One query fanned out to several resolvers from the same socket. The
    /// first answer is taken and the socket closed; each later answer draws
    /// a port unreachable.
    fn accelerated_lookup(&mut self, t: f64, host: Ipv4Addr, group: &[Ipv4Addr]) {
        let sport = loop {
            let p = self.rng.random_range(32768..=60999u16);
            let keys: Vec<FlowKey> = group.iter().map(|&r| FlowKey::new((host, p), (r, 53), IpProto::Udp)).collect();
            if keys.iter().all(|k| !self.keys.contains(k) && !self.keys.contains(&k.reversed())) {
                self.keys.extend(keys);
                break p;
            }
        };
        for (k, &r) in group.iter().enumerate() {
            let p = self.udp_pkt(host, sport, r, 53, 40);
            self.emit(t + k as f64 * 0.0001, p, false);
            self.label(FlowKey::new((host, sport), (r, 53), IpProto::Udp), Label::Benign, 1, t + k as f64 * 0.0001);
        }
        let mut now = t + 0.01;
        for (k, &r) in group.iter().enumerate() {
            now += self.rng.random_range(0.005..0.1);
            let reply = self.udp_pkt(r, 53, host, sport, 120);
            if k == 0 {
                self.emit(now, reply, false);
            } else {
                let err = build::icmp_error(host, r, 3, 3, &reply);
                self.emit(now, reply, false);
                self.emit(now + 0.0002, err, true);
                self.label(FlowKey::host_pair(host, r, IpProto::Icmp), Label::C, 1, now + 0.0002);
            }
        }
    }

    fn finish(mut self, expected: Vec<ExpectedFinding>, planted_events: u64) -> Trace {
        self.packets.sort_by_key(|p| (p.ts, p.seq));
        self.flows.sort_by_key(|f| (f.first_ts, f.key, f.label));
        let events = self.totals.events();
        let truth = GroundTruth {
            scenario: self.sc.name.clone(),
            seed: self.sc.seed,
            first_ts: self.packets.first().map(|p| p.ts),
            last_ts: self.packets.last().map(|p| p.ts),
            totals: self.totals,
            planted_events,
            planted_share: if events == 0 { 0.0 } else { planted_events as f64 / events as f64 },
            expected_findings: expected,
            flows: self.flows,
        };
        Trace { packets: self.packets, truth }
    }
}
