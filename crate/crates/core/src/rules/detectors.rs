use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::Ipv4Addr;

use super::thresholds::*;
use super::{event_pkts, AnomalyFinding, RuleId};
use crate::codec::IpProto;
use crate::detector::{ErroneousEvent, Pattern};
use crate::time::Duration;

const PORT_UNREACHABLE: (Option<u8>, Option<u8>) = (Some(3), Some(3));

fn is_port_unreachable(e: &ErroneousEvent) -> bool {
    (e.icmp_type, e.icmp_code) == PORT_UNREACHABLE
}

fn pattern_a_to(e: &ErroneousEvent, proto: IpProto, port: u16) -> bool {
    e.pattern == Pattern::A && e.flow.proto == proto && e.flow.responder_port == port
}

fn group_by<K: Ord>(
    events: &[ErroneousEvent],
    keep: impl Fn(&ErroneousEvent) -> bool,
    key: impl Fn(&ErroneousEvent) -> K,
) -> BTreeMap<K, Vec<usize>> {
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate().filter(|(_, e)| keep(e)) {
        groups.entry(key(e)).or_default().push(i);
    }
    for members in groups.values_mut() {
        members.sort_by_key(|&i| (events[i].ts, i));
    }
    groups
}

fn distinct<T: Ord>(events: &[ErroneousEvent], members: &[usize], f: impl Fn(&ErroneousEvent) -> T) -> usize {
    members.iter().map(|&i| f(&events[i])).collect::<BTreeSet<_>>().len()
}

fn packets(events: &[ErroneousEvent], members: &[usize]) -> u64 {
    members.iter().map(|&i| event_pkts(&events[i])).sum()
}

/// Merges the members of every qualifying group into a single finding.
fn aggregate(rule: RuleId, events: &[ErroneousEvent], groups: Vec<Vec<usize>>) -> Vec<AnomalyFinding> {
    let mut members: Vec<usize> = groups.into_iter().flatten().collect();
    if members.is_empty() {
        return Vec::new();
    }
    members.sort_by_key(|&i| (events[i].ts, i));
    vec![AnomalyFinding::from_members(rule, events, members)]
}

/// Many internal hosts answering the same external address and port with
/// ICMP port unreachable within a short window.
pub fn detect_reflection_surge(events: &[ErroneousEvent], th: &ReflectionThresholds) -> Vec<AnomalyFinding> {
    let window = Duration::from_secs_f64(th.window);
    let groups = group_by(
        events,
        |e| e.pattern == Pattern::C && is_port_unreachable(e) && e.inner.is_some(),
        |e| (e.external_host(), e.inner.map_or(0, |q| q.orig_dst_port)),
    );
    let mut out = Vec::new();
    for members in groups.into_values() {
        // Episodes are separated by silences longer than the window.
        let mut start = 0;
        for end in 1..=members.len() {
            let split = end == members.len() || events[members[end]].ts - events[members[end - 1]].ts > window;
            if !split {
                continue;
            }
            let episode = &members[start..end];
            if max_distinct_in_window(events, episode, window) >= th.min_internal {
                out.push(AnomalyFinding::from_members(RuleId::ReflectionSurge, events, episode.to_vec()));
            }
            start = end;
        }
    }
    out
}

fn max_distinct_in_window(events: &[ErroneousEvent], members: &[usize], window: Duration) -> usize {
    let mut counts: HashMap<Ipv4Addr, usize> = HashMap::new();
    let mut best = 0;
    let mut lo = 0;
    for hi in 0..members.len() {
        *counts.entry(events[members[hi]].internal_host()).or_default() += 1;
        while events[members[hi]].ts - events[members[lo]].ts > window {
            let h = events[members[lo]].internal_host();
            let c = counts.get_mut(&h).expect("counted");
            *c -= 1;
            if *c == 0 {
                counts.remove(&h);
            }
            lo += 1;
        }
        best = best.max(counts.len());
    }
    best
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Median absolute deviation over median of the gaps between consecutive
/// timestamps. `None` with fewer than two gaps or a zero median.
pub fn regularity(events: &[ErroneousEvent], members: &[usize]) -> Option<f64> {
    if members.len() < 3 {
        return None;
    }
    let mut gaps: Vec<f64> =
        members.windows(2).map(|w| (events[w[1]].ts - events[w[0]].ts).as_secs_f64()).collect();
    gaps.sort_by(f64::total_cmp);
    let m = median(&gaps);
    if m <= 0.0 {
        return None;
    }
    let mut dev: Vec<f64> = gaps.iter().map(|g| (g - m).abs()).collect();
    dev.sort_by(f64::total_cmp);
    Some(median(&dev) / m)
}

/// A host repeatedly and regularly contacting one unresponsive address over
/// several days.
pub fn detect_periodic_probe(events: &[ErroneousEvent], th: &PeriodicThresholds) -> Vec<AnomalyFinding> {
    let groups = group_by(events, |e| e.pattern == Pattern::A, |e| (e.internal_host(), e.external_host()));
    groups
        .into_values()
        .filter(|m| packets(events, m) >= th.min_pkts)
        .filter(|m| distinct(events, m, |e| e.ts.day()) >= th.min_days)
        .filter(|m| regularity(events, m).is_some_and(|r| r < th.regularity))
        .map(|m| AnomalyFinding::from_members(RuleId::PeriodicProbe, events, m))
        .collect()
}

/// One host with unanswered SMTP connection attempts to many servers.
pub fn detect_smtp_fanout(events: &[ErroneousEvent], th: &SmtpThresholds) -> Vec<AnomalyFinding> {
    group_by(events, |e| pattern_a_to(e, IpProto::Tcp, 25), |e| e.internal_host())
        .into_values()
        .filter(|m| distinct(events, m, |e| e.external_host()) >= th.min_ext)
        .map(|m| AnomalyFinding::from_members(RuleId::SmtpFanout, events, m))
        .collect()
}

/// DNS traffic toward an address that is never a valid public resolver.
pub fn detect_bogon_dns(events: &[ErroneousEvent], th: &BogonThresholds) -> Vec<AnomalyFinding> {
    let is_bogon = |a: Ipv4Addr| th.bogons.iter().any(|n| n.contains(&a));
    group_by(
        events,
        |e| e.flow.proto == IpProto::Udp && e.flow.responder_port == 53 && is_bogon(e.external_host()),
        |e| e.external_host(),
    )
    .into_values()
    .filter(|m| distinct(events, m, |e| e.internal_host()) >= th.min_internal)
    .map(|m| AnomalyFinding::from_members(RuleId::BogonDns, events, m))
    .collect()
}

pub fn detect_unanswered_ntp(events: &[ErroneousEvent], th: &NtpThresholds) -> Vec<AnomalyFinding> {
    let hosts = group_by(events, |e| pattern_a_to(e, IpProto::Udp, 123), |e| e.internal_host());
    let qualifying = hosts.into_values().filter(|m| packets(events, m) >= th.min_pkts).collect();
    aggregate(RuleId::UnansweredNtp, events, qualifying)
}

/// Sustained, hour-after-hour web requests to a server that never answers.
pub fn detect_stale_http(events: &[ErroneousEvent], th: &StaleHttpThresholds) -> Vec<AnomalyFinding> {
    let groups = group_by(
        events,
        |e| e.pattern == Pattern::A && e.flow.proto == IpProto::Tcp && th.ports.contains(&e.flow.responder_port),
        |e| (e.internal_host(), e.external_host()),
    );
    groups
        .into_values()
        .filter(|m| {
            let first = events[m[0]].ts;
            let last = events[m[m.len() - 1]].ts;
            let span = (last - first).as_secs_f64();
            if span < th.min_hours * 3600.0 || span <= 0.0 {
                return false;
            }
            let rate = packets(events, m) as f64 / span;
            let hours = (last.secs().div_euclid(3600) - first.secs().div_euclid(3600) + 1) as f64;
            let covered = distinct(events, m, |e| e.ts.secs().div_euclid(3600)) as f64;
            rate >= th.min_rate && covered / hours >= th.min_coverage
        })
        .map(|m| AnomalyFinding::from_members(RuleId::StaleHttp, events, m))
        .collect()
}

pub fn detect_resolver_dark(events: &[ErroneousEvent], th: &ResolverDarkThresholds) -> Vec<AnomalyFinding> {
    let hosts = group_by(events, |e| pattern_a_to(e, IpProto::Udp, 53), |e| e.internal_host());
    let qualifying = hosts.into_values().filter(|m| distinct(events, m, |e| e.external_host()) >= th.min_ext).collect();
    aggregate(RuleId::ResolverDark, events, qualifying)
}

/// Port unreachable sent in answer to DNS replies from many resolvers: the
/// client had already taken the first answer and closed its socket.
pub fn detect_dns_accelerator(events: &[ErroneousEvent], th: &AcceleratorThresholds) -> Vec<AnomalyFinding> {
    let hosts = group_by(
        events,
        |e| e.pattern == Pattern::C && is_port_unreachable(e) && e.inner.is_some_and(|q| q.orig_src_port == 53),
        |e| e.internal_host(),
    );
    let qualifying = hosts
        .into_values()
        .filter(|m| packets(events, m) >= th.min_pkts && distinct(events, m, |e| e.external_host()) >= th.min_ext)
        .collect();
    aggregate(RuleId::DnsAccelerator, events, qualifying)
}
