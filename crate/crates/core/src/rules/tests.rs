use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::*;
use crate::codec::{InnerQuote, IpProto};

fn host(i: u32) -> Ipv4Addr {
    Ipv4Addr::from(0x0a14_0000 + i)
}

fn ext(i: u32) -> Ipv4Addr {
    Ipv4Addr::from(0x2d00_0000 + i)
}

fn a_event(t: f64, src: Ipv4Addr, dst: Ipv4Addr, proto: IpProto, dport: u16) -> ErroneousEvent {
    ErroneousEvent {
        pattern: Pattern::A,
        ts: Timestamp::from_secs_f64(t),
        flow: FlowKey::new((src, 40000), (dst, dport), proto),
        icmp_type: None,
        icmp_code: None,
        inner: None,
        pkts_in_flow: 1,
        correlated: false,
        evicted_early: false,
        anon: false,
    }
}

/// Port unreachable from `src` to `dst` quoting a datagram dst:qsport -> src:qdport.
fn c_event(t: f64, src: Ipv4Addr, dst: Ipv4Addr, qsport: u16, qdport: u16) -> ErroneousEvent {
    ErroneousEvent {
        pattern: Pattern::C,
        ts: Timestamp::from_secs_f64(t),
        flow: FlowKey::host_pair(src, dst, IpProto::Icmp),
        icmp_type: Some(3),
        icmp_code: Some(3),
        inner: Some(InnerQuote {
            orig_src_ip: dst,
            orig_dst_ip: src,
            orig_proto: IpProto::Udp,
            orig_src_port: qsport,
            orig_dst_port: qdport,
            quoted_bytes: 28,
        }),
        pkts_in_flow: 1,
        correlated: false,
        evicted_early: false,
        anon: false,
    }
}

fn sorted(mut v: Vec<ErroneousEvent>) -> Vec<ErroneousEvent> {
    crate::store::sort_events(&mut v);
    v
}

#[test]
fn reflection_surge_counts() {
    let one = Ipv4Addr::new(1, 1, 1, 1);
    let mut evs: Vec<_> = (0..700).map(|i| c_event(f64::from(i) * 2.0, host(i), one, 53, 500)).collect();
    evs.extend((0..60).map(|i| c_event(1500.0 + f64::from(i), host(i), one, 53, 500)));
    let evs = sorted(evs);
    let f = detect_reflection_surge(&evs, &ReflectionThresholds::default());
    assert_eq!(f.len(), 1);
    assert_eq!((f[0].internal_hosts, f[0].external_hosts, f[0].packets), (700, 1, 760));
    assert_eq!(f[0].category, Category::Malicious);
    assert!(f[0].evidence.len() <= 10);

    let few: Vec<_> = (0..5).map(|i| c_event(f64::from(i), host(i), one, 53, 500)).collect();
    assert!(detect_reflection_surge(&few, &ReflectionThresholds::default()).is_empty());

    let spread: Vec<_> = (0..700).map(|i| c_event(f64::from(i), host(i), ext(i), 53, 500)).collect();
    assert!(detect_reflection_surge(&spread, &ReflectionThresholds::default()).is_empty());
}

#[test]
fn reflection_needs_density_within_window() {
    let one = Ipv4Addr::new(1, 1, 1, 1);
    // 150 hosts, one every 50 minutes: never 100 distinct within an hour, and
    // the gaps never exceed the window so this is one long episode.
    let evs: Vec<_> = (0..150).map(|i| c_event(f64::from(i) * 3000.0, host(i), one, 53, 500)).collect();
    assert!(detect_reflection_surge(&evs, &ReflectionThresholds::default()).is_empty());
}

#[test]
fn periodic_probe_regular_vs_poisson() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (src, dst) = (host(1), ext(1));
    let regular: Vec<_> = (0..5000)
        .map(|i| a_event(f64::from(i) * 60.0 + rng.random_range(-0.6..0.6), src, dst, IpProto::Tcp, 8443))
        .collect();
    let f = detect_periodic_probe(&sorted(regular), &PeriodicThresholds::default());
    assert_eq!(f.len(), 1);
    assert_eq!((f[0].internal_hosts, f[0].external_hosts, f[0].packets), (1, 1, 5000));

    // Exponential gaps: MAD/median is a fixed constant of the distribution.
    // For Exp(1) the median is ln 2 and the MAD d solves
    // F(ln2 + d) - F(ln2 - d) = 1/2; find d by bisection.
    let m = std::f64::consts::LN_2;
    let cdf = |x: f64| if x <= 0.0 { 0.0 } else { 1.0 - (-x).exp() };
    let (mut lo, mut hi) = (0.0, 5.0);
    for _ in 0..200 {
        let d = (lo + hi) / 2.0;
        if cdf(m + d) - cdf(m - d) < 0.5 {
            lo = d;
        } else {
            hi = d;
        }
    }
    let ratio = lo / m;
    assert!((ratio - 0.69).abs() < 0.02 && ratio > 0.3);

    let exp = Exp::new(1.0 / 60.0).unwrap();
    let mut t = 0.0;
    let poisson: Vec<_> = (0..5000)
        .map(|_| {
            t += exp.sample(&mut rng);
            a_event(t, src, dst, IpProto::Tcp, 8443)
        })
        .collect();
    let idx: Vec<usize> = (0..poisson.len()).collect();
    let r = regularity(&poisson, &idx).unwrap();
    assert!((r - ratio).abs() < 0.05, "sample {r} vs {ratio}");
    assert!(detect_periodic_probe(&poisson, &PeriodicThresholds::default()).is_empty());

    let short: Vec<_> = (0..50).map(|i| a_event(f64::from(i) * 10_000.0, src, dst, IpProto::Tcp, 1)).collect();
    assert!(detect_periodic_probe(&short, &PeriodicThresholds::default()).is_empty());
}

#[test]
fn smtp_fanout() {
    let evs: Vec<_> =
        (0..2050).map(|i| a_event(f64::from(i), host(9), ext(i % 382), IpProto::Tcp, 25)).collect();
    let f = detect_smtp_fanout(&evs, &SmtpThresholds::default());
    assert_eq!(f.len(), 1);
    assert_eq!((f[0].internal_hosts, f[0].external_hosts, f[0].packets), (1, 382, 2050));

    let few: Vec<_> = (0..300).map(|i| a_event(f64::from(i), host(9), ext(i % 3), IpProto::Tcp, 25)).collect();
    assert!(detect_smtp_fanout(&few, &SmtpThresholds::default()).is_empty());
    let web: Vec<_> = (0..400).map(|i| a_event(f64::from(i), host(9), ext(i), IpProto::Tcp, 80)).collect();
    assert!(detect_smtp_fanout(&web, &SmtpThresholds::default()).is_empty());
}

#[test]
fn bogon_dns() {
    let bogon = Ipv4Addr::new(100, 100, 100, 100);
    let evs: Vec<_> = (0..600).map(|i| a_event(f64::from(i), host(i % 30), bogon, IpProto::Udp, 53)).collect();
    let f = detect_bogon_dns(&evs, &BogonThresholds::default());
    assert_eq!(f.len(), 1);
    assert_eq!((f[0].internal_hosts, f[0].external_hosts, f[0].category), (30, 1, Category::Faulty));

    let google = Ipv4Addr::new(8, 8, 8, 8);
    let evs: Vec<_> = (0..600).map(|i| a_event(f64::from(i), host(i % 30), google, IpProto::Udp, 53)).collect();
    assert!(detect_bogon_dns(&evs, &BogonThresholds::default()).is_empty());
    let evs: Vec<_> = (0..600).map(|i| a_event(f64::from(i), host(i % 2), bogon, IpProto::Udp, 53)).collect();
    assert!(detect_bogon_dns(&evs, &BogonThresholds::default()).is_empty());
}

#[test]
fn unanswered_ntp() {
    let evs: Vec<_> =
        (0..720).map(|i| a_event(f64::from(i), host(i % 6), ext(i % 3), IpProto::Udp, 123)).collect();
    let f = detect_unanswered_ntp(&evs, &NtpThresholds::default());
    assert_eq!(f.len(), 1);
    assert_eq!((f[0].internal_hosts, f[0].external_hosts, f[0].packets), (6, 3, 720));
    let evs: Vec<_> = (0..10).map(|i| a_event(f64::from(i), host(1), ext(1), IpProto::Udp, 123)).collect();
    assert!(detect_unanswered_ntp(&evs, &NtpThresholds::default()).is_empty());
}

#[test]
fn stale_http() {
    let th = StaleHttpThresholds::default();
    let steady: Vec<_> = (0..13 * 3600).map(|i| a_event(f64::from(i), host(1), ext(1), IpProto::Tcp, 80)).collect();
    let f = detect_stale_http(&steady, &th);
    assert_eq!(f.len(), 1);
    assert_eq!((f[0].internal_hosts, f[0].external_hosts, f[0].category), (1, 1, Category::Stale));

    let tls: Vec<_> = steady.iter().map(|e| a_event(e.ts.as_secs_f64(), host(1), ext(1), IpProto::Tcp, 443)).collect();
    assert_eq!(detect_stale_http(&tls, &th).len(), 1);

    // A 10k burst within one hour plus a single straggler 13 h later: the
    // span and rate pass but only 2 of 14 hour bins are covered.
    let mut burst: Vec<_> =
        (0..10_000).map(|i| a_event(f64::from(i) * 0.3, host(1), ext(1), IpProto::Tcp, 80)).collect();
    burst.push(a_event(13.0 * 3600.0, host(1), ext(1), IpProto::Tcp, 80));
    let covered: BTreeSet<i64> = burst.iter().map(|e| e.ts.secs() / 3600).collect();
    assert_eq!(covered.len(), 2);
    assert!(detect_stale_http(&burst, &th).is_empty());
}

#[test]
fn resolver_dark() {
    let evs: Vec<_> = (0..15_000)
        .map(|i| a_event(f64::from(i), host(i % 3), ext(i / 3 % 5000), IpProto::Udp, 53))
        .collect();
    let f = detect_resolver_dark(&evs, &ResolverDarkThresholds::default());
    assert_eq!(f.len(), 1);
    assert_eq!((f[0].internal_hosts, f[0].external_hosts, f[0].category), (3, 5000, Category::Other));

    let client: Vec<_> = (0..100).map(|i| a_event(f64::from(i), host(1), ext(i % 5), IpProto::Udp, 53)).collect();
    assert!(detect_resolver_dark(&client, &ResolverDarkThresholds::default()).is_empty());
    let tcp: Vec<_> = (0..3000).map(|i| a_event(f64::from(i), host(1), ext(i), IpProto::Tcp, 53)).collect();
    assert!(detect_resolver_dark(&tcp, &ResolverDarkThresholds::default()).is_empty());
}

#[test]
fn dns_accelerator() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let evs: Vec<_> = (0..50 * 600)
        .map(|i| c_event(f64::from(i), host(i % 50), ext(rng.random_range(0..200)), 53, rng.random_range(1024..65535)))
        .collect();
    let f = detect_dns_accelerator(&evs, &AcceleratorThresholds::default());
    assert_eq!(f.len(), 1);
    assert_eq!(f[0].internal_hosts, 50);
    assert!((100..=1000).contains(&f[0].external_hosts));
    // The same events do not look like a reflection surge.
    assert!(detect_reflection_surge(&evs, &ReflectionThresholds::default()).is_empty());

    let ntp: Vec<_> = evs.iter().map(|e| c_event(e.ts.as_secs_f64(), e.internal_host(), e.external_host(), 123, 9)).collect();
    assert!(detect_dns_accelerator(&ntp, &AcceleratorThresholds::default()).is_empty());
    let single: Vec<_> = (0..600).map(|i| c_event(f64::from(i), host(1), ext(1), 53, 5000 + i as u16)).collect();
    assert!(detect_dns_accelerator(&single, &AcceleratorThresholds::default()).is_empty());
}

#[test]
fn empty_report() {
    let r = run_all(&[], &RuleThresholds::default(), None);
    assert!(r.findings.is_empty());
    assert_eq!(r.coverage.total_events, 0);
}

#[test]
fn denylist_tags_and_sorting() {
    let d = Denylist::parse("# c2 nodes\n45.0.0.1\n198.51.100.0/24 # lab\n").unwrap();
    assert!(d.contains(ext(1)));
    assert!(Denylist::parse("nonsense").is_err());
    let mut evs: Vec<_> = (0..5000)
        .map(|i| a_event(f64::from(i) * 60.0, host(1), ext(1), IpProto::Tcp, 8443))
        .collect();
    evs.extend((0..382).map(|i| a_event(f64::from(i), host(2), ext(100 + i), IpProto::Tcp, 25)));
    let evs = sorted(evs);
    let r = run_all(&evs, &RuleThresholds::default(), Some(&d));
    assert_eq!(r.findings.len(), 2);
    assert_eq!(r.findings[0].rule_id, RuleId::PeriodicProbe);
    assert_eq!(r.findings[0].tags, vec![LISTED_TAG.to_string()]);
    assert!(r.findings[1].tags.is_empty());
    assert_eq!(r.coverage.explained_events, 5382);
}

/// Independent group-by over the raw log: hosts per external destination and
/// destinations per internal host, filtered by a predicate.
fn brute_counts(
    evs: &[ErroneousEvent],
    keep: impl Fn(&ErroneousEvent) -> bool,
) -> (BTreeMap<Ipv4Addr, BTreeSet<Ipv4Addr>>, BTreeMap<Ipv4Addr, BTreeSet<Ipv4Addr>>) {
    let mut by_dst: BTreeMap<Ipv4Addr, BTreeSet<Ipv4Addr>> = BTreeMap::new();
    let mut by_src: BTreeMap<Ipv4Addr, BTreeSet<Ipv4Addr>> = BTreeMap::new();
    for e in evs.iter().filter(|e| keep(e)) {
        by_dst.entry(e.flow.responder_ip).or_default().insert(e.flow.initiator_ip);
        by_src.entry(e.flow.initiator_ip).or_default().insert(e.flow.responder_ip);
    }
    (by_dst, by_src)
}

fn random_events(seed: u64, n: usize) -> Vec<ErroneousEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut evs: Vec<_> = (0..n)
        .map(|_| {
            let t = rng.random_range(0.0..200_000.0);
            let src = host(rng.random_range(0..12));
            let dst = if rng.random_bool(0.2) {
                Ipv4Addr::new(100, 100, 100, rng.random_range(0..3))
            } else {
                ext(rng.random_range(0..150))
            };
            match rng.random_range(0..4) {
                0 => c_event(t, src, dst, if rng.random_bool(0.5) { 53 } else { 123 }, rng.random_range(0..4)),
                1 => a_event(t, src, dst, IpProto::Tcp, *[25, 80, 443].get(rng.random_range(0..3)).unwrap()),
                _ => a_event(t, src, dst, IpProto::Udp, *[53, 123].get(rng.random_range(0..2)).unwrap()),
            }
        })
        .collect();
    crate::store::sort_events(&mut evs);
    evs
}

#[test]
fn counts_match_brute_force() {
    for seed in 0..5 {
        let evs = random_events(seed, 3000);
        let bogon = BogonThresholds { min_internal: 3, ..Default::default() };
        let (by_dst, _) = brute_counts(&evs, |e| {
            e.flow.proto == IpProto::Udp && e.flow.responder_port == 53 && e.flow.responder_ip.octets()[0] == 100
        });
        let expect: Vec<usize> = by_dst.values().map(BTreeSet::len).filter(|&n| n >= 3).collect();
        let got: Vec<usize> = detect_bogon_dns(&evs, &bogon).iter().map(|f| f.internal_hosts).collect();
        assert_eq!(got, expect);

        let smtp = SmtpThresholds { min_ext: 20 };
        let (_, by_src) = brute_counts(&evs, |e| e.pattern == Pattern::A && e.flow.proto == IpProto::Tcp && e.flow.responder_port == 25);
        let expect: Vec<usize> = by_src.values().map(BTreeSet::len).filter(|&n| n >= 20).collect();
        let got: Vec<usize> = detect_smtp_fanout(&evs, &smtp).iter().map(|f| f.external_hosts).collect();
        assert_eq!(got, expect);

        let ntp = NtpThresholds { min_pkts: 40 };
        let keep = |e: &ErroneousEvent| e.pattern == Pattern::A && e.flow.proto == IpProto::Udp && e.flow.responder_port == 123;
        let mut per_host: BTreeMap<Ipv4Addr, u64> = BTreeMap::new();
        for e in evs.iter().filter(|e| keep(e)) {
            *per_host.entry(e.flow.initiator_ip).or_default() += 1;
        }
        let hosts: BTreeSet<Ipv4Addr> = per_host.iter().filter(|(_, &n)| n >= 40).map(|(h, _)| *h).collect();
        let ext_set: BTreeSet<Ipv4Addr> =
            evs.iter().filter(|e| keep(e) && hosts.contains(&e.flow.initiator_ip)).map(|e| e.flow.responder_ip).collect();
        let f = detect_unanswered_ntp(&evs, &ntp);
        if hosts.is_empty() {
            assert!(f.is_empty());
        } else {
            assert_eq!((f[0].internal_hosts, f[0].external_hosts), (hosts.len(), ext_set.len()));
        }
    }
}

fn findings_with(evs: &[ErroneousEvent], th: &RuleThresholds) -> usize {
    run_all(evs, th, None).findings.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn raising_thresholds_never_adds_findings(seed in 0u64..1000, which in 0usize..9, bump in 1u64..50) {
        let evs = random_events(seed, 1500);
        let base = RuleThresholds {
            reflection_surge: ReflectionThresholds { min_internal: 3, window: 3600.0 },
            periodic_probe: PeriodicThresholds { min_pkts: 10, regularity: 2.0, min_days: 1 },
            smtp_fanout: SmtpThresholds { min_ext: 5 },
            bogon_dns: BogonThresholds { min_internal: 2, ..Default::default() },
            unanswered_ntp: NtpThresholds { min_pkts: 10 },
            stale_http: StaleHttpThresholds { min_rate: 0.0001, min_hours: 1.0, min_coverage: 0.01, ports: vec![80, 443] },
            resolver_dark: ResolverDarkThresholds { min_ext: 10 },
            dns_accelerator: AcceleratorThresholds { min_pkts: 10, min_ext: 5 },
        };
        let mut raised = base.clone();
        let b = bump as usize;
        match which {
            0 => raised.reflection_surge.min_internal += b,
            1 => raised.periodic_probe.min_pkts += bump,
            2 => raised.smtp_fanout.min_ext += b,
            3 => raised.bogon_dns.min_internal += b,
            4 => raised.unanswered_ntp.min_pkts += bump,
            5 => raised.stale_http.min_rate *= bump as f64,
            6 => raised.resolver_dark.min_ext += b,
            7 => raised.dns_accelerator.min_ext += b,
            _ => raised.periodic_probe.min_days += b,
        }
        prop_assert!(findings_with(&evs, &raised) <= findings_with(&evs, &base));
    }
}
