//! Acceptance run: one PASS/FAIL line per criterion, driven through the
//! installed binary on generated traces.
//!
//! Tolerances:
//! 1. labels match exactly (precision = recall = 1.0); filter < 30 s
//! 2. erroneous/outbound ratio in [0.00055, 0.00065]
//! 3. one finding per planted anomaly, I and E equal, no extras, fixed
//!    category per rule
//! 4. zero findings, zero correlated pattern-B events
//! 5. identical logs with offload on and off; fast-path share >= 0.90 on
//!    flows averaging >= 20 packets
//! 6. identical findings and sender CDF up to renaming; /16 bijection < 10 s
//! 7. byte-identical golden round trip; 1 M fuzzed frames without a crash
//! 8. byte-identical outputs across two full runs
//! 9. (soft) filter >= 100 k packets/s on a 1 M-packet trace

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use errsift::codec::{decode, read_pcap_from, write_pcap_to, LinkType};
use errsift::detector::{ErroneousEvent, FlowKey, Pattern};
use errsift::privacy::AnonKey;
use errsift::rules::{Category, FindingsReport, RuleId};
use errsift::synth::{GroundTruth, Label};
use errsift::time::Timestamp;
use ipnet::Ipv4Net;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KEY_HEX: &str = "8f3a1c2b4d5e6f708192a3b4c5d6e7f80112233445566778899aabbccddeeff0";
const INTERNAL: &str = "10.20.0.0/16";

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    SoftFail,
}

type Outcome = Result<(bool, String), String>;

struct Run {
    dir: PathBuf,
    lines: Vec<(usize, &'static str, Status, String)>,
}

impl Run {
    fn record(&mut self, n: usize, name: &'static str, soft: bool, outcome: Outcome) {
        let (status, detail) = match outcome {
            Ok((true, d)) => (Status::Pass, d),
            Ok((false, d)) if soft => (Status::SoftFail, d),
            Ok((false, d)) => (Status::Fail, d),
            Err(e) => (if soft { Status::SoftFail } else { Status::Fail }, format!("error: {e}")),
        };
        let tag = match status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::SoftFail => "SOFT-FAIL",
        };
        println!("[{n}] {name}: {tag} - {detail}");
        self.lines.push((n, name, status, detail));
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_errsift"));
    c.env_remove("ERRSIFT_ANON_KEY");
    c
}

fn run(cmd: &mut Command) -> Result<Duration, String> {
    let t = Instant::now();
    let out = cmd.output().map_err(|e| e.to_string())?;
    let took = t.elapsed();
    if !out.status.success() {
        return Err(format!("{:?} exited {:?}: {}", cmd, out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(took)
}

fn synth(r: &Run, preset: &str, stem: &str) -> Result<GroundTruth, String> {
    run(bin().args(["synth", "--preset", preset, "--out"]).arg(r.path(&format!("{stem}.pcap"))).arg("--truth").arg(r.path(&format!("{stem}.truth.json"))))?;
    GroundTruth::load(&r.path(&format!("{stem}.truth.json"))).map_err(|e| e.to_string())
}

/// Filter `stem.pcap` into `out`; `extra` adds flags. Returns the wall time.
fn filter(r: &Run, stem: &str, out: &str, extra: &[&str]) -> Result<Duration, String> {
    let mut c = bin();
    c.args(["filter", "--in"]).arg(r.path(&format!("{stem}.pcap"))).args(["--internal", INTERNAL, "--out"]).arg(r.path(out));
    for a in extra {
        if let Some(name) = a.strip_prefix('@') {
            c.arg(r.path(name));
        } else {
            c.arg(a);
        }
    }
    run(&mut c)
}

fn events(path: &Path) -> Result<Vec<ErroneousEvent>, String> {
    errsift::store::read_all(path).map_err(|e| e.to_string())
}

fn json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let s = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&s).map_err(|e| format!("{}: {e}", path.display()))
}

type Bag = BTreeMap<(Pattern, FlowKey, Option<Timestamp>), usize>;

fn bag(items: impl Iterator<Item = (Pattern, FlowKey, Timestamp)>) -> Bag {
    let mut out = Bag::new();
    for (p, k, ts) in items {
        *out.entry((p, k, (p == Pattern::C).then_some(ts))).or_default() += 1;
    }
    out
}

fn truth_bag(t: &GroundTruth) -> Bag {
    bag(t.flows.iter().filter_map(|f| {
        let p = match f.label {
            Label::A => Pattern::A,
            Label::B => Pattern::B,
            Label::C => Pattern::C,
            _ => return None,
        };
        Some((p, f.key, f.first_ts))
    }))
}

fn criterion_1(r: &Run, truth: &GroundTruth) -> Outcome {
    let took = filter(r, "t1", "t1.raw.jsonl", &["--no-anon"])?;
    let got = bag(events(&r.path("t1.raw.jsonl"))?.iter().map(|e| (e.pattern, e.flow, e.ts)));
    let want = truth_bag(truth);
    let tp: usize = got.iter().map(|(k, n)| (*n).min(want.get(k).copied().unwrap_or(0))).sum();
    let g: usize = got.values().sum();
    let w: usize = want.values().sum();
    let precision = if g == 0 { 1.0 } else { tp as f64 / g as f64 };
    let recall = if w == 0 { 1.0 } else { tp as f64 / w as f64 };
    let ok = precision == 1.0 && recall == 1.0 && took < Duration::from_secs(30);
    Ok((ok, format!("{w} labelled events, precision={precision:.4} recall={recall:.4}, filter {:.2} s", took.as_secs_f64())))
}

fn criterion_2(r: &Run) -> Result<((bool, String), f64), String> {
    let took = filter(r, "ratio", "ratio.jsonl", &["--no-anon"])?;
    run(bin().args(["analyze", "--events"]).arg(r.path("ratio.jsonl")).arg("--out").arg(r.path("ratio.analysis")))?;
    let summary: serde_json::Value = json(&r.path("ratio.analysis/summary.json"))?;
    let ratio = summary["erroneous_ratio"].as_f64().ok_or("summary has no ratio")?;
    let ok = (0.00055..=0.00065).contains(&ratio);
    let pkts = summary["outbound_pkts"].as_u64().unwrap_or(0);
    let counters: serde_json::Value = json(&r.path("ratio.counters.json"))?;
    let seen = counters["detector"]["packets_seen"].as_u64().unwrap_or(0);
    let rate = seen as f64 / took.as_secs_f64();
    Ok(((ok, format!("ratio={:.5}% over {pkts} outbound packets", ratio * 100.0)), rate))
}

fn table_category(rule: RuleId) -> Category {
    match rule {
        RuleId::ReflectionSurge | RuleId::PeriodicProbe | RuleId::SmtpFanout => Category::Malicious,
        RuleId::BogonDns | RuleId::UnansweredNtp => Category::Faulty,
        RuleId::StaleHttp => Category::Stale,
        RuleId::ResolverDark | RuleId::DnsAccelerator => Category::Other,
    }
}

fn criterion_3(r: &Run, truth: &GroundTruth) -> Outcome {
    run(bin().args(["detect", "--events"]).arg(r.path("t1.raw.jsonl")).arg("--out").arg(r.path("t1.detect")))?;
    let report: FindingsReport = json(&r.path("t1.detect/findings.json"))?;
    let mut problems = Vec::new();
    for want in &truth.expected_findings {
        let hits: Vec<_> = report.findings.iter().filter(|f| f.rule_id == want.rule_id).collect();
        match hits.as_slice() {
            [f] if f.internal_hosts == want.internal_hosts
                && f.external_hosts == want.external_hosts
                && f.category == table_category(want.rule_id) => {}
            [f] => problems.push(format!(
                "{}: I={} E={} {:?}, want I={} E={} {:?}",
                want.rule_id.name(),
                f.internal_hosts,
                f.external_hosts,
                f.category,
                want.internal_hosts,
                want.external_hosts,
                table_category(want.rule_id)
            )),
            v => problems.push(format!("{}: {} findings", want.rule_id.name(), v.len())),
        }
    }
    let planted: BTreeSet<RuleId> = truth.expected_findings.iter().map(|f| f.rule_id).collect();
    let extra = report.findings.iter().filter(|f| !planted.contains(&f.rule_id)).count();
    if extra > 0 {
        problems.push(format!("{extra} extra findings"));
    }
    let ok = problems.is_empty() && report.findings.len() == truth.expected_findings.len();
    let refl = report.findings.iter().find(|f| f.rule_id == RuleId::ReflectionSurge);
    let detail = if ok {
        format!(
            "{} findings, one per planted rule; REFLECTION_SURGE I={} E={}",
            report.findings.len(),
            refl.map_or(0, |f| f.internal_hosts),
            refl.map_or(0, |f| f.external_hosts)
        )
    } else {
        problems.join("; ")
    };
    Ok((ok, detail))
}

fn criterion_4(r: &Run) -> Outcome {
    filter(r, "bg", "bg.jsonl", &["--no-anon"])?;
    run(bin().args(["detect", "--events"]).arg(r.path("bg.jsonl")).arg("--out").arg(r.path("bg.detect")))?;
    let report: FindingsReport = json(&r.path("bg.detect/findings.json"))?;
    let evs = events(&r.path("bg.jsonl"))?;
    let correlated = evs.iter().filter(|e| e.pattern == Pattern::B && e.correlated).count();
    let counters: serde_json::Value = json(&r.path("bg.counters.json"))?;
    let pkts = counters["detector"]["packets_seen"].as_u64().unwrap_or(0);

    // Same background plus sparse pattern-A noise, every rule left below
    // its threshold.
    let mut sc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/presets/preset-background-only.json"),
    ).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    sc["noise"] = serde_json::json!({ "a_flows": 60, "b_flows": 0 });
    std::fs::write(r.path("bgnoise.scenario.json"), sc.to_string()).map_err(|e| e.to_string())?;
    run(bin().args(["synth", "--scenario"]).arg(r.path("bgnoise.scenario.json")).arg("--out").arg(r.path("bgnoise.pcap")).arg("--truth").arg(r.path("bgnoise.truth.json")))?;
    filter(r, "bgnoise", "bgnoise.jsonl", &["--no-anon"])?;
    run(bin().args(["detect", "--events"]).arg(r.path("bgnoise.jsonl")).arg("--out").arg(r.path("bgnoise.detect")))?;
    let noisy: FindingsReport = json(&r.path("bgnoise.detect/findings.json"))?;
    let noisy_events = events(&r.path("bgnoise.jsonl"))?;
    let noisy_correlated = noisy_events.iter().filter(|e| e.pattern == Pattern::B && e.correlated).count();
    Ok((
        report.findings.is_empty() && correlated == 0 && noisy.findings.is_empty() && noisy_correlated == 0,
        format!(
            "{pkts} packets, {} events, {} findings, {correlated} correlated B; with {} noise events: {} findings, {noisy_correlated} correlated B",
            evs.len(),
            report.findings.len(),
            noisy_events.len(),
            noisy.findings.len()
        ),
    ))
}

fn criterion_5(r: &Run) -> Outcome {
    std::fs::write(r.path("no-rules.json"), r#"{"mirror":{"rules_enabled":false,"replay_buffer":true}}"#)
        .map_err(|e| e.to_string())?;
    filter(r, "t1", "t1.norules.jsonl", &["--no-anon", "--config", "@no-rules.json"])?;
    let same = std::fs::read(r.path("t1.raw.jsonl")).map_err(|e| e.to_string())?
        == std::fs::read(r.path("t1.norules.jsonl")).map_err(|e| e.to_string())?;

    let scenario = r#"{"name":"long-flows","seed":20,"duration":3600,
        "background":{"target_packets":200000,"tcp_data_pkts":[30,50],
          "mix":{"tcp":1,"dns":0,"udp":0,"echo":0,"server":0,"internal":0,"refused":0}}}"#;
    std::fs::write(r.path("long.scenario.json"), scenario).map_err(|e| e.to_string())?;
    run(bin().args(["synth", "--scenario"]).arg(r.path("long.scenario.json")).arg("--out").arg(r.path("long.pcap")).arg("--truth").arg(r.path("long.truth.json")))?;
    let truth = GroundTruth::load(&r.path("long.truth.json")).map_err(|e| e.to_string())?;
    let avg = truth.totals.packets as f64 / truth.flows.len().max(1) as f64;
    filter(r, "long", "long.jsonl", &["--no-anon", "--mirror-stats", "@long.mirror.json"])?;
    let stats: serde_json::Value = json(&r.path("long.mirror.json"))?;
    let fast = stats["fast_path_hits"].as_f64().unwrap_or(0.0) / stats["offered"].as_f64().unwrap_or(1.0);
    Ok((
        same && fast >= 0.90 && avg >= 20.0,
        format!("logs identical={same}; fast-path share {:.1}% on flows averaging {avg:.1} packets", fast * 100.0),
    ))
}

fn pseudo_flow(k: &AnonKey, f: FlowKey) -> FlowKey {
    FlowKey { initiator_ip: k.pseudonymize(f.initiator_ip), responder_ip: k.pseudonymize(f.responder_ip), ..f }
}

fn cdf_rows(path: &Path) -> Result<Vec<(usize, Ipv4Addr, u64, String)>, String> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    rd.records()
        .map(|r| {
            let r = r.map_err(|e| e.to_string())?;
            Ok((
                r[0].parse().map_err(|_| "rank")?,
                r[1].parse().map_err(|_| "host")?,
                r[2].parse().map_err(|_| "events")?,
                r[3].to_string(),
            ))
        })
        .collect()
}

fn criterion_6(r: &Run) -> Outcome {
    std::fs::write(r.path("key.hex"), KEY_HEX).map_err(|e| e.to_string())?;
    let prefixes: Vec<Ipv4Net> = vec![INTERNAL.parse().unwrap()];
    let key = AnonKey::from_hex(KEY_HEX, prefixes.clone()).map_err(|e| e.to_string())?;
    filter(r, "t1", "t1.anon.jsonl", &["--anon-key-file", "@key.hex"])?;
    for stem in ["t1.raw", "t1.anon"] {
        let ev = r.path(&format!("{stem}.jsonl"));
        run(bin().args(["analyze", "--events"]).arg(&ev).arg("--out").arg(r.path(&format!("{stem}.analysis"))))?;
        run(bin().args(["detect", "--events"]).arg(&ev).arg("--out").arg(r.path(&format!("{stem}.findings"))))?;
    }
    let raw: FindingsReport = json(&r.path("t1.raw.findings/findings.json"))?;
    let anon: FindingsReport = json(&r.path("t1.anon.findings/findings.json"))?;
    let mapped: Vec<String> = raw
        .findings
        .iter()
        .map(|f| {
            let mut f = f.clone();
            f.evidence.iter_mut().for_each(|e| e.flow = pseudo_flow(&key, e.flow));
            serde_json::to_string(&f).unwrap()
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let anon_set: Vec<String> =
        anon.findings.iter().map(|f| serde_json::to_string(f).unwrap()).collect::<BTreeSet<_>>().into_iter().collect();
    let findings_same = !mapped.is_empty() && mapped == anon_set && raw.coverage == anon.coverage;

    let rc = cdf_rows(&r.path("t1.raw.analysis/senders_cdf.csv"))?;
    let ac = cdf_rows(&r.path("t1.anon.analysis/senders_cdf.csv"))?;
    let shape = |v: &[(usize, Ipv4Addr, u64, String)]| v.iter().map(|(r, _, n, c)| (*r, *n, c.clone())).collect::<Vec<_>>();
    let hosts_raw: BTreeSet<(Ipv4Addr, u64)> = rc.iter().map(|(_, h, n, _)| (key.pseudonymize(*h), *n)).collect();
    let hosts_anon: BTreeSet<(Ipv4Addr, u64)> = ac.iter().map(|(_, h, n, _)| (*h, *n)).collect();
    let renamed = rc.iter().filter(|(_, h, _, _)| key.pseudonymize(*h) != *h).count();
    let cdf_same = shape(&rc) == shape(&ac) && hosts_raw == hosts_anon && renamed > 0;

    let t = Instant::now();
    let net: Ipv4Net = INTERNAL.parse().unwrap();
    let images: BTreeSet<Ipv4Addr> = net.hosts().chain([net.network(), net.broadcast()]).map(|a| key.pseudonymize(a)).collect();
    let bijective = images.len() == 65_536 && images.iter().all(|a| net.contains(a));
    let took = t.elapsed();
    Ok((
        findings_same && cdf_same && bijective && took < Duration::from_secs(10),
        format!(
            "{} findings equal after renaming={findings_same}; CDF over {} senders equal={cdf_same}; /16 bijective={bijective} in {:.2} s",
            anon.findings.len(),
            ac.len(),
            took.as_secs_f64()
        ),
    ))
}

fn criterion_7() -> Outcome {
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    let mut files = 0;
    for name in ["ethernet.pcap", "rawip.pcap"] {
        let bytes = std::fs::read(golden.join(name)).map_err(|e| e.to_string())?;
        let cap = read_pcap_from(&bytes[..]).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        write_pcap_to(&cap, &mut out).map_err(|e| e.to_string())?;
        if out != bytes {
            return Ok((false, format!("{name} differs after round trip")));
        }
        files += 1;
    }
    let a: Ipv4Addr = "10.20.1.1".parse().unwrap();
    let b: Ipv4Addr = "198.51.100.1".parse().unwrap();
    let udp = errsift::codec::build::udp(a, 4000, b, 53, 30);
    let seeds: Vec<Vec<u8>> = [
        errsift::codec::build::tcp(a, 4000, b, 443, errsift::codec::build::SYN),
        errsift::codec::build::icmp_error(b, a, 3, 3, &udp),
        udp,
    ]
    .iter()
    .map(|d| errsift::codec::build::ethernet_frame(d))
    .collect();
    let internal: Vec<Ipv4Net> = vec![INTERNAL.parse().unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut decoded = 0u64;
    let result = std::panic::catch_unwind(move || {
        for i in 0..1_000_000u32 {
            let mut f = seeds[i as usize % seeds.len()].clone();
            for _ in 0..rng.random_range(1..8) {
                let at = rng.random_range(0..f.len());
                f[at] = rng.random();
            }
            f.truncate(rng.random_range(0..=f.len()));
            if decode(Timestamp::from_secs(i64::from(i)), &f, LinkType::Ethernet, &internal).is_ok() {
                decoded += 1;
            }
        }
        decoded
    });
    match result {
        Ok(d) => Ok((true, format!("{files} golden files byte-identical; 1000000 fuzzed frames, {d} decoded, 0 crashes"))),
        Err(_) => Ok((false, "decoder panicked on fuzzed input".into())),
    }
}

const OUTPUTS: [&str; 8] = [
    "events.jsonl",
    "events.counters.json",
    "analysis/timeline.csv",
    "analysis/senders_cdf.csv",
    "analysis/summary.json",
    "detect/findings.json",
    "detect/findings.csv",
    "trace.pcap",
];

fn full_pipeline(r: &Run, sub: &str) -> Result<(), String> {
    let d = r.path(sub);
    std::fs::create_dir_all(&d).map_err(|e| e.to_string())?;
    run(bin().args(["synth", "--preset", "preset-table1-scaled", "--seed", "42", "--out"]).arg(d.join("trace.pcap")).arg("--truth").arg(d.join("truth.json")))?;
    run(bin()
        .args(["filter", "--in"])
        .arg(d.join("trace.pcap"))
        .args(["--internal", INTERNAL, "--out"])
        .arg(d.join("events.jsonl"))
        .arg("--anon-key-file")
        .arg(r.path("key.hex")))?;
    run(bin().args(["analyze", "--events"]).arg(d.join("events.jsonl")).arg("--out").arg(d.join("analysis")))?;
    run(bin().args(["detect", "--events"]).arg(d.join("events.jsonl")).arg("--out").arg(d.join("detect")))?;
    Ok(())
}

fn criterion_8(r: &Run) -> Outcome {
    full_pipeline(r, "det1")?;
    full_pipeline(r, "det2")?;
    let mut differing = Vec::new();
    for f in OUTPUTS.iter().chain(["truth.json"].iter()) {
        let a = std::fs::read(r.path("det1").join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(r.path("det2").join(f)).map_err(|e| e.to_string())?;
        if a != b {
            differing.push(*f);
        }
    }
    Ok((differing.is_empty(), if differing.is_empty() { format!("{} artefacts byte-identical", OUTPUTS.len() + 1) } else { format!("differ: {differing:?}") }))
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let mut r = Run { dir: tmp.path().to_path_buf(), lines: Vec::new() };

    let prep = (|| -> Result<(GroundTruth, GroundTruth, GroundTruth), String> {
        Ok((synth(&r, "preset-table1-scaled", "t1")?, synth(&r, "preset-ratio-0p06", "ratio")?, synth(&r, "preset-background-only", "bg")?))
    })();
    let (t1, _ratio, _bg) = prep.expect("generating the presets");

    let c1 = criterion_1(&r, &t1);
    r.record(1, "oracle equivalence", false, c1);
    let (c2, rate) = match criterion_2(&r) {
        Ok((o, rate)) => (Ok(o), Ok(rate)),
        Err(e) => (Err(e.clone()), Err(e)),
    };
    r.record(2, "erroneous ratio", false, c2);
    let c3 = criterion_3(&r, &t1);
    r.record(3, "planted findings", false, c3);
    let c4 = criterion_4(&r);
    r.record(4, "background soundness", false, c4);
    let c5 = criterion_5(&r);
    r.record(5, "offload equivalence", false, c5);
    let c6 = criterion_6(&r);
    r.record(6, "privacy invariance", false, c6);
    r.record(7, "codec fidelity", false, criterion_7());
    let c8 = criterion_8(&r);
    r.record(8, "determinism", false, c8);
    let c9 = rate.map(|rate| (rate >= 100_000.0, format!("{:.0} packets/s through filter", rate)));
    r.record(9, "throughput", true, c9);

    let failed: Vec<usize> = r.lines.iter().filter(|l| l.2 == Status::Fail).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
