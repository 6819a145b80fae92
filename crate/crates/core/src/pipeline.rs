//! End-to-end jobs behind the command-line tool.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

use crate::analytics::{self, DEFAULT_BIN_WIDTH};
use crate::codec::{decode, PcapReader, PcapWriter};
use crate::detector::{DetectorConfig, DetectorCounters, FlowDetector};
use crate::mirror::{LoggedPacket, MirrorConfig, MirrorPipeline, PipelineCounters};
use crate::privacy::{sanitize, AnonKey};
use crate::rules::{self, Denylist, FindingsReport, RuleThresholds};
use crate::store::{self, EventWriter};
use crate::synth::{self, GroundTruth, Scenario};
use crate::time::{Duration, Timestamp};

/// Failures of a job, split by whose fault they are.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    /// Unreadable, malformed or inconsistent input.
    #[error("{0}")]
    Input(String),
    /// Anything else, such as an output file that cannot be written.
    #[error("{0}")]
    Other(String),
}

fn input(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Input(e.to_string())
}

fn other(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Other(e.to_string())
}

/// Optional tuning file for `filter`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub detector: DetectorConfig,
    pub mirror: MirrorConfig,
}

impl FilterConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub detector: DetectorCounters,
    pub pipeline: PipelineCounters,
}

pub struct FilterJob {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Replaces any prefixes given in the config.
    pub internal: Vec<Ipv4Net>,
    pub config: FilterConfig,
    /// Events and logged packets are pseudonymised when set.
    pub anon: Option<AnonKey>,
    /// Also write the logged packets, payloads stripped, to this pcap.
    pub log_pcap: Option<PathBuf>,
}

/// pcap in, event log out. Writes the counters next to the log and returns
/// them.
pub fn filter(job: &FilterJob) -> Result<RunCounters, PipelineError> {
    let mut dcfg = job.config.detector.clone();
    if !job.internal.is_empty() {
        dcfg.internal_prefixes = job.internal.clone();
    }
    if dcfg.internal_prefixes.is_empty() {
        return Err(input("no internal prefixes given"));
    }
    let prefixes = dcfg.internal_prefixes.clone();
    let detector = FlowDetector::new(dcfg).map_err(input)?;
    let mut mirror = MirrorPipeline::new(detector, job.config.mirror.clone());

    let f = File::open(&job.input).map_err(|e| input(format!("{}: {e}", job.input.display())))?;
    let mut reader = PcapReader::new(BufReader::with_capacity(1 << 20, f))
        .map_err(|e| input(format!("{}: {e}", job.input.display())))?;
    let link = reader.link_type();
    let mut writer = EventWriter::create(&job.output).map_err(other)?;
    let mut logged: Vec<LoggedPacket> = Vec::new();
    let mut orig_lens: Vec<u32> = Vec::new();
    let mut end: Option<Timestamp> = None;

    let emit = |events: Vec<_>, writer: &mut EventWriter<_>| -> Result<(), PipelineError> {
        for ev in events {
            let ev = match &job.anon {
                Some(k) => k.anonymize_event(&ev),
                None => ev,
            };
            writer.append(&ev).map_err(other)?;
        }
        Ok(())
    };

    let mut seq = 0u64;
    while let Some(rec) = reader.next_record().map_err(|e| input(format!("{}: {e}", job.input.display())))? {
        end = Some(end.map_or(rec.ts, |e| e.max(rec.ts)));
        if job.log_pcap.is_some() {
            orig_lens.push(rec.orig_len);
        }
        match decode(rec.ts, &rec.data, link, &prefixes) {
            Ok(pkt) => {
                mirror.offer(seq, &pkt, &rec.data);
            }
            Err(e) => mirror.detector_mut().note_undecodable(&e),
        }
        seq += 1;
        emit(mirror.drain_events(), &mut writer)?;
        if job.log_pcap.is_some() {
            logged.extend(mirror.drain_logged());
        } else {
            mirror.drain_logged();
        }
    }
    if let Some(end) = end {
        emit(mirror.flush(end), &mut writer)?;
        logged.extend(mirror.drain_logged());
    }
    writer.finish().map_err(other)?;

    if let Some(path) = &job.log_pcap {
        logged.sort_by_key(|p| p.seq);
        let out = File::create(path).map_err(|e| other(format!("{}: {e}", path.display())))?;
        let mut w = PcapWriter::new(std::io::BufWriter::new(out), link, reader.snap_len()).map_err(other)?;
        for p in &logged {
            let bytes = sanitize(&p.bytes, link, job.anon.as_ref()).unwrap_or_else(|_| p.bytes.clone());
            let orig = orig_lens[p.seq as usize].max(bytes.len() as u32);
            w.write_record(p.ts, &bytes, orig).map_err(other)?;
        }
        w.finish().map_err(other)?;
    }

    let counters = RunCounters { detector: mirror.detector().counters().clone(), pipeline: mirror.stats().clone() };
    store::write_json(&store::counters_path(&job.output), &counters).map_err(other)?;
    Ok(counters)
}

fn read_events(path: &Path) -> Result<Vec<crate::detector::ErroneousEvent>, PipelineError> {
    store::read_all(path).map_err(input)
}

/// Writes `timeline.csv`, `senders_cdf.csv` and `summary.json` into `out`.
pub fn analyze(events: &Path, out: &Path, bin_width: Option<f64>) -> Result<analytics::SummaryReport, PipelineError> {
    let width = bin_width.unwrap_or(DEFAULT_BIN_WIDTH);
    if !(width.is_finite() && width > 0.0) {
        return Err(input("bin width must be a positive number of seconds"));
    }
    let evs = read_events(events)?;
    let sidecar = store::counters_path(events);
    let counters: Option<RunCounters> =
        if sidecar.exists() { Some(store::read_json(&sidecar).map_err(input)?) } else { None };
    std::fs::create_dir_all(out).map_err(|e| other(format!("{}: {e}", out.display())))?;
    let bins = analytics::timeline(&evs, Duration::from_secs_f64(width)).map_err(input)?;
    analytics::write_timeline_csv(&out.join("timeline.csv"), &bins).map_err(other)?;
    let cdf = analytics::sender_cdf(&evs);
    analytics::write_cdf_csv(&out.join("senders_cdf.csv"), &cdf).map_err(other)?;
    let report = analytics::summary(counters.as_ref().map(|c| &c.detector), &evs);
    store::write_json(&out.join("summary.json"), &report).map_err(other)?;
    Ok(report)
}

pub struct DetectJob {
    pub events: PathBuf,
    pub output: PathBuf,
    pub thresholds: Option<PathBuf>,
    pub denylist: Option<PathBuf>,
}

/// Writes `findings.json` and `findings.csv` into the output directory.
pub fn detect(job: &DetectJob) -> Result<FindingsReport, PipelineError> {
    let th = match &job.thresholds {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| input(format!("{}: {e}", p.display())))?;
            let th: RuleThresholds =
                serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", p.display())))?;
            th.validate().map_err(|e| input(format!("{}: {e}", p.display())))?;
            th
        }
        None => RuleThresholds::default(),
    };
    let deny = job.denylist.as_deref().map(Denylist::load).transpose().map_err(input)?;
    let evs = read_events(&job.events)?;
    let report = rules::run_all(&evs, &th, deny.as_ref());
    std::fs::create_dir_all(&job.output).map_err(|e| other(format!("{}: {e}", job.output.display())))?;
    rules::write_findings_json(&job.output.join("findings.json"), &report).map_err(other)?;
    rules::write_findings_csv(&job.output.join("findings.csv"), &report).map_err(other)?;
    Ok(report)
}

pub enum ScenarioSource {
    Preset(String),
    File(PathBuf),
}

/// Generates a trace and its labels.
pub fn synthesize(
    source: &ScenarioSource,
    seed: Option<u64>,
    pcap: &Path,
    truth: &Path,
) -> Result<GroundTruth, PipelineError> {
    let mut sc = match source {
        ScenarioSource::Preset(name) => Scenario::preset(name),
        ScenarioSource::File(p) => Scenario::load(p),
    }
    .map_err(input)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let trace = synth::generate(&sc).map_err(|e| match e {
        synth::SynthError::InfeasibleScenario(_) => input(e),
        _ => other(e),
    })?;
    trace.write_pcap(pcap).map_err(other)?;
    trace.truth.save(truth).map_err(other)?;
    Ok(trace.truth)
}
