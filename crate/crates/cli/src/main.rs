//! `errsift`: filter traces down to erroneous traffic, summarise it, flag
//! anomalies, and generate labelled test traces.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ipnet::Ipv4Net;
use errsift::pipeline::{self, DetectJob, FilterConfig, FilterJob, PipelineError, ScenarioSource};
use errsift::privacy::AnonKey;

const EXIT_OTHER: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_FINDINGS: u8 = 3;

#[derive(Parser)]
#[command(name = "errsift", version, about = "Erroneous outbound traffic filter and analyser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reduce a pcap to a log of erroneous-traffic events.
    Filter(FilterArgs),
    /// Timeline, per-sender distribution and summary of an event log.
    Analyze(AnalyzeArgs),
    /// Run the anomaly rules over an event log.
    Detect(DetectArgs),
    /// Generate a labelled synthetic trace.
    Synth(SynthArgs),
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long = "in", value_name = "PCAP")]
    input: PathBuf,
    /// Internal address space, comma separated.
    #[arg(long, value_name = "CIDR[,CIDR...]", value_delimiter = ',', required = true)]
    internal: Vec<Ipv4Net>,
    #[arg(long, value_name = "JSONL")]
    out: PathBuf,
    /// Detector and offload tuning (JSON).
    #[arg(long, value_name = "JSON")]
    config: Option<PathBuf>,
    /// 64 hex characters; defaults to the ERRSIFT_ANON_KEY variable.
    #[arg(long, value_name = "FILE", conflicts_with = "no_anon")]
    anon_key_file: Option<PathBuf>,
    /// Keep internal addresses in clear.
    #[arg(long)]
    no_anon: bool,
    /// Write the offload counters to this file.
    #[arg(long, value_name = "JSON")]
    mirror_stats: Option<PathBuf>,
    /// Write logged packets, payload stripped, to this pcap.
    #[arg(long, value_name = "PCAP")]
    log_pcap: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_name = "JSONL")]
    events: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Timeline bin width in seconds.
    #[arg(long, value_name = "SECONDS")]
    bin_width: Option<f64>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long, value_name = "JSONL")]
    events: PathBuf,
    #[arg(long, value_name = "JSON")]
    thresholds: Option<PathBuf>,
    /// Addresses or CIDRs, one per line; findings touching them are tagged.
    #[arg(long, value_name = "FILE")]
    denylist: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Exit with status 3 when anything is found.
    #[arg(long)]
    fail_on_findings: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_name = "NAME", conflicts_with = "scenario", required_unless_present = "scenario")]
    preset: Option<String>,
    #[arg(long, value_name = "JSON")]
    scenario: Option<PathBuf>,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "PCAP")]
    out: PathBuf,
    #[arg(long, value_name = "JSON")]
    truth: PathBuf,
}

fn json_line<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serialisable")
}

fn run_filter(a: FilterArgs) -> Result<u8, PipelineError> {
    let config = match &a.config {
        Some(p) => FilterConfig::load(p)?,
        None => FilterConfig::default(),
    };
    let anon = if a.no_anon {
        None
    } else {
        let key = AnonKey::load(a.anon_key_file.as_deref(), a.internal.clone())
            .map_err(|e| PipelineError::Input(format!("{e} (or pass --no-anon)")))?;
        Some(key)
    };
    let job = FilterJob { input: a.input, output: a.out, internal: a.internal, config, anon, log_pcap: a.log_pcap };
    let counters = pipeline::filter(&job)?;
    if let Some(p) = &a.mirror_stats {
        errsift::store::write_json(p, &counters.pipeline).map_err(|e| PipelineError::Other(e.to_string()))?;
    }
    log::info!(
        "{} packets, {} events, fast path {:.1}%",
        counters.detector.packets_seen,
        counters.detector.events_a + counters.detector.events_b + counters.detector.events_c,
        100.0 * counters.pipeline.fast_path_fraction()
    );
    println!("{}", json_line(&counters));
    Ok(0)
}

fn run_analyze(a: AnalyzeArgs) -> Result<u8, PipelineError> {
    let report = pipeline::analyze(&a.events, &a.out, a.bin_width)?;
    println!("{}", json_line(&report));
    Ok(0)
}

fn run_detect(a: DetectArgs) -> Result<u8, PipelineError> {
    let job = DetectJob { events: a.events, output: a.out, thresholds: a.thresholds, denylist: a.denylist };
    let report = pipeline::detect(&job)?;
    for f in &report.findings {
        log::info!("{} I={} E={} packets={}", f.rule_id.name(), f.internal_hosts, f.external_hosts, f.packets);
    }
    println!("{}", json_line(&serde_json::json!({ "findings": report.findings.len(), "coverage": report.coverage })));
    Ok(if a.fail_on_findings && !report.findings.is_empty() { EXIT_FINDINGS } else { 0 })
}

fn run_synth(a: SynthArgs) -> Result<u8, PipelineError> {
    let source = match (a.preset, a.scenario) {
        (Some(name), _) => ScenarioSource::Preset(name),
        (None, Some(path)) => ScenarioSource::File(path),
        (None, None) => unreachable!("clap requires one of them"),
    };
    let truth = pipeline::synthesize(&source, a.seed, &a.out, &a.truth)?;
    println!("{}", json_line(&truth.totals));
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Filter(a) => run_filter(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Detect(a) => run_detect(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("errsift: {e}");
            ExitCode::from(match e {
                PipelineError::Input(_) => EXIT_INPUT,
                PipelineError::Other(_) => EXIT_OTHER,
            })
        }
    }
}
