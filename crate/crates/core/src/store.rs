//! JSON Lines event log.
//!
//! One event per line, LF-terminated, timestamps nondecreasing within a file.
//! Absent ICMP and quote fields are written as `null`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::{InnerQuote, IpProto};
use crate::detector::{ErroneousEvent, FlowKey, Pattern};
use crate::time::Timestamp;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: schema_version {found} is not supported (expected {SCHEMA_VERSION})")]
    SchemaMismatch { line: usize, found: u64 },
    #[error("line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("event at {ts} precedes the previous event at {prev}")]
    OutOfOrder { prev: Timestamp, ts: Timestamp },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Serialize, Deserialize)]
struct EventLine {
    schema_version: u32,
    ts: Timestamp,
    pattern: Pattern,
    src: Ipv4Addr,
    dst: Ipv4Addr,
    proto: IpProto,
    sport: u16,
    dport: u16,
    icmp_type: Option<u8>,
    icmp_code: Option<u8>,
    inner_src: Option<Ipv4Addr>,
    inner_dst: Option<Ipv4Addr>,
    inner_proto: Option<IpProto>,
    inner_sport: Option<u16>,
    inner_dport: Option<u16>,
    /// Bytes quoted in the ICMP error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inner_len: Option<u16>,
    correlated: bool,
    pkts: u64,
    anon: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    evicted_early: bool,
}

impl From<&ErroneousEvent> for EventLine {
    fn from(e: &ErroneousEvent) -> Self {
        let q = e.inner.as_ref();
        EventLine {
            schema_version: SCHEMA_VERSION,
            ts: e.ts,
            pattern: e.pattern,
            src: e.flow.initiator_ip,
            dst: e.flow.responder_ip,
            proto: e.flow.proto,
            sport: e.flow.initiator_port,
            dport: e.flow.responder_port,
            icmp_type: e.icmp_type,
            icmp_code: e.icmp_code,
            inner_src: q.map(|q| q.orig_src_ip),
            inner_dst: q.map(|q| q.orig_dst_ip),
            inner_proto: q.map(|q| q.orig_proto),
            inner_sport: q.map(|q| q.orig_src_port),
            inner_dport: q.map(|q| q.orig_dst_port),
            inner_len: q.map(|q| q.quoted_bytes),
            correlated: e.correlated,
            pkts: e.pkts_in_flow,
            anon: e.anon,
            evicted_early: e.evicted_early,
        }
    }
}

impl EventLine {
    fn into_event(self) -> Option<ErroneousEvent> {
        let inner = match (self.inner_src, self.inner_dst, self.inner_proto) {
            (Some(s), Some(d), Some(p)) => Some(InnerQuote {
                orig_src_ip: s,
                orig_dst_ip: d,
                orig_proto: p,
                orig_src_port: self.inner_sport.unwrap_or(0),
                orig_dst_port: self.inner_dport.unwrap_or(0),
                quoted_bytes: self.inner_len.unwrap_or(0),
            }),
            (None, None, None) => None,
            _ => return None,
        };
        Some(ErroneousEvent {
            pattern: self.pattern,
            ts: self.ts,
            flow: FlowKey::new((self.src, self.sport), (self.dst, self.dport), self.proto),
            icmp_type: self.icmp_type,
            icmp_code: self.icmp_code,
            inner,
            pkts_in_flow: self.pkts,
            correlated: self.correlated,
            evicted_early: self.evicted_early,
            anon: self.anon,
        })
    }
}

pub fn to_line(ev: &ErroneousEvent) -> String {
    serde_json::to_string(&EventLine::from(ev)).expect("event serialises")
}

pub fn parse_line(line: &str, line_no: usize) -> Result<ErroneousEvent, StoreError> {
    #[derive(Deserialize)]
    struct Version {
        schema_version: Option<u64>,
    }
    match serde_json::from_str::<EventLine>(line) {
        Ok(l) if l.schema_version == SCHEMA_VERSION => l
            .into_event()
            .ok_or_else(|| StoreError::MalformedLine { line: line_no, msg: "partial inner quote".into() }),
        Ok(l) => Err(StoreError::SchemaMismatch { line: line_no, found: u64::from(l.schema_version) }),
        Err(e) => match serde_json::from_str::<Version>(line) {
            Ok(Version { schema_version: Some(v) }) if v != u64::from(SCHEMA_VERSION) => {
                Err(StoreError::SchemaMismatch { line: line_no, found: v })
            }
            _ => Err(StoreError::MalformedLine { line: line_no, msg: e.to_string() }),
        },
    }
}

pub struct EventWriter<W: Write> {
    out: W,
    last: Option<Timestamp>,
    written: u64,
}

impl EventWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self, StoreError> {
        let f = File::create(path).map_err(io_err(path))?;
        Ok(EventWriter::new(BufWriter::new(f)))
    }
}

impl<W: Write> EventWriter<W> {
    pub fn new(out: W) -> Self {
        EventWriter { out, last: None, written: 0 }
    }

    pub fn append(&mut self, ev: &ErroneousEvent) -> Result<(), StoreError> {
        if let Some(prev) = self.last {
            if ev.ts < prev {
                return Err(StoreError::OutOfOrder { prev, ts: ev.ts });
            }
        }
        self.last = Some(ev.ts);
        let io = |source| StoreError::Io { path: "<event log>".into(), source };
        self.out.write_all(to_line(ev).as_bytes()).map_err(io)?;
        self.out.write_all(b"\n").map_err(io)?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn finish(mut self) -> Result<W, StoreError> {
        self.out.flush().map_err(|source| StoreError::Io { path: "<event log>".into(), source })?;
        Ok(self.out)
    }
}

pub fn read_from<R: BufRead>(r: R) -> Result<Vec<ErroneousEvent>, StoreError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|source| StoreError::Io { path: "<event log>".into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn read_all(path: &Path) -> Result<Vec<ErroneousEvent>, StoreError> {
    let f = File::open(path).map_err(io_err(path))?;
    read_from(BufReader::new(f)).map_err(|e| match e {
        StoreError::Io { source, .. } => StoreError::Io { path: path.display().to_string(), source },
        e => e,
    })
}

pub fn write_all(path: &Path, events: &[ErroneousEvent]) -> Result<(), StoreError> {
    let mut w = EventWriter::create(path)?;
    for e in events {
        w.append(e)?;
    }
    w.finish()?;
    Ok(())
}

/// Sorts events into log order. Stable, so equal keys keep input order.
pub fn sort_events(events: &mut [ErroneousEvent]) {
    events.sort_by_key(|e| e.order_key());
}

pub fn merge(paths: &[PathBuf]) -> Result<Vec<ErroneousEvent>, StoreError> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_all(p)?);
    }
    sort_events(&mut all);
    Ok(all)
}

/// Location of the counters file written next to an event log.
pub fn counters_path(events: &Path) -> PathBuf {
    events.with_extension("counters.json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut s = serde_json::to_string_pretty(value).expect("value serialises");
    s.push('\n');
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let s = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(|e| StoreError::MalformedLine { line: e.line(), msg: e.to_string() })
}
