//! Classic libpcap file format.
//!
//! 24-byte global header (magic, version 2.4, thiszone, sigfigs, snaplen,
//! linktype) followed by records with a 16-byte header (ts_sec, ts_frac,
//! incl_len, orig_len). Both byte orders and both timestamp resolutions are
//! accepted on read; files are always written in native byte order with
//! microsecond timestamps.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::time::Timestamp;

pub const MAGIC_MICRO: u32 = 0xa1b2_c3d4;
pub const MAGIC_NANO: u32 = 0xa1b2_3c4d;
pub const DEFAULT_SNAP_LEN: u32 = 256;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
// Anything larger than this in incl_len is treated as corruption.
const MAX_RECORD_LEN: u32 = 256 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum PcapError {
    #[error("not a pcap file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("global header truncated ({0} of 24 bytes)")]
    TruncatedHeader(usize),
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error("record {index} exceeds snap length ({len} > {snap_len})")]
    SnapLenExceeded { index: usize, len: usize, snap_len: u32 },
    #[error("record {index} captured length {captured} exceeds original length {original}")]
    CapturedExceedsOriginal { index: usize, captured: usize, original: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkType {
    Ethernet,
    RawIp,
}

impl LinkType {
    pub fn from_code(code: u32) -> Option<LinkType> {
        match code {
            1 => Some(LinkType::Ethernet),
            101 => Some(LinkType::RawIp),
            _ => None,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
            LinkType::RawIp => 101,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsResolution {
    Micro,
    Nano,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub ts: Timestamp,
    pub data: Vec<u8>,
    pub orig_len: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCapture {
    pub link_type: LinkType,
    pub snap_len: u32,
    pub ts_resolution: TsResolution,
    pub thiszone: i32,
    pub sigfigs: u32,
    pub records: Vec<RawRecord>,
    /// Records dropped because the file ended mid-record (only the prefix is
    /// returned).
    pub truncated_records: usize,
}

impl RawCapture {
    pub fn new(link_type: LinkType, snap_len: u32) -> Self {
        RawCapture {
            link_type,
            snap_len,
            ts_resolution: TsResolution::Micro,
            thiszone: 0,
            sigfigs: 0,
            records: Vec::new(),
            truncated_records: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Header {
    swapped: bool,
    resolution: TsResolution,
    thiszone: i32,
    sigfigs: u32,
    snap_len: u32,
    link_type: LinkType,
}

/// Streaming reader over pcap records.
pub struct PcapReader<R> {
    inner: R,
    header: Header,
    index: usize,
    truncated: usize,
    done: bool,
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut buf = [0u8; GLOBAL_HEADER_LEN];
        let n = read_fully(&mut inner, &mut buf)?;
        if n >= 4 {
            parse_magic(&buf)?;
        }
        if n < GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedHeader(n));
        }
        let (swapped, resolution) = parse_magic(&buf)?;
        let u32_at = |off: usize| {
            let b = [buf[off], buf[off + 1], buf[off + 2], buf[off + 3]];
            if swapped {
                u32::from_be_bytes(b)
            } else {
                u32::from_le_bytes(b)
            }
        };
        let link_code = u32_at(20);
        let link_type =
            LinkType::from_code(link_code).ok_or(PcapError::UnsupportedLinkType(link_code))?;
        Ok(PcapReader {
            inner,
            header: Header {
                swapped,
                resolution,
                thiszone: u32_at(8) as i32,
                sigfigs: u32_at(12),
                snap_len: u32_at(16),
                link_type,
            },
            index: 0,
            truncated: 0,
            done: false,
        })
    }

    pub fn link_type(&self) -> LinkType {
        self.header.link_type
    }

    pub fn snap_len(&self) -> u32 {
        self.header.snap_len
    }

    pub fn ts_resolution(&self) -> TsResolution {
        self.header.resolution
    }

    /// Number of records lost to a truncated tail (0 or 1).
    pub fn truncated_records(&self) -> usize {
        self.truncated
    }

    pub fn next_record(&mut self) -> Result<Option<RawRecord>, PcapError> {
        if self.done {
            return Ok(None);
        }
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        let n = read_fully(&mut self.inner, &mut hdr)?;
        if n == 0 {
            self.done = true;
            return Ok(None);
        }
        if n < RECORD_HEADER_LEN {
            return Ok(self.stop_truncated());
        }
        let u32_at = |off: usize| {
            let b = [hdr[off], hdr[off + 1], hdr[off + 2], hdr[off + 3]];
            if self.header.swapped {
                u32::from_be_bytes(b)
            } else {
                u32::from_le_bytes(b)
            }
        };
        let (sec, frac, incl, orig) = (u32_at(0), u32_at(4), u32_at(8), u32_at(12));
        if incl > MAX_RECORD_LEN {
            return Ok(self.stop_truncated());
        }
        let mut data = vec![0u8; incl as usize];
        if read_fully(&mut self.inner, &mut data)? < data.len() {
            return Ok(self.stop_truncated());
        }
        let frac_nanos = match self.header.resolution {
            TsResolution::Micro => i64::from(frac) * 1_000,
            TsResolution::Nano => i64::from(frac),
        };
        self.index += 1;
        Ok(Some(RawRecord {
            ts: Timestamp::from_nanos(i64::from(sec) * 1_000_000_000 + frac_nanos),
            data,
            orig_len: orig,
        }))
    }

    fn stop_truncated(&mut self) -> Option<RawRecord> {
        log::warn!("pcap truncated after {} records", self.index);
        self.truncated += 1;
        self.done = true;
        None
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<RawRecord, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

fn parse_magic(buf: &[u8]) -> Result<(bool, TsResolution), PcapError> {
    let le = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
    match le {
        MAGIC_MICRO => Ok((false, TsResolution::Micro)),
        MAGIC_NANO => Ok((false, TsResolution::Nano)),
        m if m.swap_bytes() == MAGIC_MICRO => Ok((true, TsResolution::Micro)),
        m if m.swap_bytes() == MAGIC_NANO => Ok((true, TsResolution::Nano)),
        _ => Err(PcapError::BadMagic(u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]))),
    }
}

pub fn read_pcap_from<R: Read>(r: R) -> Result<RawCapture, PcapError> {
    let mut reader = PcapReader::new(r)?;
    let mut records = Vec::new();
    while let Some(rec) = reader.next_record()? {
        records.push(rec);
    }
    Ok(RawCapture {
        link_type: reader.header.link_type,
        snap_len: reader.header.snap_len,
        ts_resolution: reader.header.resolution,
        thiszone: reader.header.thiszone,
        sigfigs: reader.header.sigfigs,
        records,
        truncated_records: reader.truncated,
    })
}

pub fn read_pcap(path: impl AsRef<Path>) -> Result<RawCapture, PcapError> {
    read_pcap_from(BufReader::new(File::open(path)?))
}

/// Outcome of a write; `lossy_timestamps` counts records whose nanosecond
/// fraction could not be represented in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WriteReport {
    pub records: usize,
    pub lossy_timestamps: usize,
}

impl WriteReport {
    pub fn is_lossy(&self) -> bool {
        self.lossy_timestamps > 0
    }
}

/// Streaming microsecond pcap writer.
pub struct PcapWriter<W: Write> {
    inner: W,
    snap_len: u32,
    report: WriteReport,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(inner: W, link_type: LinkType, snap_len: u32) -> io::Result<Self> {
        Self::with_header(inner, link_type, snap_len, 0, 0)
    }

    pub fn with_header(
        mut inner: W,
        link_type: LinkType,
        snap_len: u32,
        thiszone: i32,
        sigfigs: u32,
    ) -> io::Result<Self> {
        let mut hdr = Vec::with_capacity(GLOBAL_HEADER_LEN);
        hdr.extend_from_slice(&MAGIC_MICRO.to_ne_bytes());
        hdr.extend_from_slice(&2u16.to_ne_bytes());
        hdr.extend_from_slice(&4u16.to_ne_bytes());
        hdr.extend_from_slice(&thiszone.to_ne_bytes());
        hdr.extend_from_slice(&sigfigs.to_ne_bytes());
        hdr.extend_from_slice(&snap_len.to_ne_bytes());
        hdr.extend_from_slice(&link_type.code().to_ne_bytes());
        inner.write_all(&hdr)?;
        Ok(PcapWriter { inner, snap_len, report: WriteReport::default() })
    }

    pub fn write_record(&mut self, ts: Timestamp, data: &[u8], orig_len: u32) -> Result<(), PcapError> {
        let index = self.report.records;
        if data.len() > self.snap_len as usize {
            return Err(PcapError::SnapLenExceeded { index, len: data.len(), snap_len: self.snap_len });
        }
        if data.len() > orig_len as usize {
            return Err(PcapError::CapturedExceedsOriginal { index, captured: data.len(), original: orig_len });
        }
        let nanos = ts.subsec_nanos();
        if !nanos.is_multiple_of(1_000) {
            self.report.lossy_timestamps += 1;
        }
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        hdr[0..4].copy_from_slice(&(ts.secs() as u32).to_ne_bytes());
        hdr[4..8].copy_from_slice(&(nanos / 1_000).to_ne_bytes());
        hdr[8..12].copy_from_slice(&(data.len() as u32).to_ne_bytes());
        hdr[12..16].copy_from_slice(&orig_len.to_ne_bytes());
        self.inner.write_all(&hdr)?;
        self.inner.write_all(data)?;
        self.report.records += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<WriteReport, PcapError> {
        self.inner.flush()?;
        Ok(self.report)
    }
}

pub fn write_pcap_to<W: Write>(capture: &RawCapture, w: W) -> Result<WriteReport, PcapError> {
    let mut writer =
        PcapWriter::with_header(w, capture.link_type, capture.snap_len, capture.thiszone, capture.sigfigs)?;
    for rec in &capture.records {
        writer.write_record(rec.ts, &rec.data, rec.orig_len)?;
    }
    let report = writer.finish()?;
    if report.is_lossy() {
        log::warn!("{} timestamps truncated to microseconds", report.lossy_timestamps);
    }
    Ok(report)
}

pub fn write_pcap(capture: &RawCapture, path: impl AsRef<Path>) -> Result<WriteReport, PcapError> {
    write_pcap_to(capture, BufWriter::new(File::create(path)?))
}
