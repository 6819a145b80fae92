//! Ethernet / IPv4 / TCP / UDP / ICMP decoding into [`PacketRecord`]s.
//!
//! Every read is bounds-checked against the captured bytes; malformed input
//! yields [`Undecodable`], never a panic.

use std::fmt;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

use super::pcap::LinkType;
use crate::time::Timestamp;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88a8;

pub const ICMP_ECHO_REPLY: u8 = 0;
pub const ICMP_DEST_UNREACHABLE: u8 = 3;
pub const ICMP_ECHO_REQUEST: u8 = 8;

/// ICMP types whose body quotes the offending datagram.
pub fn is_icmp_error_type(icmp_type: u8) -> bool {
    matches!(icmp_type, 3 | 4 | 5 | 11 | 12)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IpProto {
    Icmp,
    Tcp,
    Udp,
    Other(u8),
}

impl IpProto {
    pub fn from_number(n: u8) -> IpProto {
        match n {
            1 => IpProto::Icmp,
            6 => IpProto::Tcp,
            17 => IpProto::Udp,
            other => IpProto::Other(other),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            IpProto::Icmp => 1,
            IpProto::Tcp => 6,
            IpProto::Udp => 17,
            IpProto::Other(n) => n,
        }
    }

    pub fn name(self) -> String {
        match self {
            IpProto::Icmp => "icmp".into(),
            IpProto::Tcp => "tcp".into(),
            IpProto::Udp => "udp".into(),
            IpProto::Other(n) => n.to_string(),
        }
    }
}

impl Serialize for IpProto {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.number())
    }
}

impl<'de> Deserialize<'de> for IpProto {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        u8::deserialize(d).map(IpProto::from_number)
    }
}

#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;

    pub fn has(self, bit: u8) -> bool {
        self.0 & bit != 0
    }

    pub fn syn(self) -> bool {
        self.has(Self::SYN)
    }

    pub fn ack(self) -> bool {
        self.has(Self::ACK)
    }

    pub fn rst(self) -> bool {
        self.has(Self::RST)
    }

    pub fn fin(self) -> bool {
        self.has(Self::FIN)
    }

    /// SYN set, ACK clear.
    pub fn syn_only(self) -> bool {
        self.syn() && !self.ack()
    }
}

impl fmt::Debug for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [(Self::SYN, "S"), (Self::ACK, "A"), (Self::RST, "R"), (Self::FIN, "F"), (Self::PSH, "P")];
        let s: String = names.iter().filter(|(b, _)| self.has(*b)).map(|(_, n)| *n).collect();
        write!(f, "TcpFlags({s})")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Outbound,
    Inbound,
    Internal,
    Transit,
    /// No internal prefixes configured.
    #[default]
    Unknown,
}

impl Direction {
    pub fn classify(src: Ipv4Addr, dst: Ipv4Addr, internal: &[Ipv4Net]) -> Direction {
        if internal.is_empty() {
            return Direction::Unknown;
        }
        match (is_internal(src, internal), is_internal(dst, internal)) {
            (true, false) => Direction::Outbound,
            (false, true) => Direction::Inbound,
            (true, true) => Direction::Internal,
            (false, false) => Direction::Transit,
        }
    }
}

pub fn is_internal(addr: Ipv4Addr, prefixes: &[Ipv4Net]) -> bool {
    prefixes.iter().any(|p| p.contains(&addr))
}

/// The original datagram quoted inside an ICMP error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InnerQuote {
    pub orig_src_ip: Ipv4Addr,
    pub orig_dst_ip: Ipv4Addr,
    pub orig_proto: IpProto,
    /// For a quoted ICMP echo request this is the echo identifier.
    pub orig_src_port: u16,
    pub orig_dst_port: u16,
    /// Bytes available after the ICMP error header.
    pub quoted_bytes: u16,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PacketRecord {
    pub ts: Timestamp,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub ip_proto: IpProto,
    pub src_port: u16,
    pub dst_port: u16,
    pub tcp_flags: TcpFlags,
    pub icmp_type: Option<u8>,
    pub icmp_code: Option<u8>,
    /// Identifier of ICMP echo request/reply messages.
    pub icmp_echo_id: Option<u16>,
    pub embedded: Option<InnerQuote>,
    pub l4_payload_len: u32,
    pub direction: Direction,
}

impl PacketRecord {
    pub fn is_icmp_error(&self) -> bool {
        self.ip_proto == IpProto::Icmp && self.icmp_type.is_some_and(is_icmp_error_type)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UndecodableReason {
    /// Not an IP frame at all (ARP, LLDP, ...).
    NonIp,
    Ipv6,
    BadIpVersion,
    Truncated,
    BadHeaderLength,
    /// Non-first fragment; carries no L4 header.
    Fragment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("undecodable packet: {reason:?}")]
pub struct Undecodable {
    pub reason: UndecodableReason,
}

impl Undecodable {
    pub fn is_non_ip(&self) -> bool {
        self.reason == UndecodableReason::NonIp
    }
}

fn fail<T>(reason: UndecodableReason) -> Result<T, Undecodable> {
    Err(Undecodable { reason })
}

#[inline]
fn be16(b: &[u8], off: usize) -> Option<u16> {
    Some(u16::from_be_bytes([*b.get(off)?, *b.get(off + 1)?]))
}

#[inline]
fn addr(b: &[u8], off: usize) -> Option<Ipv4Addr> {
    let s = b.get(off..off + 4)?;
    Some(Ipv4Addr::new(s[0], s[1], s[2], s[3]))
}

/// Byte offsets of the headers within a captured frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub l3_offset: usize,
    pub ip_header_len: usize,
    /// Value of the IPv4 total-length field.
    pub ip_total_len: usize,
    pub proto: IpProto,
    pub l4_offset: usize,
    /// Header bytes of the transport layer that are always kept (20+ for TCP,
    /// 8 for UDP and ICMP).
    pub l4_header_len: usize,
}

impl Layout {
    pub fn payload_offset(&self) -> usize {
        self.l4_offset + self.l4_header_len
    }
}

/// Locates the IPv4 header and the transport header in a captured frame.
pub fn layout(bytes: &[u8], link: LinkType) -> Result<Layout, Undecodable> {
    use UndecodableReason::*;
    let l3 = match link {
        LinkType::RawIp => {
            let Some(&first) = bytes.first() else { return fail(Truncated) };
            match first >> 4 {
                4 => 0,
                6 => return fail(Ipv6),
                _ => return fail(BadIpVersion),
            }
        }
        LinkType::Ethernet => {
            let mut off = 12;
            let mut ethertype = be16(bytes, off).ok_or(Undecodable { reason: Truncated })?;
            // Up to two stacked VLAN tags.
            for _ in 0..2 {
                if ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
                    off += 4;
                    ethertype = be16(bytes, off).ok_or(Undecodable { reason: Truncated })?;
                }
            }
            match ethertype {
                ETHERTYPE_IPV4 => off + 2,
                ETHERTYPE_IPV6 => return fail(Ipv6),
                _ => return fail(NonIp),
            }
        }
    };
    let ip = &bytes[l3.min(bytes.len())..];
    if ip.len() < 20 {
        return fail(Truncated);
    }
    if ip[0] >> 4 != 4 {
        return fail(BadIpVersion);
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    if ihl < 20 {
        return fail(BadHeaderLength);
    }
    if ip.len() < ihl {
        return fail(Truncated);
    }
    let total_len = usize::from(be16(ip, 2).unwrap_or(0));
    if total_len != 0 && total_len < ihl {
        return fail(BadHeaderLength);
    }
    let frag = be16(ip, 6).unwrap_or(0) & 0x1fff;
    if frag != 0 {
        return fail(Fragment);
    }
    let proto = IpProto::from_number(ip[9]);
    let l4 = l3 + ihl;
    let l4_header_len = match proto {
        IpProto::Tcp => {
            let doff = usize::from(bytes.get(l4 + 12).ok_or(Undecodable { reason: Truncated })? >> 4) * 4;
            if doff < 20 {
                return fail(BadHeaderLength);
            }
            if bytes.len() < l4 + 20 {
                return fail(Truncated);
            }
            // Options may be cut by the snap length; only the fixed part is required.
            doff
        }
        IpProto::Udp | IpProto::Icmp => {
            if bytes.len() < l4 + 8 {
                return fail(Truncated);
            }
            8
        }
        IpProto::Other(_) => 0,
    };
    Ok(Layout {
        l3_offset: l3,
        ip_header_len: ihl,
        ip_total_len: if total_len == 0 { bytes.len() - l3 } else { total_len },
        proto,
        l4_offset: l4,
        l4_header_len,
    })
}

/// Parses the datagram quoted in an ICMP error body.
pub fn parse_quote(body: &[u8]) -> Option<InnerQuote> {
    if body.len() < 20 || body[0] >> 4 != 4 {
        return None;
    }
    let ihl = usize::from(body[0] & 0x0f) * 4;
    if ihl < 20 || body.len() < ihl {
        return None;
    }
    let proto = IpProto::from_number(body[9]);
    let l4 = &body[ihl..];
    let (sport, dport) = if l4.len() >= 8 {
        match proto {
            IpProto::Tcp | IpProto::Udp => (be16(l4, 0)?, be16(l4, 2)?),
            IpProto::Icmp if l4[0] == ICMP_ECHO_REQUEST || l4[0] == ICMP_ECHO_REPLY => (be16(l4, 4)?, 0),
            _ => (0, 0),
        }
    } else {
        (0, 0)
    };
    Some(InnerQuote {
        orig_src_ip: addr(body, 12)?,
        orig_dst_ip: addr(body, 16)?,
        orig_proto: proto,
        orig_src_port: sport,
        orig_dst_port: dport,
        quoted_bytes: body.len().min(u16::MAX as usize) as u16,
    })
}

pub fn decode(ts: Timestamp, bytes: &[u8], link: LinkType, internal: &[Ipv4Net]) -> Result<PacketRecord, Undecodable> {
    let lay = layout(bytes, link)?;
    let ip = &bytes[lay.l3_offset..];
    let src_ip = addr(ip, 12).ok_or(Undecodable { reason: UndecodableReason::Truncated })?;
    let dst_ip = addr(ip, 16).ok_or(Undecodable { reason: UndecodableReason::Truncated })?;
    let l4 = &bytes[lay.l4_offset..];
    let after_headers = |hdr: usize| lay.ip_total_len.saturating_sub(lay.ip_header_len + hdr) as u32;

    let mut rec = PacketRecord {
        ts,
        src_ip,
        dst_ip,
        ip_proto: lay.proto,
        src_port: 0,
        dst_port: 0,
        tcp_flags: TcpFlags::default(),
        icmp_type: None,
        icmp_code: None,
        icmp_echo_id: None,
        embedded: None,
        l4_payload_len: after_headers(lay.l4_header_len),
        direction: Direction::classify(src_ip, dst_ip, internal),
    };
    match lay.proto {
        IpProto::Tcp => {
            rec.src_port = be16(l4, 0).unwrap_or(0);
            rec.dst_port = be16(l4, 2).unwrap_or(0);
            rec.tcp_flags = TcpFlags(l4[13]);
        }
        IpProto::Udp => {
            rec.src_port = be16(l4, 0).unwrap_or(0);
            rec.dst_port = be16(l4, 2).unwrap_or(0);
        }
        IpProto::Icmp => {
            let (ty, code) = (l4[0], l4[1]);
            rec.icmp_type = Some(ty);
            rec.icmp_code = Some(code);
            if ty == ICMP_ECHO_REQUEST || ty == ICMP_ECHO_REPLY {
                rec.icmp_echo_id = be16(l4, 4);
            }
            if is_icmp_error_type(ty) {
                rec.embedded = parse_quote(&l4[8..]);
            }
        }
        IpProto::Other(_) => {}
    }
    Ok(rec)
}
