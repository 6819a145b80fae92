//! Pseudonymisation of internal addresses and removal of transport payloads.
//!
//! Internal addresses keep the bits of the longest configured prefix they fall
//! in; the host bits go through a keyed Feistel permutation (SHA-256 round
//! function, cycle-walking for odd widths), so every prefix is mapped onto
//! itself bijectively. External addresses pass through unchanged.

use std::fmt;
use std::net::Ipv4Addr;
use std::path::Path;

use ipnet::Ipv4Net;
use sha2::{Digest, Sha256};

use crate::codec::build::fix_ipv4_checksum;
use crate::codec::{is_icmp_error_type, layout, IpProto, LinkType, Undecodable};
use crate::detector::{ErroneousEvent, FlowKey};

pub const KEY_ENV: &str = "ERRSIFT_ANON_KEY";
const ROUNDS: u8 = 8;

#[derive(Debug, thiserror::Error)]
pub enum KeyError {
    #[error("anonymisation key must be 64 hex characters, got {0}")]
    WrongLength(usize),
    #[error("anonymisation key is not valid hex")]
    BadHex,
    #[error("cannot read key file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no anonymisation key: set {KEY_ENV} or pass a key file")]
    Missing,
}

#[derive(Clone)]
pub struct AnonKey {
    key: [u8; 32],
    prefixes: Vec<Ipv4Net>,
}

impl fmt::Debug for AnonKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnonKey").field("key", &"<redacted>").field("prefixes", &self.prefixes).finish()
    }
}

impl AnonKey {
    pub fn new(key: [u8; 32], prefixes: Vec<Ipv4Net>) -> Self {
        let mut prefixes: Vec<Ipv4Net> = prefixes.into_iter().map(|p| p.trunc()).collect();
        // Longest prefix first so the first match is the most specific.
        prefixes.sort_by(|a, b| b.prefix_len().cmp(&a.prefix_len()).then(a.cmp(b)));
        AnonKey { key, prefixes }
    }

    pub fn from_hex(hex_key: &str, prefixes: Vec<Ipv4Net>) -> Result<Self, KeyError> {
        let s = hex_key.trim();
        if s.len() != 64 {
            return Err(KeyError::WrongLength(s.len()));
        }
        let mut key = [0u8; 32];
        hex::decode_to_slice(s, &mut key).map_err(|_| KeyError::BadHex)?;
        Ok(AnonKey::new(key, prefixes))
    }

    /// Reads the key from `file` if given, otherwise from the environment.
    pub fn load(file: Option<&Path>, prefixes: Vec<Ipv4Net>) -> Result<Self, KeyError> {
        match file {
            Some(p) => {
                let s = std::fs::read_to_string(p)
                    .map_err(|source| KeyError::Io { path: p.display().to_string(), source })?;
                AnonKey::from_hex(&s, prefixes)
            }
            None => match std::env::var(KEY_ENV) {
                Ok(s) => AnonKey::from_hex(&s, prefixes),
                Err(_) => Err(KeyError::Missing),
            },
        }
    }

    pub fn prefixes(&self) -> &[Ipv4Net] {
        &self.prefixes
    }

    pub fn pseudonymize(&self, addr: Ipv4Addr) -> Ipv4Addr {
        let Some(net) = self.prefixes.iter().find(|n| n.contains(&addr)) else { return addr };
        let bits = 32 - u32::from(net.prefix_len());
        if bits == 0 {
            return addr;
        }
        let host_mask = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
        let host = u32::from(addr) & host_mask;
        let mapped = self.permute(net, bits, host);
        Ipv4Addr::from((u32::from(addr) & !host_mask) | mapped)
    }

    fn permute(&self, net: &Ipv4Net, bits: u32, value: u32) -> u32 {
        let half = bits.div_ceil(2);
        let domain = 1u64 << bits;
        let mut v = u64::from(value);
        loop {
            v = self.feistel(net, half, v);
            if v < domain {
                return v as u32;
            }
        }
    }

    // Balanced Feistel network on 2*half bits.
    fn feistel(&self, net: &Ipv4Net, half: u32, v: u64) -> u64 {
        let mask = (1u64 << half) - 1;
        let mut left = (v >> half) & mask;
        let mut right = v & mask;
        for round in 0..ROUNDS {
            let f = self.round(net, round, right) & mask;
            (left, right) = (right, left ^ f);
        }
        (left << half) | right
    }

    fn round(&self, net: &Ipv4Net, round: u8, half: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(u32::from(net.network()).to_be_bytes());
        h.update([net.prefix_len(), round]);
        h.update(half.to_be_bytes());
        let d = h.finalize();
        u64::from_be_bytes(d[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn anonymize_event(&self, ev: &ErroneousEvent) -> ErroneousEvent {
        let mut out = ev.clone();
        out.flow = FlowKey {
            initiator_ip: self.pseudonymize(ev.flow.initiator_ip),
            responder_ip: self.pseudonymize(ev.flow.responder_ip),
            ..ev.flow
        };
        if let Some(q) = out.inner.as_mut() {
            q.orig_src_ip = self.pseudonymize(q.orig_src_ip);
            q.orig_dst_ip = self.pseudonymize(q.orig_dst_ip);
        }
        out.anon = true;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Truncated {
    pub bytes: Vec<u8>,
    /// Transport payload length before truncation, from the IP length field.
    pub payload_len: u32,
    /// The transport checksum was zeroed because it no longer matches.
    pub l4_checksum_zeroed: bool,
}

fn l4_checksum_offset(proto: IpProto) -> Option<usize> {
    match proto {
        IpProto::Tcp => Some(16),
        IpProto::Udp => Some(6),
        IpProto::Icmp => Some(2),
        IpProto::Other(_) => None,
    }
}

fn zero_l4_checksum(bytes: &mut [u8], l4_offset: usize, proto: IpProto) -> bool {
    match l4_checksum_offset(proto) {
        Some(off) if bytes.len() >= l4_offset + off + 2 => {
            bytes[l4_offset + off..l4_offset + off + 2].fill(0);
            true
        }
        _ => false,
    }
}

/// End of the bytes that survive truncation: all headers, and for ICMP
/// errors the quoted IP header plus eight bytes.
fn keep_len(bytes: &[u8], lay: &crate::codec::Layout) -> usize {
    let mut keep = lay.payload_offset();
    if lay.proto == IpProto::Icmp && is_icmp_error_type(bytes[lay.l4_offset]) {
        let inner = lay.l4_offset + 8;
        if let Some(&b0) = bytes.get(inner) {
            keep = inner + usize::from(b0 & 0x0f) * 4 + 8;
        }
    }
    keep.min(bytes.len())
}

/// Cuts everything after the transport header. The IP length fields are left
/// alone, so the result reads like a snap-length-limited capture of the
/// original packet. Idempotent.
pub fn truncate_payload(bytes: &[u8], link: LinkType) -> Result<Truncated, Undecodable> {
    let lay = layout(bytes, link)?;
    let payload_len = lay.ip_total_len.saturating_sub(lay.ip_header_len + lay.l4_header_len) as u32;
    let keep = keep_len(bytes, &lay);
    if bytes.len() <= keep {
        return Ok(Truncated { bytes: bytes.to_vec(), payload_len, l4_checksum_zeroed: false });
    }
    let mut out = bytes[..keep].to_vec();
    let zeroed = zero_l4_checksum(&mut out, lay.l4_offset, lay.proto);
    Ok(Truncated { bytes: out, payload_len, l4_checksum_zeroed: zeroed })
}

/// Rewrites internal addresses in the IP header and, for ICMP errors, in the
/// quoted header. Header checksums are recomputed; the transport checksum is
/// zeroed when an address changed, since it covers the addresses.
pub fn anonymize_packet(bytes: &[u8], link: LinkType, key: &AnonKey) -> Result<Vec<u8>, Undecodable> {
    let lay = layout(bytes, link)?;
    let mut out = bytes.to_vec();
    let mut changed = rewrite_addrs(&mut out[lay.l3_offset..], key);
    if lay.proto == IpProto::Icmp && is_icmp_error_type(out[lay.l4_offset]) {
        let inner = lay.l4_offset + 8;
        if out.len() >= inner + 20 && out[inner] >> 4 == 4 {
            changed |= rewrite_addrs(&mut out[inner..], key);
        }
    }
    if changed {
        zero_l4_checksum(&mut out, lay.l4_offset, lay.proto);
    }
    Ok(out)
}

fn rewrite_addrs(ip: &mut [u8], key: &AnonKey) -> bool {
    let mut changed = false;
    for off in [12, 16] {
        let a = Ipv4Addr::new(ip[off], ip[off + 1], ip[off + 2], ip[off + 3]);
        let p = key.pseudonymize(a);
        if p != a {
            ip[off..off + 4].copy_from_slice(&p.octets());
            changed = true;
        }
    }
    if changed {
        fix_ipv4_checksum(ip);
    }
    changed
}

/// Truncation followed by optional pseudonymisation; what gets persisted.
pub fn sanitize(bytes: &[u8], link: LinkType, key: Option<&AnonKey>) -> Result<Vec<u8>, Undecodable> {
    let t = truncate_payload(bytes, link)?;
    match key {
        Some(k) => anonymize_packet(&t.bytes, link, k),
        None => Ok(t.bytes),
    }
}
