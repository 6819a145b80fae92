//! Crafting Ethernet/IPv4 frames, used by the trace generator and tests.

use std::net::Ipv4Addr;

use super::decode::{TcpFlags, ICMP_ECHO_REQUEST};

const SRC_MAC: [u8; 6] = [0x02, 0x00, 0x5e, 0x00, 0x00, 0x01];
const DST_MAC: [u8; 6] = [0x02, 0x00, 0x5e, 0x00, 0x00, 0x02];

/// RFC 1071 ones'-complement sum, folded and inverted.
pub fn internet_checksum(chunks: &[&[u8]]) -> u16 {
    let mut sum: u32 = 0;
    let mut odd = false;
    for chunk in chunks {
        for &b in chunk.iter() {
            sum += if odd { u32::from(b) } else { u32::from(b) << 8 };
            odd = !odd;
        }
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Recomputes the header checksum of the IPv4 header starting at `ip[0]`.
pub fn fix_ipv4_checksum(ip: &mut [u8]) {
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    if ip.len() < ihl || ihl < 20 {
        return;
    }
    ip[10] = 0;
    ip[11] = 0;
    let c = internet_checksum(&[&ip[..ihl]]);
    ip[10..12].copy_from_slice(&c.to_be_bytes());
}

#[derive(Clone, Copy, Debug)]
pub enum Transport<'a> {
    Tcp { sport: u16, dport: u16, flags: u8, seq: u32, ack: u32 },
    Udp { sport: u16, dport: u16 },
    /// Any ICMP message; `rest` is the 4-byte rest-of-header, `body` follows it.
    Icmp { icmp_type: u8, code: u8, rest: [u8; 4], body: &'a [u8] },
}

/// Builds a complete IPv4 datagram (no link header).
pub fn ipv4_datagram(src: Ipv4Addr, dst: Ipv4Addr, ip_id: u16, transport: Transport<'_>, payload_len: usize) -> Vec<u8> {
    let (proto, mut l4): (u8, Vec<u8>) = match transport {
        Transport::Tcp { sport, dport, flags, seq, ack } => {
            let mut t = Vec::with_capacity(20 + payload_len);
            t.extend_from_slice(&sport.to_be_bytes());
            t.extend_from_slice(&dport.to_be_bytes());
            t.extend_from_slice(&seq.to_be_bytes());
            t.extend_from_slice(&ack.to_be_bytes());
            t.push(0x50);
            t.push(flags);
            t.extend_from_slice(&64240u16.to_be_bytes());
            t.extend_from_slice(&[0, 0, 0, 0]);
            (6, t)
        }
        Transport::Udp { sport, dport } => {
            let mut t = Vec::with_capacity(8 + payload_len);
            t.extend_from_slice(&sport.to_be_bytes());
            t.extend_from_slice(&dport.to_be_bytes());
            t.extend_from_slice(&((8 + payload_len) as u16).to_be_bytes());
            t.extend_from_slice(&[0, 0]);
            (17, t)
        }
        Transport::Icmp { icmp_type, code, rest, body } => {
            let mut t = vec![icmp_type, code, 0, 0];
            t.extend_from_slice(&rest);
            t.extend_from_slice(body);
            (1, t)
        }
    };
    l4.resize(l4.len() + payload_len, 0);
    let total = 20 + l4.len();
    let mut ip = Vec::with_capacity(total);
    ip.extend_from_slice(&[0x45, 0]);
    ip.extend_from_slice(&(total as u16).to_be_bytes());
    ip.extend_from_slice(&ip_id.to_be_bytes());
    ip.extend_from_slice(&[0x40, 0x00, 64, proto, 0, 0]);
    ip.extend_from_slice(&src.octets());
    ip.extend_from_slice(&dst.octets());
    fix_ipv4_checksum(&mut ip);

    let l4_len = l4.len() as u16;
    match proto {
        6 | 17 => {
            let pseudo = pseudo_header(src, dst, proto, l4_len);
            let off = if proto == 6 { 16 } else { 6 };
            let mut c = internet_checksum(&[&pseudo, &l4]);
            if proto == 17 && c == 0 {
                c = 0xffff;
            }
            l4[off..off + 2].copy_from_slice(&c.to_be_bytes());
        }
        _ => {
            let c = internet_checksum(&[&l4]);
            l4[2..4].copy_from_slice(&c.to_be_bytes());
        }
    }
    ip.extend_from_slice(&l4);
    ip
}

pub fn pseudo_header(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, l4_len: u16) -> [u8; 12] {
    let mut p = [0u8; 12];
    p[0..4].copy_from_slice(&src.octets());
    p[4..8].copy_from_slice(&dst.octets());
    p[9] = proto;
    p[10..12].copy_from_slice(&l4_len.to_be_bytes());
    p
}

pub fn ethernet_frame(datagram: &[u8]) -> Vec<u8> {
    let mut f = Vec::with_capacity(14 + datagram.len());
    f.extend_from_slice(&DST_MAC);
    f.extend_from_slice(&SRC_MAC);
    f.extend_from_slice(&0x0800u16.to_be_bytes());
    f.extend_from_slice(datagram);
    f
}

/// ICMP error body: the offending datagram's IP header plus its first eight
/// L4 bytes.
pub fn icmp_quote(offending: &[u8]) -> &[u8] {
    let ihl = usize::from(offending[0] & 0x0f) * 4;
    &offending[..(ihl + 8).min(offending.len())]
}

pub fn tcp(src: Ipv4Addr, sport: u16, dst: Ipv4Addr, dport: u16, flags: u8) -> Vec<u8> {
    ipv4_datagram(src, dst, 1, Transport::Tcp { sport, dport, flags, seq: 1, ack: 0 }, 0)
}

pub fn udp(src: Ipv4Addr, sport: u16, dst: Ipv4Addr, dport: u16, payload_len: usize) -> Vec<u8> {
    ipv4_datagram(src, dst, 1, Transport::Udp { sport, dport }, payload_len)
}

pub fn icmp_error(src: Ipv4Addr, dst: Ipv4Addr, icmp_type: u8, code: u8, offending: &[u8]) -> Vec<u8> {
    let body = icmp_quote(offending);
    ipv4_datagram(src, dst, 1, Transport::Icmp { icmp_type, code, rest: [0; 4], body }, 0)
}

pub fn icmp_echo(src: Ipv4Addr, dst: Ipv4Addr, icmp_type: u8, id: u16, seq: u16) -> Vec<u8> {
    let mut rest = [0u8; 4];
    rest[..2].copy_from_slice(&id.to_be_bytes());
    rest[2..].copy_from_slice(&seq.to_be_bytes());
    ipv4_datagram(src, dst, 1, Transport::Icmp { icmp_type, code: 0, rest, body: &[] }, 32)
}

pub fn echo_request(src: Ipv4Addr, dst: Ipv4Addr, id: u16) -> Vec<u8> {
    icmp_echo(src, dst, ICMP_ECHO_REQUEST, id, 1)
}

pub const SYN: u8 = TcpFlags::SYN;
pub const SYN_ACK: u8 = TcpFlags::SYN | TcpFlags::ACK;
pub const ACK: u8 = TcpFlags::ACK;
pub const RST_ACK: u8 = TcpFlags::RST | TcpFlags::ACK;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_known_vector() {
        // RFC 1071 worked example.
        let data = [0x00, 0x01, 0xf2, 0x03, 0xf4, 0xf5, 0xf6, 0xf7];
        assert_eq!(internet_checksum(&[&data]), !0xddf2);
        // Split at an odd boundary gives the same result.
        assert_eq!(internet_checksum(&[&data[..3], &data[3..]]), !0xddf2);
    }

    #[test]
    fn built_header_verifies() {
        let d = udp(Ipv4Addr::new(10, 0, 0, 1), 1000, Ipv4Addr::new(8, 8, 8, 8), 53, 34);
        assert_eq!(internet_checksum(&[&d[..20]]), 0);
        let pseudo = pseudo_header(Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(8, 8, 8, 8), 17, 42);
        assert_eq!(internet_checksum(&[&pseudo, &d[20..]]), 0);
        assert_eq!(d.len(), 20 + 8 + 34);
    }
}
