use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use crate::codec::{InnerQuote, IpProto, PacketRecord, ICMP_ECHO_REPLY, ICMP_ECHO_REQUEST};

/// 5-tuple oriented by the first packet of the conversation.
///
/// ICMP echo exchanges use the echo identifier as `initiator_port` and 0 as
/// `responder_port`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub initiator_ip: Ipv4Addr,
    pub responder_ip: Ipv4Addr,
    pub proto: IpProto,
    pub initiator_port: u16,
    pub responder_port: u16,
}

/// The keys a packet maps to, depending on which side of a flow sent it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PacketKeys {
    /// Key of the flow this packet would open if its sender initiated it.
    pub as_initiator: Option<FlowKey>,
    /// Key of the flow this packet answers if its receiver initiated it.
    pub as_responder: Option<FlowKey>,
}

impl FlowKey {
    pub fn new(initiator: (Ipv4Addr, u16), responder: (Ipv4Addr, u16), proto: IpProto) -> Self {
        FlowKey {
            initiator_ip: initiator.0,
            responder_ip: responder.0,
            proto,
            initiator_port: initiator.1,
            responder_port: responder.1,
        }
    }

    pub fn reversed(&self) -> FlowKey {
        FlowKey {
            initiator_ip: self.responder_ip,
            responder_ip: self.initiator_ip,
            proto: self.proto,
            initiator_port: self.responder_port,
            responder_port: self.initiator_port,
        }
    }

    /// Key of the flow that carried the quoted datagram.
    pub fn from_quote(q: &InnerQuote) -> FlowKey {
        FlowKey::new((q.orig_src_ip, q.orig_src_port), (q.orig_dst_ip, q.orig_dst_port), q.orig_proto)
    }

    /// Key used for events that are not tied to a tracked flow.
    pub fn host_pair(src: Ipv4Addr, dst: Ipv4Addr, proto: IpProto) -> FlowKey {
        FlowKey::new((src, 0), (dst, 0), proto)
    }

    pub fn for_packet(pkt: &PacketRecord) -> PacketKeys {
        match pkt.ip_proto {
            IpProto::Icmp => {
                let Some(id) = pkt.icmp_echo_id else { return PacketKeys::default() };
                match pkt.icmp_type {
                    Some(ICMP_ECHO_REQUEST) => PacketKeys {
                        as_initiator: Some(FlowKey::new((pkt.src_ip, id), (pkt.dst_ip, 0), IpProto::Icmp)),
                        as_responder: None,
                    },
                    Some(ICMP_ECHO_REPLY) => PacketKeys {
                        as_initiator: None,
                        as_responder: Some(FlowKey::new((pkt.dst_ip, id), (pkt.src_ip, 0), IpProto::Icmp)),
                    },
                    _ => PacketKeys::default(),
                }
            }
            proto => {
                let fwd = FlowKey::new((pkt.src_ip, pkt.src_port), (pkt.dst_ip, pkt.dst_port), proto);
                PacketKeys { as_initiator: Some(fwd), as_responder: Some(fwd.reversed()) }
            }
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}>{}:{}/{}",
            self.initiator_ip,
            self.initiator_port,
            self.responder_ip,
            self.responder_port,
            self.proto.name()
        )
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid flow key {0:?}")]
pub struct FlowKeyParseError(String);

impl FromStr for FlowKey {
    type Err = FlowKeyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || FlowKeyParseError(s.to_string());
        let (ends, proto) = s.rsplit_once('/').ok_or_else(err)?;
        let (a, b) = ends.split_once('>').ok_or_else(err)?;
        let endpoint = |e: &str| -> Option<(Ipv4Addr, u16)> {
            let (ip, port) = e.rsplit_once(':')?;
            Some((ip.parse().ok()?, port.parse().ok()?))
        };
        let proto = match proto {
            "icmp" => IpProto::Icmp,
            "tcp" => IpProto::Tcp,
            "udp" => IpProto::Udp,
            n => IpProto::from_number(n.parse().map_err(|_| err())?),
        };
        Ok(FlowKey::new(endpoint(a).ok_or_else(err)?, endpoint(b).ok_or_else(err)?, proto))
    }
}

impl serde::Serialize for FlowKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for FlowKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
