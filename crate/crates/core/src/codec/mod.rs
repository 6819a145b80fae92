//! Packet capture I/O and header decoding.

pub mod build;
mod decode;
mod pcap;

pub use decode::{
    decode, is_icmp_error_type, is_internal, layout, parse_quote, Direction, InnerQuote, IpProto, Layout,
    PacketRecord, TcpFlags, Undecodable, UndecodableReason, ICMP_DEST_UNREACHABLE, ICMP_ECHO_REPLY,
    ICMP_ECHO_REQUEST,
};
pub use pcap::{
    read_pcap, read_pcap_from, write_pcap, write_pcap_to, LinkType, PcapError, PcapReader, PcapWriter, RawCapture,
    RawRecord, TsResolution, WriteReport, DEFAULT_SNAP_LEN, MAGIC_MICRO, MAGIC_NANO,
};
