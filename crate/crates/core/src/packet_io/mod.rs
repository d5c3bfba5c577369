//! Classic libpcap ingestion and emission.
//!
//! The reader normalizes every frame into a [`PacketRecord`] (UTC microseconds,
//! IPv4 endpoints, transport, ports, IP total length) and keeps an exact
//! accounting of what was discarded in [`IngestStats`]. Only classic pcap is
//! accepted; pcapng files are rejected with a dedicated message.

mod reader;
mod writer;

pub use reader::{open_capture, PcapReader};
pub use writer::{write_capture, PcapWriter};

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Transport protocol carried by an IPv4 packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transport {
    Tcp,
    Udp,
    Icmp,
    /// Any other IP protocol number.
    OtherIp(u8),
}

impl Transport {
    pub const TCP_PROTO: u8 = 6;
    pub const UDP_PROTO: u8 = 17;
    pub const ICMP_PROTO: u8 = 1;

    pub fn from_protocol(proto: u8) -> Self {
        match proto {
            Self::TCP_PROTO => Transport::Tcp,
            Self::UDP_PROTO => Transport::Udp,
            Self::ICMP_PROTO => Transport::Icmp,
            other => Transport::OtherIp(other),
        }
    }

    pub fn protocol_number(self) -> u8 {
        match self {
            Transport::Tcp => Self::TCP_PROTO,
            Transport::Udp => Self::UDP_PROTO,
            Transport::Icmp => Self::ICMP_PROTO,
            Transport::OtherIp(p) => p,
        }
    }

    /// True for the transports that carry 16-bit ports.
    pub fn has_ports(self) -> bool {
        matches!(self, Transport::Tcp | Transport::Udp)
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::Tcp => f.write_str("TCP"),
            Transport::Udp => f.write_str("UDP"),
            Transport::Icmp => f.write_str("ICMP"),
            Transport::OtherIp(p) => write!(f, "IP-{p}"),
        }
    }
}

/// One normalized IPv4 packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Microseconds since the Unix epoch, UTC.
    pub ts_us: u64,
    pub src_ip: u32,
    pub dst_ip: u32,
    pub transport: Transport,
    /// Present only for TCP/UDP with a fully captured transport header.
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    /// IPv4 total-length field in bytes.
    pub ip_len: u16,
}

impl PacketRecord {
    pub fn src_addr(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.src_ip)
    }

    pub fn dst_addr(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.dst_ip)
    }

    /// Epoch second this packet falls into.
    pub fn second(&self) -> u64 {
        self.ts_us / 1_000_000
    }
}

/// Per-file disposition counters.
///
/// `packets_read == records_yielded + skipped_non_ip + skipped_malformed + skipped_cap`
/// holds for every completed read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub packets_read: u64,
    pub records_yielded: u64,
    pub skipped_non_ip: u64,
    pub skipped_malformed: u64,
    pub skipped_cap: u64,
    pub file_first_ts_us: Option<u64>,
    pub file_last_ts_us: Option<u64>,
}

impl IngestStats {
    pub fn is_balanced(&self) -> bool {
        self.packets_read
            == self.records_yielded
                + self.skipped_non_ip
                + self.skipped_malformed
                + self.skipped_cap
    }

    /// Span between the first and the last yielded record, in file order.
    pub fn span_us(&self) -> u64 {
        match (self.file_first_ts_us, self.file_last_ts_us) {
            (Some(first), Some(last)) => last.saturating_sub(first),
            _ => 0,
        }
    }

    /// Sums the counters of another file into this one. Timestamps are not
    /// combined since they are file-scoped.
    pub fn add_counts(&mut self, other: &IngestStats) {
        self.packets_read += other.packets_read;
        self.records_yielded += other.records_yielded;
        self.skipped_non_ip += other.skipped_non_ip;
        self.skipped_malformed += other.skipped_malformed;
        self.skipped_cap += other.skipped_cap;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Big,
    Little,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsResolution {
    Micro,
    Nano,
}

/// Link types understood by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkType {
    Ethernet,
    RawIp,
}

impl LinkType {
    pub fn code(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
            LinkType::RawIp => 101,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(LinkType::Ethernet),
            101 => Some(LinkType::RawIp),
            _ => None,
        }
    }
}

/// Everything the 24-byte global header tells us.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureMeta {
    pub endianness: Endianness,
    pub ts_resolution: TsResolution,
    pub link_type: LinkType,
    pub snaplen: u32,
}

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("pcapng files are not supported; convert to classic pcap first")]
    PcapNg,
    #[error("unknown magic number {0:#010x}: not a classic pcap file")]
    UnknownMagic(u32),
    #[error("truncated global header ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("unsupported link type {0}: only Ethernet (1) and Raw IP (101) are handled")]
    UnsupportedLinkType(u32),
    #[error("record rejected: {0}")]
    InvalidRecord(String),
}

impl PcapError {
    /// True when the input is not a readable classic pcap at all.
    pub fn is_unknown_magic(&self) -> bool {
        matches!(self, PcapError::PcapNg | PcapError::UnknownMagic(_))
    }
}
