use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::Path;

use super::{
    CaptureMeta, Endianness, IngestStats, LinkType, PacketRecord, PcapError, Transport,
    TsResolution,
};

const MAGIC_MICRO: u32 = 0xa1b2_c3d4;
const MAGIC_NANO: u32 = 0xa1b2_3c4d;
const PCAPNG_SHB: u32 = 0x0a0d_0d0a;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;
const MAX_VLAN_TAGS: usize = 4;

/// Anything larger is treated as a garbled record header; the stream cannot
/// be resynchronized past it.
const MAX_INCL_LEN: u32 = 16 * 1024 * 1024;

/// Opens a classic pcap file and decodes its global header.
pub fn open_capture(path: impl AsRef<Path>) -> Result<PcapReader<BufReader<File>>, PcapError> {
    let file = File::open(path.as_ref())?;
    PcapReader::new(BufReader::with_capacity(1 << 16, file))
}

/// Streaming reader over a classic pcap byte stream.
pub struct PcapReader<R> {
    inner: R,
    meta: CaptureMeta,
    buf: Vec<u8>,
    bytes_read: u64,
}

enum Decoded {
    Record(PacketRecord),
    NonIp,
    Malformed,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut header = [0u8; 24];
        let got = read_full(&mut inner, &mut header)?;
        if got >= 4 {
            let raw = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
            if raw == PCAPNG_SHB {
                return Err(PcapError::PcapNg);
            }
        }
        if got < 24 {
            if got >= 4 {
                // Report a foreign magic before complaining about length.
                let le = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
                if decode_magic(le).is_none() {
                    return Err(PcapError::UnknownMagic(u32::from_be_bytes([
                        header[0], header[1], header[2], header[3],
                    ])));
                }
            }
            return Err(PcapError::TruncatedHeader(got));
        }
        let le = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
        let (endianness, ts_resolution) = decode_magic(le).ok_or_else(|| {
            PcapError::UnknownMagic(u32::from_be_bytes([
                header[0], header[1], header[2], header[3],
            ]))
        })?;
        let field = |at: usize| read_u32(&header[at..at + 4], endianness);
        let snaplen = field(16);
        let link_code = field(20);
        let link_type =
            LinkType::from_code(link_code).ok_or(PcapError::UnsupportedLinkType(link_code))?;
        Ok(PcapReader {
            inner,
            meta: CaptureMeta {
                endianness,
                ts_resolution,
                link_type,
                snaplen,
            },
            buf: Vec::with_capacity(2048),
            bytes_read: 24,
        })
    }

    pub fn meta(&self) -> CaptureMeta {
        self.meta
    }

    /// Bytes consumed from the underlying stream so far.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read
    }

    /// Reads every remaining packet, handing valid IPv4 records to `on_record`.
    ///
    /// `max_packets` caps the number of raw frames considered; frames beyond
    /// the cap are still walked so that `skipped_cap` is exact. Truncated or
    /// garbled packets are counted, never fatal. Only I/O failures of the
    /// underlying stream are returned as errors.
    pub fn read_records<F>(
        &mut self,
        max_packets: Option<u64>,
        mut on_record: F,
    ) -> Result<IngestStats, PcapError>
    where
        F: FnMut(&PacketRecord),
    {
        let mut stats = IngestStats::default();
        let endianness = self.meta.endianness;
        let mut rec_header = [0u8; 16];
        loop {
            let got = read_full(&mut self.inner, &mut rec_header)?;
            self.bytes_read += got as u64;
            if got < 16 {
                break;
            }
            let ts_sec = read_u32(&rec_header[0..4], endianness);
            let ts_frac = read_u32(&rec_header[4..8], endianness);
            let incl_len = read_u32(&rec_header[8..12], endianness);

            stats.packets_read += 1;
            if incl_len > MAX_INCL_LEN {
                stats.skipped_malformed += 1;
                break;
            }
            if max_packets.is_some_and(|cap| stats.packets_read > cap) {
                stats.skipped_cap += 1;
                let skipped = io::copy(
                    &mut (&mut self.inner).take(u64::from(incl_len)),
                    &mut io::sink(),
                )?;
                self.bytes_read += skipped;
                if skipped < u64::from(incl_len) {
                    break;
                }
                continue;
            }

            self.buf.resize(incl_len as usize, 0);
            let got = read_full(&mut self.inner, &mut self.buf)?;
            self.bytes_read += got as u64;
            if got < incl_len as usize {
                stats.skipped_malformed += 1;
                break;
            }

            let Some(ts_us) = self.timestamp_us(ts_sec, ts_frac) else {
                stats.skipped_malformed += 1;
                continue;
            };
            match decode_frame(self.meta.link_type, &self.buf, ts_us) {
                Decoded::Record(rec) => {
                    stats.records_yielded += 1;
                    if stats.file_first_ts_us.is_none() {
                        stats.file_first_ts_us = Some(ts_us);
                    }
                    stats.file_last_ts_us = Some(ts_us);
                    on_record(&rec);
                }
                Decoded::NonIp => stats.skipped_non_ip += 1,
                Decoded::Malformed => stats.skipped_malformed += 1,
            }
        }
        debug_assert!(stats.is_balanced());
        Ok(stats)
    }

    /// Nanosecond fractions truncate to whole microseconds.
    fn timestamp_us(&self, sec: u32, frac: u32) -> Option<u64> {
        let micros = match self.meta.ts_resolution {
            TsResolution::Micro if frac < 1_000_000 => u64::from(frac),
            TsResolution::Nano if frac < 1_000_000_000 => u64::from(frac / 1000),
            _ => return None,
        };
        Some(u64::from(sec) * 1_000_000 + micros)
    }
}

fn decode_magic(le: u32) -> Option<(Endianness, TsResolution)> {
    match le {
        MAGIC_MICRO => Some((Endianness::Little, TsResolution::Micro)),
        MAGIC_NANO => Some((Endianness::Little, TsResolution::Nano)),
        m if m.swap_bytes() == MAGIC_MICRO => Some((Endianness::Big, TsResolution::Micro)),
        m if m.swap_bytes() == MAGIC_NANO => Some((Endianness::Big, TsResolution::Nano)),
        _ => None,
    }
}

fn read_u32(bytes: &[u8], endianness: Endianness) -> u32 {
    let arr = [bytes[0], bytes[1], bytes[2], bytes[3]];
    match endianness {
        Endianness::Little => u32::from_le_bytes(arr),
        Endianness::Big => u32::from_be_bytes(arr),
    }
}

fn be16(bytes: &[u8]) -> u16 {
    u16::from_be_bytes([bytes[0], bytes[1]])
}

fn be32(bytes: &[u8]) -> u32 {
    u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
}

/// Fills `buf` as far as the stream allows; returns the number of bytes read.
fn read_full<R: Read>(reader: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn decode_frame(link: LinkType, data: &[u8], ts_us: u64) -> Decoded {
    match link {
        LinkType::Ethernet => {
            if data.len() < 14 {
                return Decoded::Malformed;
            }
            let mut ethertype = be16(&data[12..14]);
            let mut offset = 14;
            let mut tags = 0;
            while ethertype == ETHERTYPE_VLAN {
                tags += 1;
                if tags > MAX_VLAN_TAGS || data.len() < offset + 4 {
                    return Decoded::Malformed;
                }
                ethertype = be16(&data[offset + 2..offset + 4]);
                offset += 4;
            }
            if ethertype != ETHERTYPE_IPV4 {
                return Decoded::NonIp;
            }
            decode_ipv4(&data[offset..], ts_us)
        }
        LinkType::RawIp => match data.first().map(|b| b >> 4) {
            Some(4) => decode_ipv4(data, ts_us),
            Some(6) => Decoded::NonIp,
            _ => Decoded::Malformed,
        },
    }
}

fn decode_ipv4(l3: &[u8], ts_us: u64) -> Decoded {
    if l3.len() < 20 || l3[0] >> 4 != 4 {
        return Decoded::Malformed;
    }
    let header_len = usize::from(l3[0] & 0x0f) * 4;
    if header_len < 20 || l3.len() < header_len {
        return Decoded::Malformed;
    }
    let ip_len = be16(&l3[2..4]);
    if usize::from(ip_len) < header_len {
        return Decoded::Malformed;
    }
    let fragment_offset = be16(&l3[6..8]) & 0x1fff;
    let transport = Transport::from_protocol(l3[9]);
    let src_ip = be32(&l3[12..16]);
    let dst_ip = be32(&l3[16..20]);

    let mut src_port = None;
    let mut dst_port = None;
    if transport.has_ports() && fragment_offset == 0 {
        // Ethernet padding may extend the capture past the IP payload.
        let available = l3.len().min(usize::from(ip_len));
        let needed = header_len + if transport == Transport::Tcp { 20 } else { 8 };
        if available >= needed {
            let l4 = &l3[header_len..];
            src_port = Some(be16(&l4[0..2]));
            dst_port = Some(be16(&l4[2..4]));
        }
    }
    Decoded::Record(PacketRecord {
        ts_us,
        src_ip,
        dst_ip,
        transport,
        src_port,
        dst_port,
        ip_len,
    })
}
