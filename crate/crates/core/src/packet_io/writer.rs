use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Endianness, LinkType, PacketRecord, PcapError, Transport, TsResolution};

const DST_MAC: [u8; 6] = [0x02, 0x00, 0x00, 0x00, 0x00, 0x01];
const SRC_MAC: [u8; 6] = [0x02, 0x00, 0x00, 0x00, 0x00, 0x02];
const SNAPLEN: u32 = 65535;

/// Writes `records` as a little-endian, microsecond-resolution classic pcap.
///
/// Frames carry only the headers needed to reproduce each record: the capture
/// length is snapped after the transport header while the original length and
/// the IPv4 total-length field reflect `ip_len`. On error the partial file is
/// removed.
pub fn write_capture<I>(
    path: impl AsRef<Path>,
    records: I,
    link_type: LinkType,
) -> Result<u64, PcapError>
where
    I: IntoIterator<Item = PacketRecord>,
{
    let path = path.as_ref();
    let result = (|| {
        let file = BufWriter::with_capacity(1 << 16, File::create(path)?);
        let mut writer = PcapWriter::new(file, link_type)?;
        for rec in records {
            writer.write_record(&rec)?;
        }
        let written = writer.records_written();
        writer.finish()?.flush()?;
        Ok(written)
    })();
    if result.is_err() {
        let _ = fs::remove_file(path);
    }
    result
}

pub struct PcapWriter<W: Write> {
    inner: W,
    link_type: LinkType,
    endianness: Endianness,
    resolution: TsResolution,
    frame: Vec<u8>,
    written: u64,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(inner: W, link_type: LinkType) -> Result<Self, PcapError> {
        Self::with_format(inner, link_type, Endianness::Little, TsResolution::Micro)
    }

    pub fn with_format(
        mut inner: W,
        link_type: LinkType,
        endianness: Endianness,
        resolution: TsResolution,
    ) -> Result<Self, PcapError> {
        let magic: u32 = match resolution {
            TsResolution::Micro => 0xa1b2_c3d4,
            TsResolution::Nano => 0xa1b2_3c4d,
        };
        let mut header = Vec::with_capacity(24);
        put_u32(&mut header, magic, endianness);
        put_u16(&mut header, 2, endianness);
        put_u16(&mut header, 4, endianness);
        put_u32(&mut header, 0, endianness);
        put_u32(&mut header, 0, endianness);
        put_u32(&mut header, SNAPLEN, endianness);
        put_u32(&mut header, link_type.code(), endianness);
        inner.write_all(&header)?;
        Ok(PcapWriter {
            inner,
            link_type,
            endianness,
            resolution,
            frame: Vec::with_capacity(128),
            written: 0,
        })
    }

    pub fn records_written(&self) -> u64 {
        self.written
    }

    pub fn write_record(&mut self, rec: &PacketRecord) -> Result<(), PcapError> {
        validate(rec)?;
        let ts_sec = u32::try_from(rec.ts_us / 1_000_000).map_err(|_| {
            PcapError::InvalidRecord(format!("timestamp {} out of pcap range", rec.ts_us))
        })?;
        let micros = (rec.ts_us % 1_000_000) as u32;
        let ts_frac = match self.resolution {
            TsResolution::Micro => micros,
            TsResolution::Nano => micros * 1000,
        };

        self.frame.clear();
        let link_len = match self.link_type {
            LinkType::Ethernet => {
                self.frame.extend_from_slice(&DST_MAC);
                self.frame.extend_from_slice(&SRC_MAC);
                self.frame.extend_from_slice(&0x0800u16.to_be_bytes());
                14
            }
            LinkType::RawIp => 0,
        };
        encode_ipv4(&mut self.frame, rec);
        let orig_len = link_len + u32::from(rec.ip_len);

        let mut header = Vec::with_capacity(16);
        put_u32(&mut header, ts_sec, self.endianness);
        put_u32(&mut header, ts_frac, self.endianness);
        put_u32(&mut header, self.frame.len() as u32, self.endianness);
        put_u32(&mut header, orig_len, self.endianness);
        self.inner.write_all(&header)?;
        self.inner.write_all(&self.frame)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<W, PcapError> {
        Ok(self.inner)
    }
}

fn validate(rec: &PacketRecord) -> Result<(), PcapError> {
    if rec.ip_len < 20 {
        return Err(PcapError::InvalidRecord(format!(
            "ip_len {} below the IPv4 minimum of 20",
            rec.ip_len
        )));
    }
    match (rec.transport.has_ports(), rec.src_port, rec.dst_port) {
        (true, Some(_), Some(_)) => {
            let needed = 20 + transport_header_len(rec.transport);
            if usize::from(rec.ip_len) < needed {
                return Err(PcapError::InvalidRecord(format!(
                    "ip_len {} cannot hold a {} header",
                    rec.ip_len, rec.transport
                )));
            }
        }
        (true, None, None) | (false, None, None) => {}
        _ => {
            return Err(PcapError::InvalidRecord(format!(
                "port fields inconsistent with transport {}",
                rec.transport
            )))
        }
    }
    Ok(())
}

fn transport_header_len(transport: Transport) -> usize {
    match transport {
        Transport::Tcp => 20,
        Transport::Udp | Transport::Icmp => 8,
        Transport::OtherIp(_) => 0,
    }
}

fn encode_ipv4(out: &mut Vec<u8>, rec: &PacketRecord) {
    let start = out.len();
    out.extend_from_slice(&[0x45, 0x00]);
    out.extend_from_slice(&rec.ip_len.to_be_bytes());
    out.extend_from_slice(&[
        0x00,
        0x00,
        0x40,
        0x00,
        64,
        rec.transport.protocol_number(),
        0,
        0,
    ]);
    out.extend_from_slice(&rec.src_ip.to_be_bytes());
    out.extend_from_slice(&rec.dst_ip.to_be_bytes());
    let checksum = ipv4_checksum(&out[start..start + 20]);
    out[start + 10..start + 12].copy_from_slice(&checksum.to_be_bytes());

    match (rec.transport, rec.src_port, rec.dst_port) {
        (Transport::Tcp, Some(sport), Some(dport)) => {
            out.extend_from_slice(&sport.to_be_bytes());
            out.extend_from_slice(&dport.to_be_bytes());
            out.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 0]); // seq, ack
            out.extend_from_slice(&[0x50, 0x02, 0x04, 0x00, 0, 0, 0, 0]); // SYN
        }
        (Transport::Udp, Some(sport), Some(dport)) => {
            out.extend_from_slice(&sport.to_be_bytes());
            out.extend_from_slice(&dport.to_be_bytes());
            out.extend_from_slice(&(rec.ip_len - 20).to_be_bytes());
            out.extend_from_slice(&[0, 0]);
        }
        (Transport::Icmp, _, _) if rec.ip_len >= 28 => {
            out.extend_from_slice(&[8, 0, 0, 0, 0, 0, 0, 0]);
        }
        _ => {}
    }
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks_exact(2)
        .map(|w| u32::from(u16::from_be_bytes([w[0], w[1]])))
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn put_u16(out: &mut Vec<u8>, v: u16, e: Endianness) {
    out.extend_from_slice(&match e {
        Endianness::Little => v.to_le_bytes(),
        Endianness::Big => v.to_be_bytes(),
    });
}

fn put_u32(out: &mut Vec<u8>, v: u32, e: Endianness) {
    out.extend_from_slice(&match e {
        Endianness::Little => v.to_le_bytes(),
        Endianness::Big => v.to_be_bytes(),
    });
}
